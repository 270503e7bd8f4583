use std::ffi::{CStr, CString};
use std::ptr;

use sits_s4::checkpoint::Checkpoint;
use sits_s4::losses::LossConfig;
use sits_s4::models::ModelConfig;
use sits_s4::sits::Modality;
use sits_s4::synthetic::{generate_sample, WorldConfig};
use sits_s4::training::{fit_dataset_stats, init_checkpoint, predict, TrainConfig};
use sits_s4_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe { s4_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_nul_terminated() {
    let v = unsafe { CStr::from_ptr(s4_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn align_matches_core_rules() {
    let radar = [0i64, 10, 20];
    let optical = [4i64, 5, 15, 16, 25];
    let mut ri = [usize::MAX; 3];
    let mut oi = [usize::MAX; 3];
    let mut anchor = S4Modality::Optical;
    let st = unsafe {
        s4_align_timestamps(radar.as_ptr(), 3, optical.as_ptr(), 5, ri.as_mut_ptr(), oi.as_mut_ptr(), &mut anchor)
    };
    assert_eq!(st, S4Status::Ok);
    assert_eq!(anchor, S4Modality::Radar);
    assert_eq!(ri, [0, 1, 2]);
    // 10 is 5 from 5 and 15: tie goes to the earlier frame
    assert_eq!(oi, [0, 1, 3]);
}

#[test]
fn align_rejects_unsorted_and_null() {
    let bad = [3i64, 1];
    let ok = [0i64, 5];
    let mut i = [0usize; 2];
    let mut j = [0usize; 2];
    let mut a = S4Modality::Radar;
    let st = unsafe { s4_align_timestamps(bad.as_ptr(), 2, ok.as_ptr(), 2, i.as_mut_ptr(), j.as_mut_ptr(), &mut a) };
    assert_eq!(st, S4Status::InvalidInput);
    assert!(last_error().contains("strictly increasing"));
    let st = unsafe { s4_align_timestamps(ok.as_ptr(), 2, ok.as_ptr(), 2, ptr::null_mut(), j.as_mut_ptr(), &mut a) };
    assert_eq!(st, S4Status::InvalidArgument);
}

#[test]
fn cloud_ratio() {
    let mask = [1u8, 0, 0, 0, 2, 0, 0, 0];
    let mut r = 0.0;
    assert_eq!(unsafe { s4_cloud_cover_ratio(mask.as_ptr(), 2, 2, 2, &mut r) }, S4Status::Ok);
    assert_eq!(r, 0.25);
    assert_eq!(unsafe { s4_cloud_cover_ratio(mask.as_ptr(), 0, 2, 2, &mut r) }, S4Status::InvalidInput);
}

#[test]
fn contrastive_orthogonal_case() {
    // 4 pixels with identical orthonormal maps: log(1 + 3 e^-2)
    let mut eye = vec![0.0f64; 16];
    for i in 0..4 {
        eye[i * 4 + i] = 1.0;
    }
    let mut loss = 0.0;
    let st = unsafe { s4_contrastive_loss(eye.as_ptr(), eye.as_ptr(), 4, 4, 0.5, &mut loss) };
    assert_eq!(st, S4Status::Ok);
    assert!((loss - (1.0 + 3.0 * (-2.0f64).exp()).ln()).abs() < 1e-12);
    let st = unsafe { s4_contrastive_loss(eye.as_ptr(), eye.as_ptr(), 4, 4, 0.0, &mut loss) };
    assert_eq!(st, S4Status::InvalidConfig);
}

#[test]
fn checkpoint_handle_lifecycle_and_predict() {
    let dir = tempfile::tempdir().unwrap();
    let world = WorldConfig { height: 8, width: 8, ..WorldConfig::default() };
    let pair = generate_sample(&world, 0).unwrap();
    let model = ModelConfig { base_channels: 4, depth: 2, proj_dim: 4, ..ModelConfig::default() };
    let train = TrainConfig { frames: 4, inference_modality: Modality::Radar, ..TrainConfig::default() };
    let stats = fit_dataset_stats(std::slice::from_ref(&pair)).unwrap();
    let mut ckpt = init_checkpoint(model, train, LossConfig::default(), stats).unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let expected = predict(&mut Checkpoint::load(&path, None).unwrap(), &pair.radar).unwrap();

    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut h: *mut S4Checkpoint = ptr::null_mut();
    assert_eq!(unsafe { s4_checkpoint_load(c_path.as_ptr(), &mut h) }, S4Status::Ok);
    let mut classes = 0;
    let mut m = S4Modality::Optical;
    assert_eq!(unsafe { s4_checkpoint_info(h, &mut classes, &mut m) }, S4Status::Ok);
    assert_eq!((classes, m), (5, S4Modality::Radar));

    let [t, c, hh, w] = pair.radar.dims();
    let mut labels = vec![-7i32; hh * w];
    let st = unsafe {
        s4_predict(h, S4Modality::Radar as u32, pair.radar.data().as_ptr(), t, c, hh, w, pair.radar.timestamps().as_ptr(), labels.as_mut_ptr())
    };
    assert_eq!(st, S4Status::Ok);
    assert_eq!(labels, expected);

    let o = &pair.optical;
    let [t, c, hh, w] = o.dims();
    let st = unsafe {
        s4_predict(h, S4Modality::Optical as u32, o.data().as_ptr(), t, c, hh, w, o.timestamps().as_ptr(), labels.as_mut_ptr())
    };
    assert_eq!(st, S4Status::IncompatibleCheckpoint);
    let st = unsafe { s4_predict(h, 9, o.data().as_ptr(), t, c, hh, w, o.timestamps().as_ptr(), labels.as_mut_ptr()) };
    assert_eq!(st, S4Status::InvalidArgument);
    unsafe { s4_checkpoint_free(h) };
    unsafe { s4_checkpoint_free(ptr::null_mut()) };
}

#[test]
fn missing_checkpoint_is_io_error() {
    let p = CString::new("/nonexistent/x.ckpt").unwrap();
    let mut h: *mut S4Checkpoint = ptr::null_mut();
    assert_eq!(unsafe { s4_checkpoint_load(p.as_ptr(), &mut h) }, S4Status::Io);
    assert!(h.is_null());
    assert!(last_error().contains("missing file"));
    let needed = unsafe { s4_last_error(ptr::null_mut(), 0) };
    assert_eq!(needed, last_error().len() + 1);
}
