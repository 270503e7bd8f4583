//! Property tests for the invariants of every module (100 cases each).

mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sits_s4::data_io::{read_sample, write_sample};
use sits_s4::evaluation::{accumulate_confusion, bin_index, miou, ConfusionMatrix, DEFAULT_CLOUD_EDGES};
use sits_s4::losses::{cross_modal_reconstruction, infonce_anchor, mmst_contrastive, LossConfig, PixelFeatures};
use sits_s4::models::{pad_series, ModelConfig, S4Net};
use sits_s4::sits::{
    cloud_cover_ratio, fit_normalization, nearest_timestamp_align, normalize, Modality, ModalitySeries,
};
use sits_s4::synthetic::{generate_sample, WorldConfig};
use sits_s4::tensor::Tensor;
use sits_s4::training::select_labeled;

use common::*;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 100,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn times_from_gaps(gaps: &[i64], start: i64) -> Vec<i64> {
    gaps.iter()
        .scan(start, |s, g| {
            *s += g;
            Some(*s)
        })
        .collect()
}

fn series(m: Modality, times: Vec<i64>, hw: usize, seed: u64) -> ModalitySeries {
    let c = m.default_channels();
    let n = times.len() * c * hw * hw;
    let data = uniform(n, -2.0, 5.0, seed).into_iter().map(|v| v as f32).collect();
    ModalitySeries::new(m, [times.len(), c, hw, hw], times, data).unwrap()
}

fn pixels(p: usize, d: usize, data: Vec<f64>) -> PixelFeatures {
    PixelFeatures::new(p, d, data)
}

proptest! {
    #![proptest_config(config())]

    // ---- sits ----

    #[test]
    fn alignment_length_and_optimality(
        gr in prop::collection::vec(1i64..6, 1..30),
        go in prop::collection::vec(1i64..6, 1..30),
        offset in -15i64..15,
    ) {
        let (tr, to) = (times_from_gaps(&gr, 0), times_from_gaps(&go, offset));
        let a = nearest_timestamp_align(&series(Modality::Radar, tr.clone(), 1, 1), &series(Modality::Optical, to.clone(), 1, 2)).unwrap();
        prop_assert_eq!(a.frames(), tr.len().min(to.len()));
        prop_assert_eq!(a.radar.frames(), a.optical.frames());
        let (anchor, other) = if tr.len() <= to.len() { (&tr, &to) } else { (&to, &tr) };
        for &(i, j) in &a.pairing {
            let d = (other[j] - anchor[i]).abs();
            prop_assert!(other.iter().all(|&t| (t - anchor[i]).abs() >= d));
            prop_assert_eq!(j, oracle_nearest(other, anchor[i]));
        }
    }

    #[test]
    fn alignment_idempotent_on_equal_timestamps(g in prop::collection::vec(1i64..100, 1..30)) {
        let t = times_from_gaps(&g, 0);
        let a = nearest_timestamp_align(&series(Modality::Radar, t.clone(), 2, 3), &series(Modality::Optical, t.clone(), 2, 4)).unwrap();
        let identity: Vec<(usize, usize)> = (0..t.len()).map(|i| (i, i)).collect();
        prop_assert_eq!(&a.pairing, &identity);
        let again = nearest_timestamp_align(&a.radar, &a.optical).unwrap();
        prop_assert_eq!(again.pairing, identity);
        prop_assert_eq!(again.optical, a.optical);
    }

    #[test]
    fn cloud_ratio_is_permutation_invariant(
        mask in prop::collection::vec(any::<bool>(), 1..200),
        seed in any::<u64>(),
    ) {
        let n = mask.len();
        let r = cloud_cover_ratio(&mask, [1, 1, n]).unwrap();
        let mut shuffled = mask.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(cloud_cover_ratio(&shuffled, [n, 1, 1]).unwrap(), r);
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn normalize_after_fit_standardises(
        t in 1usize..6, hw in 1usize..5, seed in any::<u64>(), scale in 0.01f64..100.0,
    ) {
        let times: Vec<i64> = (0..t as i64).collect();
        let mut s = series(Modality::Optical, times, hw, seed);
        let raw: Vec<f32> = s.data().iter().map(|v| (*v as f64 * scale) as f32).collect();
        s = ModalitySeries::new(Modality::Optical, s.dims(), s.timestamps().to_vec(), raw).unwrap();
        let stats = fit_normalization([&s]).unwrap();
        let z = normalize(&s, &stats).unwrap();
        let [t, c, h, w] = z.dims();
        for ci in 0..c {
            let vals: Vec<f64> = (0..t).flat_map(|ti| {
                let f = z.frame(ti);
                f[ci * h * w..(ci + 1) * h * w].iter().map(|&v| v as f64).collect::<Vec<_>>()
            }).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-5, "mean {}", mean);
            if vals.len() > 1 && stats.modalities[&Modality::Optical].std[ci] != 1.0 {
                prop_assert!((std - 1.0).abs() < 1e-5, "std {}", std);
            }
        }
    }

    // ---- losses ----

    #[test]
    fn contrastive_invariant_under_joint_permutation(
        p in 2usize..10, d in 1usize..6, seed in any::<u64>(), perm_seed in any::<u64>(),
    ) {
        let a = uniform(p * d, -1.0, 1.0, seed);
        let b = uniform(p * d, -1.0, 1.0, seed ^ 7);
        let mut perm: Vec<usize> = (0..p).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let permute = |x: &[f64]| perm.iter().flat_map(|&i| x[i * d..(i + 1) * d].to_vec()).collect::<Vec<_>>();
        let cfg = LossConfig::default();
        let l0 = mmst_contrastive(&pixels(p, d, a.clone()), &pixels(p, d, b.clone()), &cfg, 0).unwrap();
        let l1 = mmst_contrastive(&pixels(p, d, permute(&a)), &pixels(p, d, permute(&b)), &cfg, 0).unwrap();
        prop_assert!((l0 - l1).abs() < 1e-12);
    }

    #[test]
    fn infonce_decreases_as_positive_aligns(d in 2usize..6, seed in any::<u64>(), step in 0.05f64..0.5) {
        let anchor = uniform(d, -1.0, 1.0, seed);
        let negs: Vec<Vec<f64>> = (0..3).map(|i| uniform(d, -1.0, 1.0, seed ^ (i + 11))).collect();
        let neg_refs: Vec<&[f64]> = negs.iter().map(|v| v.as_slice()).collect();
        let pos = uniform(d, -1.0, 1.0, seed ^ 99);
        // move the positive toward the anchor direction: similarity rises
        let closer: Vec<f64> = pos.iter().zip(&anchor).map(|(p, a)| p + step * (a - p)).collect();
        let cos = |u: &[f64], v: &[f64]| {
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            dot / (u.iter().map(|x| x * x).sum::<f64>().sqrt() * v.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        prop_assume!(cos(&anchor, &closer) > cos(&anchor, &pos) + 1e-9);
        let before = infonce_anchor(&anchor, &pos, &neg_refs, 0.5).unwrap();
        let after = infonce_anchor(&anchor, &closer, &neg_refs, 0.5).unwrap();
        prop_assert!(after < before);
        prop_assert!(before >= 0.0 && after >= 0.0);
    }

    #[test]
    fn reconstruction_nonnegative_zero_iff_equal(x in prop::collection::vec(-10.0f64..10.0, 1..50), k in 0usize..50) {
        prop_assert_eq!(cross_modal_reconstruction(&x, &x).unwrap(), 0.0);
        let mut y = x.clone();
        let i = k % y.len();
        y[i] += 0.5;
        prop_assert!(cross_modal_reconstruction(&y, &x).unwrap() > 0.0);
    }

    #[test]
    fn losses_finite_under_extreme_scales(p in 2usize..8, d in 1usize..5, seed in any::<u64>(), exp in prop::sample::select(vec![-3i32, 3])) {
        let s = 10f64.powi(exp);
        let a: Vec<f64> = uniform(p * d, -1.0, 1.0, seed).iter().map(|v| v * s).collect();
        let b: Vec<f64> = uniform(p * d, -1.0, 1.0, seed ^ 3).iter().map(|v| v * s).collect();
        let l = mmst_contrastive(&pixels(p, d, a.clone()), &pixels(p, d, b.clone()), &LossConfig::default(), 0).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
        let tiny = LossConfig { tau: 1e-3, ..LossConfig::default() };
        prop_assert!(mmst_contrastive(&pixels(p, d, a.clone()), &pixels(p, d, b.clone()), &tiny, 0).unwrap().is_finite());
        let ce = sits_s4::losses::segmentation_ce(&a, &vec![0; d], p, -1).unwrap();
        prop_assert!(ce.loss.is_finite() && ce.grad.iter().all(|g| g.is_finite()));
        prop_assert!(cross_modal_reconstruction(&a, &b).unwrap().is_finite());
    }

    // ---- evaluation ----

    #[test]
    fn miou_bounds_and_additivity(
        k in 1usize..6,
        px in prop::collection::vec((0i32..6, -1i32..6), 1..80),
        cut in 0usize..80,
    ) {
        let (pred, gt): (Vec<i32>, Vec<i32>) = px.iter()
            .map(|&(p, g)| (p % k as i32, if g < 0 { -1 } else { g % k as i32 }))
            .unzip();
        let cut = cut.min(pred.len());
        let mut whole = ConfusionMatrix::new(k);
        accumulate_confusion(&pred, &gt, -1, &mut whole).unwrap();
        let mut a = ConfusionMatrix::new(k);
        accumulate_confusion(&pred[..cut], &gt[..cut], -1, &mut a).unwrap();
        let mut b = ConfusionMatrix::new(k);
        accumulate_confusion(&pred[cut..], &gt[cut..], -1, &mut b).unwrap();
        a.merge(&b);
        prop_assert_eq!(&a, &whole);
        let r = miou(&whole);
        prop_assert!((0.0..=1.0).contains(&r.miou));
        let diagonal = (0..k).all(|i| (0..k).all(|j| i == j || whole.counts[i][j] == 0));
        prop_assert_eq!(r.miou == 1.0, diagonal && whole.total() > 0);
    }

    #[test]
    fn confusion_is_order_invariant(
        samples in prop::collection::vec(prop::collection::vec((0i32..4, 0i32..4), 1..20), 1..10),
        seed in any::<u64>(),
    ) {
        let acc = |order: &[usize]| {
            let mut cm = ConfusionMatrix::new(4);
            for &i in order {
                let (p, g): (Vec<i32>, Vec<i32>) = samples[i].iter().copied().unzip();
                accumulate_confusion(&p, &g, -1, &mut cm).unwrap();
            }
            cm
        };
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let base = acc(&order);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(acc(&order), base);
    }

    #[test]
    fn cloud_bins_partition_unit_interval(ratio in 0.0f64..=1.0) {
        let e = DEFAULT_CLOUD_EDGES;
        let hits = (0..e.len() - 1).filter(|&b| bin_index(&e, ratio) == Some(b)).count();
        prop_assert_eq!(hits, 1);
        let b = bin_index(&e, ratio).unwrap();
        prop_assert!(ratio >= e[b] && (ratio < e[b + 1] || b == e.len() - 2));
    }

    // ---- training ----

    #[test]
    fn label_subset_is_pure_and_sized(n in 1usize..60, f in 0.01f64..=1.0, seed in any::<u64>(), shuffle in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("loc{i:03}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let pick = select_labeled(&refs, f, seed);
        prop_assert_eq!(pick.len(), ((f * n as f64) - 1e-9).ceil() as usize);
        prop_assert_eq!(&pick, &select_labeled(&refs, f, seed));
        let mut perm = refs.clone();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let mut a: Vec<&str> = pick.iter().map(|&i| refs[i]).collect();
        let mut b: Vec<&str> = select_labeled(&perm, f, seed).iter().map(|&i| perm[i]).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }
}

fn small_world() -> impl Strategy<Value = WorldConfig> {
    (8usize..13, 8usize..13, 2usize..6, 1usize..6, 1usize..6, 0.0f64..1.0, any::<u16>()).prop_map(
        |(h, w, classes, of, rf, cloud_rate, seed)| WorldConfig {
            height: h,
            width: w,
            classes,
            patch_count: 4,
            optical_frames: of,
            radar_frames: rf,
            cloud_rate,
            seed: seed as u64,
            ..WorldConfig::default()
        },
    )
}

proptest! {
    #![proptest_config(config())]

    // ---- synthetic + data_io ----

    #[test]
    fn generator_is_deterministic_and_valid(cfg in small_world(), idx in 0u64..1000) {
        let a = generate_sample(&cfg, idx).unwrap();
        prop_assert_eq!(&a, &generate_sample(&cfg, idx).unwrap());
        prop_assert!(a.validate(Some(cfg.classes)).is_ok());
    }

    #[test]
    fn clouds_only_touch_optical(cfg in small_world(), idx in 0u64..1000, other_rate in 0.0f64..1.0) {
        let a = generate_sample(&cfg, idx).unwrap();
        let b = generate_sample(&WorldConfig { cloud_rate: other_rate, ..cfg.clone() }, idx).unwrap();
        prop_assert_eq!(a.radar.data(), b.radar.data());
        prop_assert_eq!(&a.label, &b.label);
    }

    #[test]
    fn noise_free_profiles_match_iff_labels_match(cfg in small_world(), idx in 0u64..100) {
        let cfg = WorldConfig { cloud_rate: 0.0, optical_noise: 0.0, speckle_sigma: 0.0, ..cfg };
        let s = generate_sample(&cfg, idx).unwrap();
        let label = s.label.as_ref().unwrap();
        let o = &s.optical;
        let [t, c, h, w] = o.dims();
        let profile = |px: usize| -> Vec<f32> {
            (0..t).flat_map(|ti| (0..c).map(move |ci| (ti, ci))).map(|(ti, ci)| o.frame(ti)[ci * h * w + px]).collect()
        };
        for a in 0..h * w {
            for b in (a + 1)..h * w {
                prop_assert_eq!(profile(a) == profile(b), label[a] == label[b]);
            }
        }
    }

    #[test]
    fn archive_round_trip(cfg in small_world(), idx in 0u64..1000) {
        let dir = tempfile::tempdir().unwrap();
        let pair = generate_sample(&cfg, idx).unwrap();
        let path = dir.path().join("s");
        write_sample(&pair, &path).unwrap();
        prop_assert_eq!(read_sample(&path).unwrap(), pair);
    }
}

// ---- models ----

fn tiny_model(seed: u64) -> ModelConfig {
    ModelConfig {
        base_channels: 2,
        depth: 3,
        proj_dim: 3,
        classes: 3,
        init_seed: seed,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn shape_algebra(t in prop::sample::select(vec![4usize, 8]), hw in prop::sample::select(vec![16usize, 32]), n in 1usize..3, seed in 0u64..4) {
        let cfg = tiny_model(seed);
        let mut net = S4Net::new(cfg.clone()).unwrap();
        for m in [Modality::Radar, Modality::Optical] {
            let c = cfg.input_channels(m);
            let x = Tensor::new(vec![n, c, t, hw, hw], uniform(n * c * t * hw * hw, -1.0, 1.0, seed).into_iter().map(|v| v as f32).collect());
            let enc = net.encode(&x, m, false).unwrap();
            let f = cfg.pad_multiple();
            prop_assert_eq!(&enc.features.shape, &vec![n, cfg.feature_dim(), t / f, hw / f, hw / f]);
            let (p, _) = net.project(&enc.features, false).unwrap();
            prop_assert_eq!(&p.shape, &vec![n, cfg.proj_dim, t / f, hw / f, hw / f]);
            let (r, _) = net.reconstruct(&enc, m.other(), false).unwrap();
            prop_assert_eq!(&r.shape, &vec![n, cfg.input_channels(m.other()), t, hw, hw]);
            let (s, _) = net.segment(&enc, false).unwrap();
            prop_assert_eq!(&s.shape, &vec![n, cfg.classes, 1, hw, hw]);
        }
    }

    #[test]
    fn eval_forward_is_bit_deterministic(seed in 0u64..1000, hw in 3usize..9) {
        let mut net = S4Net::new(tiny_model(seed % 3)).unwrap();
        let s = series(Modality::Optical, (0..5).collect(), hw, seed);
        let a = net.segment_series(&s).unwrap();
        let b = net.segment_series(&s).unwrap();
        prop_assert_eq!(a.len(), 3 * hw * hw);
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let padded = pad_series(&s, 4);
        prop_assert_eq!(padded.shape, vec![3, 8, hw.div_ceil(4) * 4, hw.div_ceil(4) * 4]);
    }
}
