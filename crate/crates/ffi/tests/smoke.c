#include <stdio.h>
#include <string.h>
#include "sits_s4.h"

int main(void) {
    int64_t radar[3] = {0, 10, 20};
    int64_t optical[5] = {4, 5, 15, 16, 25};
    size_t ri[3], oi[3];
    S4Modality anchor;
    if (s4_align_timestamps(radar, 3, optical, 5, ri, oi, &anchor) != S4_STATUS_OK) return 1;
    if (anchor != S4_MODALITY_RADAR || oi[0] != 0 || oi[1] != 1 || oi[2] != 3) return 2;

    uint8_t mask[4] = {1, 0, 0, 0};
    double ratio = 0.0;
    if (s4_cloud_cover_ratio(mask, 1, 2, 2, &ratio) != S4_STATUS_OK || ratio != 0.25) return 3;

    S4Checkpoint *h = NULL;
    if (s4_checkpoint_load("/nonexistent.ckpt", &h) != S4_STATUS_IO || h != NULL) return 4;
    char buf[128];
    s4_last_error(buf, sizeof buf);
    if (strstr(buf, "missing file") == NULL) return 5;
    s4_checkpoint_free(NULL);
    printf("%s\n", s4_version());
    return 0;
}
