/* Loads a checkpoint and runs the detector on a gray 64x64 image. */
#include <stdio.h>
#include <string.h>

#include "dasnet.h"

#define SIDE 64

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: %s CHECKPOINT\n", argv[0]);
        return 2;
    }
    DasnetModel *model = NULL;
    if (dasnet_model_load(argv[1], &model) != DASNET_STATUS_OK) {
        fprintf(stderr, "error: %s\n", dasnet_last_error());
        return 1;
    }
    uint32_t classes = 0;
    dasnet_model_classes(model, &classes);
    printf("classes=%u\n", classes);

    static uint8_t rgb[3 * SIDE * SIDE];
    memset(rgb, 128, sizeof rgb);
    DasnetResult *result = NULL;
    if (dasnet_detect(model, rgb, SIDE, SIDE, &result) != DASNET_STATUS_OK) {
        fprintf(stderr, "error: %s\n", dasnet_last_error());
        dasnet_model_free(model);
        return 1;
    }
    size_t n = 0;
    dasnet_result_len(result, &n);
    printf("detections=%zu\n", n);
    for (size_t i = 0; i < n; i++) {
        DasnetInstance d;
        dasnet_result_get(result, i, &d);
        printf("%zu class=%u score=%.4f box=%.3f,%.3f,%.3f,%.3f\n", i, d.label, d.score, d.x_min,
               d.y_min, d.x_max, d.y_max);
    }
    dasnet_result_free(result);
    dasnet_model_free(model);
    return 0;
}
