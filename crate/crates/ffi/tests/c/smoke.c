#include <stdio.h>
#include "scraw.h"

static int32_t count(const ScrawPair *pairs, size_t len, void *user) {
    (void)pairs;
    *(size_t *)user += len;
    return 0;
}

int main(void) {
    const uint32_t counts[] = {1, 0, 2, 0, 3, 0, 0, 1, 2, 0, 1, 4, 5, 2, 0, 1, 0, 0};
    ScrawMatrix *m = NULL;
    ScrawModel *model = NULL;
    double phi = 0.0;
    size_t seen = 0;

    if (scraw_phi(4.0, &phi) != SCRAW_STATUS_OK || phi < 1.9 || phi > 2.0) return 1;
    if (scraw_phi(-1.0, &phi) != SCRAW_STATUS_INVALID_ARGUMENT || scraw_last_error() == NULL) return 2;
    if (scraw_matrix_from_dense(counts, 3, 6, &m) != SCRAW_STATUS_OK) return 3;
    if (scraw_model_fit(m, SCRAW_ESTIMATOR_SQRT, &model) != SCRAW_STATUS_OK) {
        fprintf(stderr, "%s\n", scraw_last_error());
        return 4;
    }
    if (scraw_coex_all(m, model, 0, 1, count, &seen, NULL) != SCRAW_STATUS_OK) return 5;
    printf("pairs %zu\n", seen);
    scraw_model_free(model);
    scraw_matrix_free(m);
    return 0;
}
