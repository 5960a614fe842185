#include <math.h>
#include <stdio.h>
#include <string.h>

#include "langevin_cutoff.h"

#define CHECK(cond)                                              \
    do {                                                         \
        if (!(cond)) {                                           \
            fprintf(stderr, "%s:%d: %s\n", __FILE__, __LINE__, #cond); \
            return 1;                                            \
        }                                                        \
    } while (0)

int main(void) {
    LcModel *model = NULL;
    CHECK(lc_model_new_builtin("harmonic", 2.0, &model) == LC_STATUS_OK);
    size_t d = 0;
    CHECK(lc_model_dim(model, &d) == LC_STATUS_OK && d == 1);

    double sigma[4];
    CHECK(lc_stationary_cov(model, sigma, 4) == LC_STATUS_OK);
    CHECK(fabs(sigma[0] - 0.25) < 1e-12 && fabs(sigma[3] - 0.25) < 1e-12);
    CHECK(fabs(sigma[1]) < 1e-12 && fabs(sigma[2]) < 1e-12);

    double x[2] = {1.0, 0.0};
    LcMixing mix;
    CHECK(lc_mixing_time(model, x, 2, 1e-4, &mix) == LC_STATUS_OK);
    CHECK(fabs(mix.eta - 1.0) < 1e-8 && mix.nu == 1);

    double times[2] = {0.0, 200.0};
    double tv[2];
    CHECK(lc_gaussian_tv_curve(model, x, 2, 1e-4, times, 2, tv) == LC_STATUS_OK);
    CHECK(tv[0] > 0.999 && tv[1] < 1e-6);
    lc_model_free(model);

    double rot[4] = {1.0, -5.0, 5.0, 1.0};
    LcVerdict verdict;
    CHECK(lc_classify_linear(rot, 2, 1.0, &verdict) == LC_STATUS_OK);
    CHECK(verdict == LC_VERDICT_UNSTABLE);
    CHECK(lc_model_new_linear(rot, 2, 1.0, &model) == LC_STATUS_OK);
    CHECK(lc_stationary_cov(model, NULL, 16) == LC_STATUS_NULL_POINTER);
    double big[16];
    CHECK(lc_stationary_cov(model, big, 16) == LC_STATUS_UNSTABLE);
    char msg[256];
    CHECK(lc_last_error_message(msg, sizeof msg) > 1);
    CHECK(strstr(msg, "not stable") != NULL);
    lc_model_free(model);

    CHECK(fabs(lc_tv_unit(2.0) - erf(1.0 / sqrt(2.0))) < 1e-14);
    printf("ok %s\n", lc_version());
    return 0;
}
