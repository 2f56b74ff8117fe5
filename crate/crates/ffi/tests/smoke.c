#include <stdio.h>
#include <string.h>
#include "prunelab.h"

#define CHECK(call)                                                   \
    do {                                                              \
        enum PlStatus s_ = (call);                                    \
        if (s_ != PL_STATUS_OK) {                                     \
            fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_, pl_last_error()); \
            return 1;                                                 \
        }                                                             \
    } while (0)

int main(void) {
    PlModel *m = NULL;
    size_t d = 0, r = 0, pruned = 0;
    CHECK(pl_model_build("mini_conv", 10, 16, 7, &m));
    CHECK(pl_model_prune(m, 0.2, &pruned));
    CHECK(pl_model_counts(m, &d, &r));
    if (r + pruned != d) return 2;

    float images[3 * 16 * 16];
    float logits[10];
    for (size_t i = 0; i < sizeof images / sizeof *images; i++) images[i] = (float)(i % 7) / 7.0f;
    CHECK(pl_model_predict(m, images, 3 * 16 * 16, 1, logits, 10));

    char *json = NULL;
    CHECK(pl_model_sparsity_json(m, 0.0, &json));
    if (strstr(json, "global_fraction") == NULL) return 3;
    pl_string_free(json);

    if (pl_model_build("nope", 10, 16, 0, &m) != PL_STATUS_CONFIG) return 4;
    pl_model_free(m);
    printf("%s %zu %zu\n", pl_version(), d, r);
    return 0;
}
