#include <stdio.h>
#include <string.h>
#include "pal.h"

int main(int argc, char **argv) {
    if (argc != 3) return 64;
    PalModel *model = NULL;
    PalCorpus *corpus = NULL;
    if (pal_model_load(argv[1], &model) != PAL_STATUS_OK) return 1;
    if (pal_corpus_load(argv[2], &corpus) != PAL_STATUS_OK) return 2;

    size_t k = 0, dv = 0, dl = 0;
    double tau_p = 0.0;
    if (pal_model_info(model, &k, &dv, &dl, &tau_p) != PAL_STATUS_OK) return 3;

    double h[256];
    if (k > 256) return 4;
    if (pal_model_encode_corpus(model, corpus, 0, h, k) != PAL_STATUS_OK) return 5;
    double norm = 0.0;
    for (size_t i = 0; i < k; i++) norm += h[i] * h[i];

    if (pal_model_encode_corpus(model, corpus, 0, h, 1) != PAL_STATUS_BUFFER_TOO_SMALL) return 6;
    if (strlen(pal_last_error_message()) == 0) return 7;
    if (pal_model_load("/nonexistent.palc", &model) != PAL_STATUS_IO) return 8;

    printf("k=%zu norm2=%.12f\n", k, norm);
    pal_corpus_free(corpus);
    pal_model_free(NULL);
    return 0;
}
