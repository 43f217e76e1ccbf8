/* Build: cargo build -p dpmm-ffi --release
 *        cc crates/ffi/c/example.c -Icrates/ffi/include -Ltarget/release \
 *           -l:libdpmm_ffi.a -lm -lpthread -ldl -o example */
#include <stdio.h>
#include <stdlib.h>

#include "dpmm.h"

int main(void) {
    DpmmDataset *ds = NULL;
    if (dpmm_dataset_generate(5, 500, 1000, 2, 1.0, 50.0, 1, &ds) != DPMM_STATUS_OK) {
        fprintf(stderr, "generate: %s\n", dpmm_last_error());
        return 1;
    }
    DpmmRunOptions opts = dpmm_run_options_default();
    opts.iterations = 50;
    DpmmRun *run = NULL;
    if (dpmm_run(ds, "sync-pooled", "gaussian:dim=2,sigma=1,sigma0=30", &opts, &run) != DPMM_STATUS_OK) {
        fprintf(stderr, "run: %s\n", dpmm_last_error());
        dpmm_dataset_free(ds);
        return 1;
    }
    size_t n = dpmm_dataset_len(ds), len = 0;
    uint64_t *labels = malloc(n * sizeof *labels);
    uint64_t *truth = malloc(n * sizeof *truth);
    double vi = 0.0, loglik = 0.0;
    dpmm_run_labels(run, labels, n, &len);
    dpmm_dataset_truth(ds, truth, n, &len);
    dpmm_variation_of_information(labels, truth, n, &vi);
    dpmm_run_loglik(run, ds, false, &loglik);
    printf("K=%zu loglik=%.2f VI=%.4f messages=%llu\n", dpmm_run_num_components(run), loglik, vi,
           (unsigned long long)dpmm_run_total_messages(run));
    free(labels);
    free(truth);
    dpmm_run_free(run);
    dpmm_dataset_free(ds);
    return 0;
}
