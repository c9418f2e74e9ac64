/* Minimal consumer of the C API: preset config, counts, receptive field,
 * lint, and one forward pass. Exits nonzero on any mismatch. */
#include "dsnet.h"
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

int main(void) {
    DsnetConfig *cfg = NULL;
    if (dsnet_config_preset("dsnet", 19, &cfg) != DSNET_STATUS_OK) {
        fprintf(stderr, "preset: %s\n", dsnet_last_error());
        return 1;
    }

    uint64_t params = 0;
    if (dsnet_param_count(cfg, &params) != DSNET_STATUS_OK) return 2;
    if (params != 5966579ULL) {
        fprintf(stderr, "unexpected param count %llu\n", (unsigned long long)params);
        return 3;
    }

    DsnetConvSpec chain[3];
    for (int i = 0; i < 3; i++) {
        chain[i].kernel = 3;
        chain[i].dilation = 2;
        chain[i].stride = 1;
        chain[i].in_channels = 1;
        chain[i].out_channels = 1;
    }
    uint64_t rf[3] = {0, 0, 0};
    if (dsnet_receptive_field(chain, 3, rf) != DSNET_STATUS_OK) return 4;
    if (rf[0] != 5 || rf[1] != 9 || rf[2] != 13) {
        fprintf(stderr, "rf ledger %llu %llu %llu\n",
                (unsigned long long)rf[0], (unsigned long long)rf[1],
                (unsigned long long)rf[2]);
        return 5;
    }

    char *json = NULL;
    int32_t disasters = -1;
    if (dsnet_lint_json(cfg, 224, &json, &disasters) != DSNET_STATUS_OK) return 6;
    if (disasters != 0) return 7;
    dsnet_string_free(json);
    dsnet_config_free(cfg);

    DsnetConfig *toy = NULL;
    if (dsnet_config_preset("toy", 4, &toy) != DSNET_STATUS_OK) return 8;
    DsnetModel *model = NULL;
    if (dsnet_model_build(toy, 0, 7, &model) != DSNET_STATUS_OK) {
        fprintf(stderr, "build: %s\n", dsnet_last_error());
        return 9;
    }
    size_t out_len = 0;
    if (dsnet_model_output_len(model, 1, 32, 32, &out_len) != DSNET_STATUS_OK) return 10;
    if (out_len != (size_t)1 * 4 * 32 * 32) return 11;

    size_t in_len = (size_t)1 * 3 * 32 * 32;
    double *input = calloc(in_len, sizeof(double));
    double *output = calloc(out_len, sizeof(double));
    for (size_t i = 0; i < in_len; i++) input[i] = (double)(i % 17) / 17.0;
    if (dsnet_model_forward(model, input, 1, 3, 32, 32, output, out_len) != DSNET_STATUS_OK) {
        fprintf(stderr, "forward: %s\n", dsnet_last_error());
        return 12;
    }
    double sum = 0.0;
    for (size_t i = 0; i < out_len; i++) sum += output[i];
    if (sum != sum) return 13; /* NaN check */

    free(input);
    free(output);
    dsnet_model_free(model);
    dsnet_config_free(toy);
    puts("c smoke test ok");
    return 0;
}
