/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#include <stdio.h>
#include "nxl.h"

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: smoke MODEL\n");
        return 64;
    }
    NxlModel *model = NULL;
    if (nxl_model_load(argv[1], &model) != NXL_STATUS_OK) {
        fprintf(stderr, "load: %s\n", nxl_last_error());
        return 1;
    }
    NxlModelInfo info;
    nxl_model_info(model, &info);

    uint32_t tokens[] = {0, 5, 3, 8, 2};
    double scores[5];
    NxlAttributionOptions opts = nxl_attribution_options_default();
    NxlStatus status = nxl_attribute(model, tokens, 5, &opts, scores, 5);
    if (status != NXL_STATUS_OK) {
        fprintf(stderr, "attribute: %s\n", nxl_last_error());
        nxl_model_free(model);
        return 1;
    }
    status = nxl_attribute(model, tokens, 5, &opts, scores, 4);
    nxl_model_free(model);

    printf("layers=%zu status=%d", info.n_layers, (int)status);
    for (int i = 0; i < 5; i++) {
        printf(" %.17g", scores[i]);
    }
    printf("\n");
    return 0;
}
