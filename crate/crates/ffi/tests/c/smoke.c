#include <math.h>
#include <stdio.h>
#include <string.h>

#include "modbench.h"

#define CHECK(cond)                                                  \
    do {                                                             \
        if (!(cond)) {                                               \
            fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__, #cond, mb_last_error()); \
            return 1;                                                \
        }                                                            \
    } while (0)

int main(void) {
    MbTask *task = NULL;
    MbModel *model = NULL;
    MbStats *stats = NULL;
    MbMetricReport report;
    MbTrainOptions opts;
    double perf = -1.0, loss = -1.0;

    CHECK(strlen(mb_version()) > 0);
    CHECK(mb_task_new(MB_FAMILY_MLP, 4, 7, &task) == MB_STATUS_OK);
    CHECK(mb_model_new(task, MB_LEVEL_GT_MODULAR, 4000, 1, &model) == MB_STATUS_OK);
    CHECK(mb_model_param_count(model) <= 4000);

    CHECK(mb_train_options_default(MB_FAMILY_MLP, MB_MODE_REGRESSION, &opts) == MB_STATUS_OK);
    opts.iterations = 20;
    opts.eval_every = 10;
    opts.eval_samples = 64;
    CHECK(mb_model_train(model, task, MB_MODE_REGRESSION, &opts, &loss) == MB_STATUS_OK);
    CHECK(isfinite(loss));

    CHECK(mb_model_evaluate(model, task, MB_MODE_REGRESSION, "id", 2000, 3, &perf, &stats) == MB_STATUS_OK);
    CHECK(perf >= 0.0);
    CHECK(mb_stats_total(stats) == 2000);
    CHECK(mb_stats_report(stats, &report) == MB_STATUS_OK);
    CHECK(report.alignment < 1e-12);

    CHECK(mb_model_evaluate(model, task, MB_MODE_REGRESSION, "sideways", 10, 3, &perf, NULL) == MB_STATUS_INVALID_ARGUMENT);
    CHECK(strstr(mb_last_error(), "sideways") != NULL);
    CHECK(mb_task_new(9, 4, 7, NULL) == MB_STATUS_INVALID_ARGUMENT);

    mb_stats_free(stats);
    mb_model_free(model);
    mb_task_free(task);
    puts("ok");
    return 0;
}
