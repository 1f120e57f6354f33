#pragma once

#include <functional>

namespace rwmeta::harness {

/// One evaluation row of a training run. test_metric is post-adaptation MSE
/// for regression pools and accuracy for classification pools.
struct MetricRecord {
    long iter = 0;
    double train_meta_loss = 0.0;
    double val_meta_loss = 0.0;
    double test_metric = 0.0;
    double hypergrad_norm_sq = 0.0;
    double mean_weight_id = 0.0;
    double mean_weight_ood = 0.0;
    double mean_weight_clean = 0.0;
    double mean_weight_noisy = 0.0;
    double wallclock_seconds = 0.0;
};

using MetricSink = std::function<void(const MetricRecord&)>;

}  // namespace rwmeta::harness
