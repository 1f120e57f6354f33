#pragma once

#include <string>
#include <vector>

#include "rwmeta/config.hpp"
#include "rwmeta/reweight.hpp"

namespace rwmeta::harness {

struct RunOutput {
    std::string dir;
    std::vector<MetricRecord> metrics;
    std::vector<double> hypergrad_sq_history;
    diffcore::ParamVector final_params;
    reweight::WeightMatrix final_weights;  // empty storage for unweighted baselines
    double train_seconds = 0.0;
    bool diverged = false;
    long diverged_at = -1;
};

/// Runs one experiment into cfg.run.out_dir: stored config, streamed
/// metrics.csv, weight dumps (reweighted runs), final parameters, and
/// plot-data series. Divergence is recorded and partial metrics are kept.
RunOutput run_experiment(const ExperimentConfig& cfg);

struct SweepRow {
    double value = 0.0;
    double test_metric = 0.0;
    double train_seconds = 0.0;
    bool diverged = false;
};

struct SweepResult {
    std::string axis;
    std::vector<SweepRow> rows;
    std::string summary_path;
};

/// One run per axis value with derived seeds (base seed + run index) and
/// isolated run directories; writes a merged summary table.
SweepResult run_sweep(const ExperimentConfig& base, const std::string& axis,
                      const std::vector<double>& values);

enum class GradcheckMutation { none, flip_approx_sign };

struct GradcheckReport {
    struct Check {
        std::string name;
        double max_rel_err = 0.0;
        double tolerance = 0.0;
        bool pass = false;
    };
    std::vector<Check> checks;

    bool all_pass() const;
    std::string to_string() const;
};

/// Derivative verification suite on oracle-sized instances: first-order and
/// HVP finite-difference checks, the hypergradient oracle comparison, the
/// alpha = 0 exact/approx equality, and the scheme-consistency check. The
/// mutation hook corrupts the approximate path to prove the report catches a
/// planted sign error.
GradcheckReport gradcheck(const ExperimentConfig& cfg,
                          GradcheckMutation mutation = GradcheckMutation::none);

// Run-directory file helpers.

inline constexpr const char* kMetricsHeader =
    "iter,train_meta_loss,val_meta_loss,test_metric,hypergrad_norm_sq,mean_weight_id,"
    "mean_weight_ood,mean_weight_clean,mean_weight_noisy,wallclock_seconds";

std::string format_metric_row(const MetricRecord& rec);
std::vector<MetricRecord> read_metrics_csv(const std::string& path);

void write_weight_dump(const std::string& path, const reweight::WeightMatrix& w,
                       const tasks::TaskPool& pool);

void write_params(const std::string& path, const diffcore::ParamVector& p);
diffcore::ParamVector read_params(const std::string& path);

}  // namespace rwmeta::harness
