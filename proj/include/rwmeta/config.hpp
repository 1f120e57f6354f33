#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rwmeta/meta.hpp"

namespace rwmeta::harness {

enum class TaskKind { sine_ood, classify_noise };
enum class Baseline { maml, rwmaml, skyline };
enum class HypergradMode { exact, approx };
enum class WeightInit { scheme_default, maml_uniform, random, custom };
enum class StepSchedule { constant, theorem1 };

/// Everything driving one run. Defaults mirror the reference setup: alpha
/// 0.01, eta 0.001, gamma 0.1, batch sizes 10.
struct ExperimentConfig {
    std::uint64_t seed = 0;

    struct Pool {
        int M = 1000;
        int N = 50;
        int M_test = 100;
        TaskKind task_kind = TaskKind::sine_ood;
        double ood_ratio = 0.0;
        double noise_ratio = 0.0;
        int ways = 5;
        int shots = 3;
        int classes = 10;
        double class_sigma = 0.5;
        int k_query = 10;
        int k_support = 10;
    } pool;

    struct ModelCfg {
        std::vector<int> widths;  // empty: [1,40,40,1] regression, [2,64,64,ways] classification
        models::Activation activation = models::Activation::relu;
        std::int64_t init_seed = -1;  // -1: derive from run seed
        double init_scale = 1.0;
        bool use_bias = true;
    } model;

    meta::AdaptConfig adapt;
    meta::MetaConfig meta;

    struct Reweight {
        double gamma = 0.1;
        reweight::Scheme scheme = reweight::Scheme::task;
        HypergradMode hypergrad = HypergradMode::approx;
        int clusters = 0;  // 0: no sharing
        WeightInit weight_init = WeightInit::scheme_default;
        double weight_init_value = 0.0;  // used when weight_init is custom
        bool normalize_weights = false;
        StepSchedule schedule = StepSchedule::constant;
        double t1_k = 1.0;      // eta_t = min(1, k/T)
        double t1_C = 1.0;      // gamma_t = min(1/L, C/(sigma*sqrt(T)))
        double t1_sigma = 1.0;
        double t1_L = 1.0;
    } reweight;

    struct Run {
        long iterations = 5000;
        long eval_every = 250;
        long dump_every = 0;  // 0: dump weights only at termination
        Baseline baseline = Baseline::maml;
        std::string out_dir = "runs/run";
    } run;
};

/// Parses flat `section.key = value` text; '#' starts a comment.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config_file(const std::string& path);

/// Applies one `section.key=value` override. Unknown keys raise ConfigError
/// naming the field path.
void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value);

/// Deterministic serialization (sorted keys), parseable by parse_config.
std::string serialize_config(const ExperimentConfig& cfg);

/// Cross-field validation; throws ConfigError naming the offending field.
void validate(const ExperimentConfig& cfg);

/// Model with widths resolved against the task kind.
models::Model resolve_model(const ExperimentConfig& cfg);

tasks::PoolSpec pool_spec(const ExperimentConfig& cfg);

/// Step sizes after applying the configured schedule for horizon T.
double effective_eta(const ExperimentConfig& cfg);
double effective_gamma(const ExperimentConfig& cfg);

}  // namespace rwmeta::harness
