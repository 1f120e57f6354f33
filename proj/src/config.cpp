#include "rwmeta/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace rwmeta::harness {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

long parse_long(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const long x = std::stol(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    if (trim(v).empty()) return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(parse_long(key, trim(item))));
    return out;
}

std::string join_ints(const std::vector<int>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

}  // namespace

void apply_override(ExperimentConfig& c, const std::string& key, const std::string& v) {
    if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_long(key, v));
    else if (key == "pool.M") c.pool.M = static_cast<int>(parse_long(key, v));
    else if (key == "pool.N") c.pool.N = static_cast<int>(parse_long(key, v));
    else if (key == "pool.M_test") c.pool.M_test = static_cast<int>(parse_long(key, v));
    else if (key == "pool.task_kind") {
        if (v == "sine_ood") c.pool.task_kind = TaskKind::sine_ood;
        else if (v == "classify_noise") c.pool.task_kind = TaskKind::classify_noise;
        else throw ConfigError("pool.task_kind: expected sine_ood or classify_noise, got '" + v + "'");
    }
    else if (key == "pool.ood_ratio") c.pool.ood_ratio = parse_double(key, v);
    else if (key == "pool.noise_ratio") c.pool.noise_ratio = parse_double(key, v);
    else if (key == "pool.ways") c.pool.ways = static_cast<int>(parse_long(key, v));
    else if (key == "pool.shots") c.pool.shots = static_cast<int>(parse_long(key, v));
    else if (key == "pool.classes") c.pool.classes = static_cast<int>(parse_long(key, v));
    else if (key == "pool.class_sigma") c.pool.class_sigma = parse_double(key, v);
    else if (key == "pool.k_query") c.pool.k_query = static_cast<int>(parse_long(key, v));
    else if (key == "pool.k_support") c.pool.k_support = static_cast<int>(parse_long(key, v));
    else if (key == "model.widths") c.model.widths = parse_int_list(key, v);
    else if (key == "model.activation") {
        if (v == "tanh") c.model.activation = models::Activation::tanh;
        else if (v == "relu") c.model.activation = models::Activation::relu;
        else throw ConfigError("model.activation: expected tanh or relu, got '" + v + "'");
    }
    else if (key == "model.init_seed") c.model.init_seed = parse_long(key, v);
    else if (key == "model.init_scale") c.model.init_scale = parse_double(key, v);
    else if (key == "model.use_bias") c.model.use_bias = parse_bool(key, v);
    else if (key == "adapt.alpha") c.adapt.alpha = parse_double(key, v);
    else if (key == "adapt.inner_steps") c.adapt.inner_steps = static_cast<int>(parse_long(key, v));
    else if (key == "meta.eta") c.meta.eta = parse_double(key, v);
    else if (key == "meta.batch_m") c.meta.batch_m = static_cast<int>(parse_long(key, v));
    else if (key == "meta.batch_n") c.meta.batch_n = static_cast<int>(parse_long(key, v));
    else if (key == "reweight.gamma") c.reweight.gamma = parse_double(key, v);
    else if (key == "reweight.scheme") {
        if (v == "task") c.reweight.scheme = reweight::Scheme::task;
        else if (v == "instance") c.reweight.scheme = reweight::Scheme::instance;
        else throw ConfigError("reweight.scheme: expected task or instance, got '" + v + "'");
    }
    else if (key == "reweight.hypergrad") {
        if (v == "exact") c.reweight.hypergrad = HypergradMode::exact;
        else if (v == "approx") c.reweight.hypergrad = HypergradMode::approx;
        else throw ConfigError("reweight.hypergrad: expected exact or approx, got '" + v + "'");
    }
    else if (key == "reweight.clusters") c.reweight.clusters = static_cast<int>(parse_long(key, v));
    else if (key == "reweight.weight_init") {
        if (v == "default") c.reweight.weight_init = WeightInit::scheme_default;
        else if (v == "maml") c.reweight.weight_init = WeightInit::maml_uniform;
        else if (v == "random") c.reweight.weight_init = WeightInit::random;
        else {
            c.reweight.weight_init_value = parse_double(key, v);
            if (c.reweight.weight_init_value < 0)
                throw ConfigError("reweight.weight_init: numeric init must be >= 0");
            c.reweight.weight_init = WeightInit::custom;
        }
    }
    else if (key == "reweight.normalize_weights") c.reweight.normalize_weights = parse_bool(key, v);
    else if (key == "reweight.schedule") {
        if (v == "constant") c.reweight.schedule = StepSchedule::constant;
        else if (v == "theorem1") c.reweight.schedule = StepSchedule::theorem1;
        else throw ConfigError("reweight.schedule: expected constant or theorem1, got '" + v + "'");
    }
    else if (key == "reweight.t1_k") c.reweight.t1_k = parse_double(key, v);
    else if (key == "reweight.t1_C") c.reweight.t1_C = parse_double(key, v);
    else if (key == "reweight.t1_sigma") c.reweight.t1_sigma = parse_double(key, v);
    else if (key == "reweight.t1_L") c.reweight.t1_L = parse_double(key, v);
    else if (key == "run.iterations") c.run.iterations = parse_long(key, v);
    else if (key == "run.eval_every") c.run.eval_every = parse_long(key, v);
    else if (key == "run.dump_every") c.run.dump_every = parse_long(key, v);
    else if (key == "run.baseline") {
        if (v == "maml") c.run.baseline = Baseline::maml;
        else if (v == "rwmaml") c.run.baseline = Baseline::rwmaml;
        else if (v == "skyline") c.run.baseline = Baseline::skyline;
        else throw ConfigError("run.baseline: expected maml, rwmaml, or skyline, got '" + v + "'");
    }
    else if (key == "run.out_dir") c.run.out_dir = v;
    else throw ConfigError("unknown config key '" + key + "'");
}

ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig cfg;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        apply_override(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

std::string serialize_config(const ExperimentConfig& c) {
    std::map<std::string, std::string> kv;
    auto num = [](double x) {
        std::ostringstream os;
        os.precision(17);
        os << x;
        return os.str();
    };
    kv["seed"] = std::to_string(c.seed);
    kv["pool.M"] = std::to_string(c.pool.M);
    kv["pool.N"] = std::to_string(c.pool.N);
    kv["pool.M_test"] = std::to_string(c.pool.M_test);
    kv["pool.task_kind"] = c.pool.task_kind == TaskKind::sine_ood ? "sine_ood" : "classify_noise";
    kv["pool.ood_ratio"] = num(c.pool.ood_ratio);
    kv["pool.noise_ratio"] = num(c.pool.noise_ratio);
    kv["pool.ways"] = std::to_string(c.pool.ways);
    kv["pool.shots"] = std::to_string(c.pool.shots);
    kv["pool.classes"] = std::to_string(c.pool.classes);
    kv["pool.class_sigma"] = num(c.pool.class_sigma);
    kv["pool.k_query"] = std::to_string(c.pool.k_query);
    kv["pool.k_support"] = std::to_string(c.pool.k_support);
    kv["model.widths"] = join_ints(c.model.widths);
    kv["model.activation"] = c.model.activation == models::Activation::tanh ? "tanh" : "relu";
    kv["model.init_seed"] = std::to_string(c.model.init_seed);
    kv["model.init_scale"] = num(c.model.init_scale);
    kv["model.use_bias"] = c.model.use_bias ? "true" : "false";
    kv["adapt.alpha"] = num(c.adapt.alpha);
    kv["adapt.inner_steps"] = std::to_string(c.adapt.inner_steps);
    kv["meta.eta"] = num(c.meta.eta);
    kv["meta.batch_m"] = std::to_string(c.meta.batch_m);
    kv["meta.batch_n"] = std::to_string(c.meta.batch_n);
    kv["reweight.gamma"] = num(c.reweight.gamma);
    kv["reweight.scheme"] = c.reweight.scheme == reweight::Scheme::task ? "task" : "instance";
    kv["reweight.hypergrad"] = c.reweight.hypergrad == HypergradMode::exact ? "exact" : "approx";
    kv["reweight.clusters"] = std::to_string(c.reweight.clusters);
    kv["reweight.weight_init"] =
        c.reweight.weight_init == WeightInit::scheme_default ? "default"
        : c.reweight.weight_init == WeightInit::maml_uniform ? "maml"
        : c.reweight.weight_init == WeightInit::random       ? "random"
                                                             : num(c.reweight.weight_init_value);
    kv["reweight.normalize_weights"] = c.reweight.normalize_weights ? "true" : "false";
    kv["reweight.schedule"] =
        c.reweight.schedule == StepSchedule::constant ? "constant" : "theorem1";
    kv["reweight.t1_k"] = num(c.reweight.t1_k);
    kv["reweight.t1_C"] = num(c.reweight.t1_C);
    kv["reweight.t1_sigma"] = num(c.reweight.t1_sigma);
    kv["reweight.t1_L"] = num(c.reweight.t1_L);
    kv["run.iterations"] = std::to_string(c.run.iterations);
    kv["run.eval_every"] = std::to_string(c.run.eval_every);
    kv["run.dump_every"] = std::to_string(c.run.dump_every);
    kv["run.baseline"] = c.run.baseline == Baseline::maml     ? "maml"
                         : c.run.baseline == Baseline::rwmaml ? "rwmaml"
                                                              : "skyline";
    kv["run.out_dir"] = c.run.out_dir;
    std::string out;
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    return out;
}

void validate(const ExperimentConfig& c) {
    if (c.pool.M < 1) throw ConfigError("pool.M: must be >= 1");
    if (c.pool.N < 1) throw ConfigError("pool.N: must be >= 1");
    if (c.pool.N > c.pool.M / 10) throw ConfigError("pool.N: must satisfy N <= M/10");
    if (c.pool.M_test < 1) throw ConfigError("pool.M_test: must be >= 1");
    if (c.pool.ood_ratio < 0 || c.pool.ood_ratio > 1) throw ConfigError("pool.ood_ratio: in [0,1]");
    if (c.pool.noise_ratio < 0 || c.pool.noise_ratio >= 1)
        throw ConfigError("pool.noise_ratio: in [0,1)");
    if (c.pool.ood_ratio > 0 && c.pool.noise_ratio > 0)
        throw ConfigError("pool.ood_ratio / pool.noise_ratio: mutually exclusive per run");
    if (c.pool.task_kind == TaskKind::sine_ood && c.pool.noise_ratio > 0)
        throw ConfigError("pool.noise_ratio: requires task_kind classify_noise");
    if (c.pool.task_kind == TaskKind::classify_noise && c.pool.ood_ratio > 0)
        throw ConfigError("pool.ood_ratio: requires task_kind sine_ood");
    if (c.pool.ways < 2) throw ConfigError("pool.ways: must be >= 2");
    if (c.pool.shots < 1) throw ConfigError("pool.shots: must be >= 1");
    if (c.pool.task_kind == TaskKind::classify_noise && c.pool.classes < c.pool.ways)
        throw ConfigError("pool.classes: must be >= pool.ways");
    if (c.pool.class_sigma <= 0) throw ConfigError("pool.class_sigma: must be > 0");
    if (c.pool.k_query < 1) throw ConfigError("pool.k_query: must be >= 1");
    if (c.pool.k_support < 1) throw ConfigError("pool.k_support: must be >= 1");
    if (c.adapt.alpha < 0) throw ConfigError("adapt.alpha: must be >= 0");
    if (c.adapt.inner_steps < 1) throw ConfigError("adapt.inner_steps: must be >= 1");
    if (c.meta.eta < 0) throw ConfigError("meta.eta: must be >= 0");
    if (c.meta.batch_m < 1 || c.meta.batch_m > c.pool.M)
        throw ConfigError("meta.batch_m: must be in [1, pool.M]");
    if (c.meta.batch_n < 1 || c.meta.batch_n > c.pool.N)
        throw ConfigError("meta.batch_n: must be in [1, pool.N]");
    if (c.reweight.gamma < 0) throw ConfigError("reweight.gamma: must be >= 0");
    if (c.reweight.clusters < 0) throw ConfigError("reweight.clusters: must be >= 0");
    if (c.reweight.hypergrad == HypergradMode::exact && c.adapt.inner_steps != 1)
        throw ConfigError("reweight.hypergrad: exact mode requires adapt.inner_steps = 1");
    if (c.run.iterations < 0) throw ConfigError("run.iterations: must be >= 0");
    if (c.run.eval_every < 1) throw ConfigError("run.eval_every: must be >= 1");
    if (c.run.dump_every < 0) throw ConfigError("run.dump_every: must be >= 0");
    if (!c.model.widths.empty()) {
        if (c.model.widths.size() < 2) throw ConfigError("model.widths: need at least 2 layers");
        for (int w : c.model.widths)
            if (w < 1) throw ConfigError("model.widths: widths must be positive");
        const int in_dim = c.pool.task_kind == TaskKind::sine_ood ? 1 : 2;
        if (c.model.widths.front() != in_dim)
            throw ConfigError("model.widths: input width must be " + std::to_string(in_dim));
        const int out_dim = c.pool.task_kind == TaskKind::sine_ood ? 1 : c.pool.ways;
        if (c.model.widths.back() != out_dim)
            throw ConfigError("model.widths: output width must be " + std::to_string(out_dim));
    }
}

models::Model resolve_model(const ExperimentConfig& c) {
    models::Model model;
    if (!c.model.widths.empty()) {
        model.spec.layer_widths = c.model.widths;
    } else if (c.pool.task_kind == TaskKind::sine_ood) {
        model.spec.layer_widths = {1, 40, 40, 1};
    } else {
        model.spec.layer_widths = {2, 64, 64, c.pool.ways};
    }
    model.spec.activation = c.model.activation;
    model.spec.init_scale = c.model.init_scale;
    model.spec.use_bias = c.model.use_bias;
    model.spec.init_seed =
        c.model.init_seed >= 0 ? static_cast<std::uint64_t>(c.model.init_seed) : c.seed;
    model.loss = c.pool.task_kind == TaskKind::sine_ood ? models::LossKind::mse
                                                        : models::LossKind::cross_entropy;
    return model;
}

tasks::PoolSpec pool_spec(const ExperimentConfig& c) {
    tasks::PoolSpec spec;
    spec.seed = c.seed;
    spec.train_tasks = c.pool.M;
    spec.val_tasks = c.pool.N;
    spec.test_tasks = c.pool.M_test;
    spec.classification = c.pool.task_kind == TaskKind::classify_noise;
    spec.ood_ratio = c.pool.ood_ratio;
    spec.noise_ratio = c.pool.noise_ratio;
    spec.ways = c.pool.ways;
    spec.shots = c.pool.shots;
    spec.classes = c.pool.classes;
    spec.class_sigma = c.pool.class_sigma;
    spec.k_query = c.pool.k_query;
    spec.k_support = c.pool.k_support;
    return spec;
}

double effective_eta(const ExperimentConfig& c) {
    if (c.reweight.schedule == StepSchedule::constant) return c.meta.eta;
    return std::min(1.0, c.reweight.t1_k / static_cast<double>(std::max(1L, c.run.iterations)));
}

double effective_gamma(const ExperimentConfig& c) {
    if (c.reweight.schedule == StepSchedule::constant) return c.reweight.gamma;
    return std::min(1.0 / c.reweight.t1_L,
                    c.reweight.t1_C /
                        (c.reweight.t1_sigma *
                         std::sqrt(static_cast<double>(std::max(1L, c.run.iterations)))));
}

}  // namespace rwmeta::harness
