#include "rwmeta/tasks.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "rwmeta/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "pool serialization assumes a little-endian host");

namespace rwmeta::tasks {

namespace {

constexpr char kB64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string b64_encode(const MatBuffer& values) {
    std::vector<unsigned char> bytes(values.size() * sizeof(double));
    if (!values.empty()) std::memcpy(bytes.data(), values.data(), bytes.size());
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    for (size_t i = 0; i < bytes.size(); i += 3) {
        unsigned v = bytes[i] << 16;
        if (i + 1 < bytes.size()) v |= bytes[i + 1] << 8;
        if (i + 2 < bytes.size()) v |= bytes[i + 2];
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back(i + 1 < bytes.size() ? kB64Alphabet[(v >> 6) & 63] : '=');
        out.push_back(i + 2 < bytes.size() ? kB64Alphabet[v & 63] : '=');
    }
    return out;
}

std::vector<double> b64_decode(const std::string& text) {
    auto decode_char = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::vector<unsigned char> bytes;
    bytes.reserve(text.size() / 4 * 3);
    unsigned v = 0;
    int bits = 0;
    for (char c : text) {
        if (c == '=') break;
        const int d = decode_char(c);
        if (d < 0) throw ConfigError("pool file: invalid base64 payload");
        v = (v << 6) | static_cast<unsigned>(d);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            bytes.push_back(static_cast<unsigned char>((v >> bits) & 0xFF));
        }
    }
    if (bytes.size() % sizeof(double) != 0)
        throw ConfigError("pool file: payload is not a multiple of 8 bytes");
    std::vector<double> values(bytes.size() / sizeof(double));
    if (!values.empty()) std::memcpy(values.data(), bytes.data(), bytes.size());
    return values;
}

nlohmann::json encode_mat(const Mat& m) {
    return {{"rows", m.rows}, {"cols", m.cols}, {"b64", b64_encode(m.data)}};
}

Mat decode_mat(const nlohmann::json& j) {
    Mat m(j.at("rows").get<int>(), j.at("cols").get<int>());
    const auto decoded = b64_decode(j.at("b64").get<std::string>());
    m.data.assign(decoded.begin(), decoded.end());
    if (m.data.size() != static_cast<size_t>(m.rows) * m.cols)
        throw ConfigError("pool file: array payload does not match shape");
    return m;
}

Mat draw_uniform(Rng& rng, int rows, int cols, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    Mat m(rows, cols);
    for (double& x : m.data) x = u(rng);
    return m;
}

}  // namespace

TaskData sample_sine_task(Rng& rng, int k_support, int k_query) {
    if (k_support < 1 || k_query < 1) throw ConfigError("sine task: k_support, k_query >= 1");
    std::uniform_real_distribution<double> amp_dist(0.1, 5.0);
    std::uniform_real_distribution<double> phase_dist(0.0, std::numbers::pi);
    const double amplitude = amp_dist(rng);
    const double phase = phase_dist(rng);
    TaskData task;
    task.support_inputs = draw_uniform(rng, k_support, 1, -5.0, 5.0);
    task.query_inputs = draw_uniform(rng, k_query, 1, -5.0, 5.0);
    auto targets = [&](const Mat& x) {
        Mat y(x.rows, 1);
        for (int i = 0; i < x.rows; ++i) y.at(i, 0) = amplitude * std::sin(x.at(i, 0) + phase);
        return y;
    };
    task.support_targets = targets(task.support_inputs);
    task.query_targets = targets(task.query_inputs);
    task.noise_mask.assign(static_cast<size_t>(k_query), 0);
    return task;
}

TaskData sample_linear_ood_task(Rng& rng, int k_support, int k_query) {
    if (k_support < 1 || k_query < 1) throw ConfigError("linear task: k_support, k_query >= 1");
    std::uniform_real_distribution<double> coef(-3.0, 3.0);
    const double slope = coef(rng);
    const double intercept = coef(rng);
    TaskData task;
    task.is_ood = true;
    task.support_inputs = draw_uniform(rng, k_support, 1, -5.0, 5.0);
    task.query_inputs = draw_uniform(rng, k_query, 1, -5.0, 5.0);
    auto targets = [&](const Mat& x) {
        Mat y(x.rows, 1);
        for (int i = 0; i < x.rows; ++i) y.at(i, 0) = slope * x.at(i, 0) + intercept;
        return y;
    };
    task.support_targets = targets(task.support_inputs);
    task.query_targets = targets(task.query_inputs);
    task.noise_mask.assign(static_cast<size_t>(k_query), 0);
    return task;
}

TaskData sample_classification_task(Rng& rng, int ways, int shots, int k_query,
                                    const Mat* class_centers, double class_sigma) {
    if (ways < 2) throw ConfigError("classification task: ways >= 2");
    if (shots < 1 || k_query < 1) throw ConfigError("classification task: shots, k_query >= 1");
    if (class_sigma <= 0.0) throw ConfigError("classification task: class_sigma > 0");
    std::normal_distribution<double> jitter(0.0, class_sigma);
    std::vector<double> cx(static_cast<size_t>(ways)), cy(static_cast<size_t>(ways));
    if (class_centers) {
        if (class_centers->rows < ways)
            throw ConfigError("classification task: class pool smaller than ways");
        // Episodic draw: ways distinct shared classes, relabeled 0..ways-1.
        std::vector<int> ids(static_cast<size_t>(class_centers->rows));
        for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
        for (int i = 0; i < ways; ++i) {
            std::uniform_int_distribution<int> pick(i, class_centers->rows - 1);
            std::swap(ids[i], ids[pick(rng)]);
        }
        for (int c = 0; c < ways; ++c) {
            cx[c] = class_centers->at(ids[c], 0);
            cy[c] = class_centers->at(ids[c], 1);
        }
    } else {
        std::uniform_real_distribution<double> center(-4.0, 4.0);
        for (int c = 0; c < ways; ++c) {
            cx[c] = center(rng);
            cy[c] = center(rng);
        }
    }
    TaskData task;
    task.num_classes = ways;
    task.support_inputs = Mat(ways * shots, 2);
    task.support_targets = Mat(ways * shots, 1);
    int row = 0;
    for (int c = 0; c < ways; ++c)
        for (int s = 0; s < shots; ++s, ++row) {
            task.support_inputs.at(row, 0) = cx[c] + jitter(rng);
            task.support_inputs.at(row, 1) = cy[c] + jitter(rng);
            task.support_targets.at(row, 0) = c;
        }
    // Query classes as even as possible: the first k_query % ways classes get
    // one extra point.
    task.query_inputs = Mat(k_query, 2);
    task.query_targets = Mat(k_query, 1);
    row = 0;
    for (int c = 0; c < ways; ++c) {
        const int count = k_query / ways + (c < k_query % ways ? 1 : 0);
        for (int q = 0; q < count; ++q, ++row) {
            task.query_inputs.at(row, 0) = cx[c] + jitter(rng);
            task.query_inputs.at(row, 1) = cy[c] + jitter(rng);
            task.query_targets.at(row, 0) = c;
        }
    }
    task.noise_mask.assign(static_cast<size_t>(k_query), 0);
    return task;
}

TaskData inject_label_noise(const TaskData& task, double ratio, Rng& rng) {
    if (!task.is_classification()) throw UnsupportedTask("inject_label_noise: regression task");
    if (ratio < 0.0 || ratio >= 1.0) throw ConfigError("inject_label_noise: ratio in [0, 1)");
    TaskData out = task;
    const int k = task.query_size();
    const int flips = static_cast<int>(std::llround(ratio * k));
    if (flips == 0) return out;
    // Choose instances by partial Fisher-Yates.
    std::vector<int> idx(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) idx[i] = i;
    for (int i = 0; i < flips; ++i) {
        std::uniform_int_distribution<int> pick(i, k - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    std::uniform_int_distribution<int> other(0, task.num_classes - 2);
    for (int i = 0; i < flips; ++i) {
        const int row = idx[i];
        const int orig = static_cast<int>(out.query_targets.at(row, 0));
        int flipped = other(rng);
        if (flipped >= orig) ++flipped;
        out.query_targets.at(row, 0) = flipped;
        out.noise_mask[row] = 1;
    }
    return out;
}

TaskPool build_pool(const PoolSpec& spec) {
    if (spec.train_tasks < 1) throw ConfigError("pool.M: must be >= 1");
    if (spec.val_tasks < 1) throw ConfigError("pool.N: must be >= 1");
    if (spec.val_tasks > spec.train_tasks / 10)
        throw ConfigError("pool.N: validation pool must satisfy N <= M/10");
    if (spec.ood_ratio < 0.0 || spec.ood_ratio > 1.0) throw ConfigError("pool.ood_ratio: in [0, 1]");
    if (spec.ood_ratio > 0.0 && spec.noise_ratio > 0.0)
        throw ConfigError("pool: ood_ratio and noise_ratio are mutually exclusive");

    TaskPool pool;
    pool.seed = spec.seed;
    Rng rng(spec.seed);

    const int ood_count =
        spec.classification ? 0 : static_cast<int>(std::llround(spec.ood_ratio * spec.train_tasks));
    // Spread OOD tasks over the pool with a deterministic shuffle of slots.
    std::vector<std::uint8_t> ood_slot(static_cast<size_t>(spec.train_tasks), 0);
    for (int i = 0; i < ood_count; ++i) ood_slot[i] = 1;
    for (int i = spec.train_tasks - 1; i > 0; --i) {
        std::uniform_int_distribution<int> pick(0, i);
        std::swap(ood_slot[i], ood_slot[pick(rng)]);
    }

    Mat class_centers;
    if (spec.classification) {
        if (spec.classes < spec.ways)
            throw ConfigError("pool.classes: must be >= pool.ways");
        std::uniform_real_distribution<double> center(-4.0, 4.0);
        class_centers = Mat(spec.classes, 2);
        for (int c = 0; c < spec.classes; ++c) {
            class_centers.at(c, 0) = center(rng);
            class_centers.at(c, 1) = center(rng);
        }
    }
    auto sample_clean = [&](Rng& r) {
        return spec.classification
                   ? sample_classification_task(r, spec.ways, spec.shots, spec.k_query,
                                                &class_centers, spec.class_sigma)
                   : sample_sine_task(r, spec.k_support, spec.k_query);
    };

    pool.train.reserve(static_cast<size_t>(spec.train_tasks));
    for (int i = 0; i < spec.train_tasks; ++i) {
        TaskData task = ood_slot[i] ? sample_linear_ood_task(rng, spec.k_support, spec.k_query)
                                    : sample_clean(rng);
        if (spec.classification && spec.noise_ratio > 0.0)
            task = inject_label_noise(task, spec.noise_ratio, rng);
        task.task_id = i;
        pool.train.push_back(std::move(task));
    }
    pool.val.reserve(static_cast<size_t>(spec.val_tasks));
    for (int i = 0; i < spec.val_tasks; ++i) {
        TaskData task = sample_clean(rng);
        task.task_id = i;
        pool.val.push_back(std::move(task));
    }
    pool.test.reserve(static_cast<size_t>(spec.test_tasks));
    for (int i = 0; i < spec.test_tasks; ++i) {
        TaskData task = sample_clean(rng);
        task.task_id = i;
        pool.test.push_back(std::move(task));
    }
    return pool;
}

namespace {

void write_task(std::ostream& out, const TaskData& task, const char* split) {
    std::string mask(task.noise_mask.size(), '0');
    for (size_t i = 0; i < task.noise_mask.size(); ++i)
        if (task.noise_mask[i]) mask[i] = '1';
    nlohmann::json j{{"task_id", task.task_id},
                     {"split", split},
                     {"is_ood", task.is_ood},
                     {"num_classes", task.num_classes},
                     {"support_inputs", encode_mat(task.support_inputs)},
                     {"support_targets", encode_mat(task.support_targets)},
                     {"query_inputs", encode_mat(task.query_inputs)},
                     {"query_targets", encode_mat(task.query_targets)},
                     {"noise_mask", mask}};
    out << j.dump() << '\n';
}

}  // namespace

void save_pool(const TaskPool& pool, std::ostream& out) {
    nlohmann::json header{{"format", "rwmeta-pool-v1"}, {"seed", pool.seed}};
    out << header.dump() << '\n';
    for (const TaskData& t : pool.train) write_task(out, t, "train");
    for (const TaskData& t : pool.val) write_task(out, t, "val");
    for (const TaskData& t : pool.test) write_task(out, t, "test");
}

void save_pool_file(const TaskPool& pool, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open pool file for writing: " + path);
    save_pool(pool, out);
}

TaskPool load_pool(std::istream& in) {
    TaskPool pool;
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("pool file: empty");
    nlohmann::json header = nlohmann::json::parse(line);
    if (header.value("format", "") != "rwmeta-pool-v1")
        throw ConfigError("pool file: unknown format");
    pool.seed = header.at("seed").get<std::uint64_t>();
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        TaskData task;
        task.task_id = j.at("task_id").get<int>();
        task.is_ood = j.at("is_ood").get<bool>();
        task.num_classes = j.at("num_classes").get<int>();
        task.support_inputs = decode_mat(j.at("support_inputs"));
        task.support_targets = decode_mat(j.at("support_targets"));
        task.query_inputs = decode_mat(j.at("query_inputs"));
        task.query_targets = decode_mat(j.at("query_targets"));
        const std::string mask = j.at("noise_mask").get<std::string>();
        task.noise_mask.assign(mask.size(), 0);
        for (size_t i = 0; i < mask.size(); ++i) task.noise_mask[i] = mask[i] == '1';
        const std::string split = j.at("split").get<std::string>();
        if (split == "train")
            pool.train.push_back(std::move(task));
        else if (split == "val")
            pool.val.push_back(std::move(task));
        else if (split == "test")
            pool.test.push_back(std::move(task));
        else
            throw ConfigError("pool file: unknown split '" + split + "'");
    }
    return pool;
}

TaskPool load_pool_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open pool file: " + path);
    return load_pool(in);
}

}  // namespace rwmeta::tasks
