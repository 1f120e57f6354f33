#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "rwmeta/mat.hpp"

namespace rwmeta::tasks {

using Rng = std::mt19937_64;

/// One few-shot task: disjoint support and query draws plus provenance flags.
struct TaskData {
    int task_id = -1;
    Mat support_inputs;
    Mat support_targets;
    Mat query_inputs;
    Mat query_targets;
    bool is_ood = false;
    std::vector<std::uint8_t> noise_mask;  // one flag per query instance
    int num_classes = 0;                   // 0 for regression tasks

    bool is_classification() const { return num_classes > 0; }
    int query_size() const { return query_inputs.rows; }
};

struct TaskPool {
    std::vector<TaskData> train;
    std::vector<TaskData> val;
    std::vector<TaskData> test;
    std::uint64_t seed = 0;
};

/// Sinusoid regression task: amplitude ~ U[0.1, 5.0], phase ~ U[0, pi],
/// inputs ~ U[-5, 5], targets A * sin(x + phase).
TaskData sample_sine_task(Rng& rng, int k_support, int k_query);

/// Out-of-distribution regression task: y = a*x + b with a, b ~ U[-3, 3].
TaskData sample_linear_ood_task(Rng& rng, int k_support, int k_query);

/// Gaussian-blob classification task: `ways` class centers ~ U[-4, 4]^2 with
/// isotropic sigma = 0.5; support holds `shots` points per class, the query
/// holds k_query points spread over classes as evenly as possible.
/// When `class_centers` is given (pool construction), the task instead draws
/// `ways` distinct classes from that shared set and relabels them locally,
/// the usual episodic convention; without shared classes, flipped labels
/// carry no cross-task signal to corrupt.
TaskData sample_classification_task(Rng& rng, int ways, int shots, int k_query,
                                    const Mat* class_centers = nullptr,
                                    double class_sigma = 0.5);

/// Flips round(ratio * K) query labels to a uniformly random different class
/// and marks them in the noise mask. Regression tasks are rejected.
TaskData inject_label_noise(const TaskData& task, double ratio, Rng& rng);

struct PoolSpec {
    std::uint64_t seed = 0;
    int train_tasks = 1000;  // M
    int val_tasks = 50;      // N, must satisfy N <= M/10
    int test_tasks = 100;
    bool classification = false;
    double ood_ratio = 0.0;    // sine pools: fraction of linear OOD tasks
    double noise_ratio = 0.0;  // classification pools: per-task flipped fraction
    int ways = 5;
    int shots = 3;
    int classes = 10;    // shared class pool for classification tasks
    double class_sigma = 0.5;
    int k_support = 10;  // regression support size
    int k_query = 10;    // query size K, uniform across the pool
};

/// Deterministic pool from the spec seed. Validation and test tasks are
/// always clean (no OOD flag, empty noise).
TaskPool build_pool(const PoolSpec& spec);

void save_pool(const TaskPool& pool, std::ostream& out);
void save_pool_file(const TaskPool& pool, const std::string& path);
TaskPool load_pool(std::istream& in);
TaskPool load_pool_file(const std::string& path);

}  // namespace rwmeta::tasks
