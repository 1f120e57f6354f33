#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rwmeta/errors.hpp"

namespace rwmeta::reweight {

/// Weight granularity. A task-scheme matrix is the instance scheme with all
/// of a task's query instances sharing one storage entry, so the two schemes
/// run through identical machinery.
enum class Scheme { task, instance };

struct ClusterAssignment {
    int k = 0;
    std::vector<int> labels;  // weighted unit -> cluster id in [0, k)
    std::vector<std::vector<double>> centroids;
};

/// Persistent weights over the training pool. `storage` holds one entry per
/// weighted unit, or one per cluster when sharing is enabled; `unit_to_entry`
/// maps units to entries.
struct WeightMatrix {
    Scheme scheme = Scheme::task;
    int num_tasks = 0;
    int k_query = 0;
    std::vector<double> storage;
    std::vector<int> unit_to_entry;

    int units() const {
        return scheme == Scheme::instance ? num_tasks * k_query : num_tasks;
    }

    int unit_index(int task_id, int instance) const {
        if (task_id < 0 || task_id >= num_tasks)
            throw WeightLookupError("weight lookup: task " + std::to_string(task_id) +
                                    " outside pool of " + std::to_string(num_tasks));
        if (instance < 0 || instance >= k_query)
            throw WeightLookupError("weight lookup: instance " + std::to_string(instance) +
                                    " outside query size " + std::to_string(k_query));
        return scheme == Scheme::instance ? task_id * k_query + instance : task_id;
    }

    int entry_of(int task_id, int instance) const {
        return unit_to_entry[unit_index(task_id, instance)];
    }

    /// Effective multiplier of query instance `instance` of task `task_id` in
    /// the weighted meta objective.
    double weight_of(int task_id, int instance) const {
        return storage[entry_of(task_id, instance)];
    }

    /// True when every query instance of the task shares one storage entry.
    bool task_shares_entry(int task_id) const {
        if (scheme == Scheme::task) return true;
        const int first = entry_of(task_id, 0);
        for (int k = 1; k < k_query; ++k)
            if (entry_of(task_id, k) != first) return false;
        return true;
    }
};

/// Gradient of the validation meta-loss with respect to the weight storage;
/// aligned with WeightMatrix::storage.
struct HyperGradient {
    std::vector<double> values;

    double norm_sq() const {
        double s = 0.0;
        for (double v : values) s += v * v;
        return s;
    }
};

}  // namespace rwmeta::reweight
