#pragma once

#include <stdexcept>
#include <string>

namespace rwmeta {

struct NonFiniteValue : std::runtime_error {
    explicit NonFiniteValue(const std::string& what) : std::runtime_error(what) {}
};

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct DivergenceError : std::runtime_error {
    DivergenceError(const std::string& what, long iteration)
        : std::runtime_error(what), iter(iteration) {}
    long iter = -1;
};

struct WeightLookupError : std::runtime_error {
    explicit WeightLookupError(const std::string& what) : std::runtime_error(what) {}
};

struct AlignmentError : std::runtime_error {
    explicit AlignmentError(const std::string& what) : std::runtime_error(what) {}
};

struct UnsupportedTask : std::runtime_error {
    explicit UnsupportedTask(const std::string& what) : std::runtime_error(what) {}
};

struct UnsupportedConfig : std::runtime_error {
    explicit UnsupportedConfig(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace rwmeta
