#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <vector>

#include "rwmeta/errors.hpp"

namespace rwmeta {

/// Allocator that default-initializes scalars, so vector::resize skips the
/// zero fill on buffers the caller overwrites anyway.
template <class T, class Base = std::allocator<T>>
struct DefaultInitAllocator : Base {
    using Base::Base;
    template <class U>
    struct rebind {
        using other = DefaultInitAllocator<U, typename std::allocator_traits<
                                                  Base>::template rebind_alloc<U>>;
    };
    template <class U>
    void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        std::allocator_traits<Base>::construct(static_cast<Base&>(*this), p,
                                               std::forward<Args>(args)...);
    }
};

using MatBuffer = std::vector<double, DefaultInitAllocator<double>>;

/// Dense row-major matrix of doubles. Column vectors are rows x 1.
struct Mat {
    int rows = 0;
    int cols = 0;
    MatBuffer data;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}
    Mat(int r, int c, const std::vector<double>& d)
        : rows(r), cols(c), data(d.begin(), d.end()) {
        if (data.size() != static_cast<size_t>(r) * c)
            throw ShapeError("Mat: data size does not match shape");
    }
    Mat(int r, int c, MatBuffer d) : rows(r), cols(c), data(std::move(d)) {
        if (data.size() != static_cast<size_t>(r) * c)
            throw ShapeError("Mat: data size does not match shape");
    }

    static Mat zeros(int r, int c) { return Mat(r, c); }

    /// Allocated but uninitialized; for buffers the caller fully overwrites.
    static Mat uninit(int r, int c) {
        Mat m;
        m.rows = r;
        m.cols = c;
        m.data.resize(static_cast<size_t>(r) * c);
        return m;
    }

    static Mat full(int r, int c, double v) {
        Mat m(r, c);
        for (auto& x : m.data) x = v;
        return m;
    }

    static Mat ones(int r, int c) { return full(r, c, 1.0); }

    static Mat scalar(double v) { return full(1, 1, v); }

    static Mat column(const std::vector<double>& v) {
        return Mat(static_cast<int>(v.size()), 1, v);
    }

    size_t size() const { return data.size(); }

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        // Vectorizable prefilter: OR the exponent fields; only when the OR
        // saturates can a NaN/Inf be present, and the precise scan confirms.
        constexpr std::uint64_t kExp = 0x7FF0000000000000ull;
        std::uint64_t folded = 0;
        for (double x : data) folded |= std::bit_cast<std::uint64_t>(x);
        if ((folded & kExp) != kExp) return true;
        for (double x : data)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

}  // namespace rwmeta
