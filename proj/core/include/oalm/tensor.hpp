#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oalm/common.hpp"
#include "oalm/random.hpp"

namespace oalm {

/// Dense row-major f32 tensor. Rank 1 or 2 in practice; shape is kept
/// generic so scalars ({1}) and tables fit the same type.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), 0.0f);
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, float v) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = v;
        return t;
    }

    static Tensor scalar(float v) { return full({1}, v); }

    static Tensor from(std::vector<int> s, std::vector<float> d) {
        Tensor t;
        t.shape = std::move(s);
        t.data = std::move(d);
        require_shape(numel_of(t.shape) == static_cast<int64_t>(t.data.size()),
                      "tensor data length does not match shape");
        return t;
    }

    static Tensor randn(std::vector<int> s, Rng& rng, float stddev) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = static_cast<float>(rng.gauss()) * stddev;
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int rows() const { return shape.at(0); }
    int cols() const { return rank() == 1 ? shape.at(0) : shape.at(1); }

    float& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    float* row_ptr(int r) { return data.data() + static_cast<size_t>(r) * cols(); }
    const float* row_ptr(int r) const { return data.data() + static_cast<size_t>(r) * cols(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
    std::string shape_str() const;
};

// ---- raw kernels (pure, thread-safe on disjoint outputs) ----

/// c[m x n] = a[m x k] * b[k x n]
void matmul_into(const float* a, const float* b, float* c, int m, int k, int n);
/// c[m x n] += a[m x k] * b[k x n]
void matmul_acc(const float* a, const float* b, float* c, int m, int k, int n);
/// c[m x n] = a[m x k] * b[n x k]^T
void matmul_nt_into(const float* a, const float* b, float* c, int m, int k, int n);
/// c[m x n] += a[m x k] * b[n x k]^T
void matmul_nt_acc(const float* a, const float* b, float* c, int m, int k, int n);
/// c[k x n] += a[m x k]^T * b[m x n]
void matmul_tn_acc(const float* a, const float* b, float* c, int m, int k, int n);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);

/// Numerically stabilized softmax along `axis` (0 or 1; rank 1 uses axis 0).
Tensor softmax(const Tensor& x, int axis);

/// log(softmax(row)) for every row of a 2-D tensor.
Tensor log_softmax_rows(const Tensor& x);

/// Mean negative log-likelihood of `targets` under rows of `logits`,
/// restricted to rows where mask is true. Empty mask yields 0.
/// Accumulates in f64.
double cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<uint8_t>& mask);

}  // namespace oalm
