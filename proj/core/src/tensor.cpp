#include "oalm/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace oalm {

bool Tensor::all_finite() const {
    for (float v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

void matmul_acc(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<size_t>(i) * k;
        float* crow = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const float av = arow[p];
            if (av == 0.0f) continue;
            const float* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void matmul_into(const float* a, const float* b, float* c, int m, int k, int n) {
    std::memset(c, 0, sizeof(float) * static_cast<size_t>(m) * n);
    matmul_acc(a, b, c, m, k, n);
}

void matmul_nt_acc(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<size_t>(i) * k;
        float* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const float* brow = b + static_cast<size_t>(j) * k;
            float acc = 0.0f;
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

void matmul_nt_into(const float* a, const float* b, float* c, int m, int k, int n) {
    std::memset(c, 0, sizeof(float) * static_cast<size_t>(m) * n);
    matmul_nt_acc(a, b, c, m, k, n);
}

void matmul_tn_acc(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<size_t>(i) * k;
        const float* brow = b + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const float av = arow[p];
            if (av == 0.0f) continue;
            float* crow = c + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_shape(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 tensors");
    require_shape(a.shape[1] == b.shape[0],
                  "matmul inner dimensions disagree: " + a.shape_str() + " * " + b.shape_str());
    Tensor c({a.shape[0], b.shape[1]});
    matmul_acc(a.data.data(), b.data.data(), c.data.data(), a.shape[0], a.shape[1], b.shape[1]);
    return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_shape(a.rank() == 2 && b.rank() == 2, "matmul_nt expects rank-2 tensors");
    require_shape(a.shape[1] == b.shape[1],
                  "matmul_nt inner dimensions disagree: " + a.shape_str() + " * " + b.shape_str() + "^T");
    Tensor c({a.shape[0], b.shape[0]});
    matmul_nt_acc(a.data.data(), b.data.data(), c.data.data(), a.shape[0], a.shape[1], b.shape[0]);
    return c;
}

namespace {

void softmax_span(const float* x, float* out, int n) {
    float mx = x[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        out[i] = std::exp(x[i] - mx);
        sum += out[i];
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (int i = 0; i < n; ++i) out[i] *= inv;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
    Tensor out = x;
    if (x.rank() == 1) {
        require_shape(axis == 0, "softmax axis out of range for rank-1 tensor");
        softmax_span(x.data.data(), out.data.data(), x.shape[0]);
        return out;
    }
    require_shape(x.rank() == 2 && (axis == 0 || axis == 1), "softmax supports rank <= 2");
    const int r = x.shape[0], c = x.shape[1];
    if (axis == 1) {
        for (int i = 0; i < r; ++i) softmax_span(x.row_ptr(i), out.row_ptr(i), c);
    } else {
        std::vector<float> col(r), res(r);
        for (int j = 0; j < c; ++j) {
            for (int i = 0; i < r; ++i) col[i] = x.at(i, j);
            softmax_span(col.data(), res.data(), r);
            for (int i = 0; i < r; ++i) out.at(i, j) = res[i];
        }
    }
    return out;
}

Tensor log_softmax_rows(const Tensor& x) {
    require_shape(x.rank() == 2, "log_softmax_rows expects rank-2");
    Tensor out = x;
    const int r = x.shape[0], c = x.shape[1];
    for (int i = 0; i < r; ++i) {
        const float* xi = x.row_ptr(i);
        float mx = xi[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) sum += std::exp(static_cast<double>(xi[j]) - mx);
        const float lse = mx + static_cast<float>(std::log(sum));
        float* oi = out.row_ptr(i);
        for (int j = 0; j < c; ++j) oi[j] = xi[j] - lse;
    }
    return out;
}

double cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<uint8_t>& mask) {
    require_shape(logits.rank() == 2, "cross_entropy expects rank-2 logits");
    const size_t n = static_cast<size_t>(logits.shape[0]);
    require(targets.size() == n && mask.size() == n,
            "cross_entropy: target/mask length must match logit rows");
    const int v = logits.shape[1];
    double total = 0.0;
    int64_t count = 0;
    for (size_t i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        const int t = targets[i];
        if (t < 0 || t >= v) throw IndexError("cross_entropy: target index out of range");
        const float* row = logits.row_ptr(static_cast<int>(i));
        float mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
        total += (mx + std::log(sum)) - row[t];
        ++count;
    }
    return count == 0 ? 0.0 : total / static_cast<double>(count);
}

}  // namespace oalm
