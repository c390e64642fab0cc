#include "oalm/autograd.hpp"

#include <cmath>
#include <cstring>

namespace oalm {

ValueId Graph::push(Tensor value, std::function<void(Graph&)> back) {
    nodes_.push_back(Node{std::move(value), Tensor{}, false, std::move(back)});
    return static_cast<ValueId>(nodes_.size() - 1);
}

Tensor& Graph::grad(ValueId id) {
    Node& n = nodes_[id];
    if (!n.grad_ready) {
        n.grad = Tensor::zeros(n.value.shape);
        n.grad_ready = true;
    }
    return n.grad;
}

void Graph::add_grad(ValueId id, const Tensor& g) {
    Tensor& dst = grad(id);
    const size_t n = dst.data.size();
    for (size_t i = 0; i < n; ++i) dst.data[i] += g.data[i];
}

ValueId Graph::input(Tensor v) { return push(std::move(v)); }

ValueId Graph::param(Parameter& p) {
    ValueId id = push(p.value);
    param_leaves_.emplace_back(&p, id);
    return id;
}

ValueId Graph::matmul(ValueId a, ValueId b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    Tensor out = oalm::matmul(av, bv);
    const int m = av.shape[0], k = av.shape[1], n = bv.shape[1];
    return push(std::move(out), [a, b, m, k, n](Graph& g) {
        ValueId self = g.cursor_;
        const Tensor& go = g.nodes_[self].grad;
        // dA += dC * B^T ; dB += A^T * dC
        matmul_nt_acc(go.data.data(), g.value(b).data.data(), g.grad(a).data.data(), m, n, k);
        matmul_tn_acc(g.value(a).data.data(), go.data.data(), g.grad(b).data.data(), m, k, n);
    });
}

ValueId Graph::matmul_nt(ValueId a, ValueId b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    Tensor out = oalm::matmul_nt(av, bv);
    const int m = av.shape[0], k = av.shape[1], n = bv.shape[0];
    return push(std::move(out), [a, b, m, k, n](Graph& g) {
        ValueId self = g.cursor_;
        const Tensor& go = g.nodes_[self].grad;  // [m x n]
        // C = A * B^T : dA += dC * B ; dB += dC^T * A
        matmul_acc(go.data.data(), g.value(b).data.data(), g.grad(a).data.data(), m, n, k);
        matmul_tn_acc(go.data.data(), g.value(a).data.data(), g.grad(b).data.data(), m, n, k);
    });
}

ValueId Graph::add(ValueId a, ValueId b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    require_shape(av.same_shape(bv), "add: shape mismatch");
    Tensor out = av;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
    return push(std::move(out), [a, b](Graph& g) {
        ValueId self = g.cursor_;
        g.add_grad(a, g.nodes_[self].grad);
        g.add_grad(b, g.nodes_[self].grad);
    });
}

ValueId Graph::mul(ValueId a, ValueId b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    require_shape(av.same_shape(bv), "mul: shape mismatch");
    Tensor out = av;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
    return push(std::move(out), [a, b](Graph& g) {
        ValueId self = g.cursor_;
        const Tensor& go = g.nodes_[self].grad;
        Tensor& ga = g.grad(a);
        Tensor& gb = g.grad(b);
        const Tensor& av2 = g.value(a);
        const Tensor& bv2 = g.value(b);
        for (size_t i = 0; i < go.data.size(); ++i) {
            ga.data[i] += go.data[i] * bv2.data[i];
            gb.data[i] += go.data[i] * av2.data[i];
        }
    });
}

ValueId Graph::scale(ValueId a, float s) {
    Tensor out = value(a);
    for (auto& x : out.data) x *= s;
    return push(std::move(out), [a, s](Graph& g) {
        ValueId self = g.cursor_;
        const Tensor& go = g.nodes_[self].grad;
        Tensor& ga = g.grad(a);
        for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] * s;
    });
}

ValueId Graph::silu(ValueId a) {
    Tensor out = value(a);
    for (auto& x : out.data) {
        const float sg = 1.0f / (1.0f + std::exp(-x));
        x = x * sg;
    }
    return push(std::move(out), [a](Graph& g) {
        ValueId self = g.cursor_;
        const Tensor& go = g.nodes_[self].grad;
        const Tensor& av = g.value(a);
        Tensor& ga = g.grad(a);
        for (size_t i = 0; i < go.data.size(); ++i) {
            const float x = av.data[i];
            const float sg = 1.0f / (1.0f + std::exp(-x));
            ga.data[i] += go.data[i] * sg * (1.0f + x * (1.0f - sg));
        }
    });
}

ValueId Graph::sum(ValueId a) {
    double acc = 0.0;
    for (float v : value(a).data) acc += v;
    return push(Tensor::scalar(static_cast<float>(acc)), [a](Graph& g) {
        ValueId self = g.cursor_;
        const float go = g.nodes_[self].grad.data[0];
        Tensor& ga = g.grad(a);
        for (auto& x : ga.data) x += go;
    });
}

ValueId Graph::slice_cols(ValueId a, int col0, int ncols) {
    const Tensor& av = value(a);
    require_shape(av.rank() == 2 && col0 >= 0 && col0 + ncols <= av.shape[1],
                  "slice_cols out of range");
    const int r = av.shape[0];
    Tensor out({r, ncols});
    for (int i = 0; i < r; ++i)
        std::memcpy(out.row_ptr(i), av.row_ptr(i) + col0, sizeof(float) * ncols);
    return push(std::move(out), [a, col0, ncols, r](Graph& g) {
        ValueId self = g.cursor_;
        const Tensor& go = g.nodes_[self].grad;
        Tensor& ga = g.grad(a);
        const int stride = ga.shape[1];
        for (int i = 0; i < r; ++i) {
            float* dst = ga.data.data() + static_cast<size_t>(i) * stride + col0;
            const float* src = go.row_ptr(i);
            for (int j = 0; j < ncols; ++j) dst[j] += src[j];
        }
    });
}

ValueId Graph::concat_cols(const std::vector<ValueId>& parts) {
    require(!parts.empty(), "concat_cols: empty input");
    const int r = value(parts[0]).shape[0];
    int total = 0;
    for (ValueId p : parts) {
        require_shape(value(p).rank() == 2 && value(p).shape[0] == r,
                      "concat_cols: row mismatch");
        total += value(p).shape[1];
    }
    Tensor out({r, total});
    int off = 0;
    for (ValueId p : parts) {
        const Tensor& pv = value(p);
        for (int i = 0; i < r; ++i)
            std::memcpy(out.row_ptr(i) + off, pv.row_ptr(i), sizeof(float) * pv.shape[1]);
        off += pv.shape[1];
    }
    std::vector<ValueId> ps = parts;
    return push(std::move(out), [ps, r](Graph& g) {
        ValueId self = g.cursor_;
        const Tensor& go = g.nodes_[self].grad;
        int off2 = 0;
        for (ValueId p : ps) {
            Tensor& gp = g.grad(p);
            const int c = gp.shape[1];
            for (int i = 0; i < r; ++i) {
                const float* src = go.row_ptr(i) + off2;
                float* dst = gp.row_ptr(i);
                for (int j = 0; j < c; ++j) dst[j] += src[j];
            }
            off2 += c;
        }
    });
}

ValueId Graph::gather_rows(ValueId table, std::vector<int> ids) {
    const Tensor& tv = value(table);
    require_shape(tv.rank() == 2, "gather_rows expects a rank-2 table");
    const int d = tv.shape[1];
    Tensor out({static_cast<int>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i) {
        const int r = ids[i];
        if (r < 0 || r >= tv.shape[0]) throw IndexError("gather_rows: id out of range");
        std::memcpy(out.row_ptr(static_cast<int>(i)), tv.row_ptr(r), sizeof(float) * d);
    }
    return push(std::move(out), [table, ids = std::move(ids), d](Graph& g) {
        ValueId self = g.cursor_;
        const Tensor& go = g.nodes_[self].grad;
        Tensor& gt = g.grad(table);
        for (size_t i = 0; i < ids.size(); ++i) {
            float* dst = gt.row_ptr(ids[i]);
            const float* src = go.row_ptr(static_cast<int>(i));
            for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
}

ValueId Graph::rms_norm(ValueId x, ValueId gain, float eps) {
    const Tensor& xv = value(x);
    const Tensor& gv = value(gain);
    require_shape(xv.rank() == 2 && gv.rank() == 1 && gv.shape[0] == xv.shape[1],
                  "rms_norm: gain must match row width");
    const int r = xv.shape[0], d = xv.shape[1];
    Tensor out({r, d});
    std::vector<float> inv_rms(r);
    for (int i = 0; i < r; ++i) {
        const float* xi = xv.row_ptr(i);
        double ss = 0.0;
        for (int j = 0; j < d; ++j) ss += static_cast<double>(xi[j]) * xi[j];
        const float s = static_cast<float>(1.0 / std::sqrt(ss / d + eps));
        inv_rms[i] = s;
        float* oi = out.row_ptr(i);
        for (int j = 0; j < d; ++j) oi[j] = xi[j] * gv.data[j] * s;
    }
    return push(std::move(out), [x, gain, inv_rms = std::move(inv_rms), r, d](Graph& g) {
        ValueId self = g.cursor_;
        const Tensor& go = g.nodes_[self].grad;
        const Tensor& xv2 = g.value(x);
        const Tensor& gv2 = g.value(gain);
        Tensor& gx = g.grad(x);
        Tensor& gg = g.grad(gain);
        for (int i = 0; i < r; ++i) {
            const float s = inv_rms[i];
            const float* xi = xv2.row_ptr(i);
            const float* goi = go.row_ptr(i);
            float* gxi = gx.row_ptr(i);
            double dot = 0.0;  // sum_j dy_j * g_j * x_j
            for (int j = 0; j < d; ++j) dot += static_cast<double>(goi[j]) * gv2.data[j] * xi[j];
            const float coef = static_cast<float>(dot) * s * s * s / d;
            for (int j = 0; j < d; ++j) {
                gxi[j] += s * gv2.data[j] * goi[j] - coef * xi[j];
                gg.data[j] += goi[j] * xi[j] * s;
            }
        }
    });
}

ValueId Graph::softmax_rows(ValueId x) {
    Tensor out = oalm::softmax(value(x), value(x).rank() == 1 ? 0 : 1);
    return push(std::move(out), [x](Graph& g) {
        ValueId self = g.cursor_;
        const Tensor& y = g.nodes_[self].value;
        const Tensor& go = g.nodes_[self].grad;
        Tensor& gx = g.grad(x);
        const int r = y.rank() == 1 ? 1 : y.shape[0];
        const int c = y.rank() == 1 ? y.shape[0] : y.shape[1];
        for (int i = 0; i < r; ++i) {
            const float* yi = y.data.data() + static_cast<size_t>(i) * c;
            const float* gi = go.data.data() + static_cast<size_t>(i) * c;
            float* oi = gx.data.data() + static_cast<size_t>(i) * c;
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += static_cast<double>(yi[j]) * gi[j];
            for (int j = 0; j < c; ++j) oi[j] += yi[j] * (gi[j] - static_cast<float>(dot));
        }
    });
}

ValueId Graph::log_softmax_rows(ValueId x) {
    Tensor out = oalm::log_softmax_rows(value(x));
    return push(std::move(out), [x](Graph& g) {
        ValueId self = g.cursor_;
        const Tensor& y = g.nodes_[self].value;  // log-probs
        const Tensor& go = g.nodes_[self].grad;
        Tensor& gx = g.grad(x);
        const int r = y.shape[0], c = y.shape[1];
        for (int i = 0; i < r; ++i) {
            const float* yi = y.row_ptr(i);
            const float* gi = go.row_ptr(i);
            float* oi = gx.row_ptr(i);
            double gsum = 0.0;
            for (int j = 0; j < c; ++j) gsum += gi[j];
            for (int j = 0; j < c; ++j)
                oi[j] += gi[j] - std::exp(yi[j]) * static_cast<float>(gsum);
        }
    });
}

ValueId Graph::causal_softmax(ValueId scores) {
    const Tensor& sv = value(scores);
    require_shape(sv.rank() == 2 && sv.shape[0] == sv.shape[1],
                  "causal_softmax expects a square score matrix");
    const int n = sv.shape[0];
    Tensor out({n, n});
    for (int i = 0; i < n; ++i) {
        const float* si = sv.row_ptr(i);
        float* oi = out.row_ptr(i);
        float mx = si[0];
        for (int j = 1; j <= i; ++j) mx = std::max(mx, si[j]);
        double sum = 0.0;
        for (int j = 0; j <= i; ++j) {
            oi[j] = std::exp(si[j] - mx);
            sum += oi[j];
        }
        const float inv = static_cast<float>(1.0 / sum);
        for (int j = 0; j <= i; ++j) oi[j] *= inv;
        for (int j = i + 1; j < n; ++j) oi[j] = 0.0f;
    }
    return push(std::move(out), [scores, n](Graph& g) {
        ValueId self = g.cursor_;
        const Tensor& y = g.nodes_[self].value;
        const Tensor& go = g.nodes_[self].grad;
        Tensor& gx = g.grad(scores);
        for (int i = 0; i < n; ++i) {
            const float* yi = y.row_ptr(i);
            const float* gi = go.row_ptr(i);
            float* oi = gx.row_ptr(i);
            double dot = 0.0;
            for (int j = 0; j <= i; ++j) dot += static_cast<double>(yi[j]) * gi[j];
            for (int j = 0; j <= i; ++j) oi[j] += yi[j] * (gi[j] - static_cast<float>(dot));
        }
    });
}

namespace {

// cos/sin rows per position, memoized per (base, head_dim)
struct RopeTable {
    double base = 0.0;
    int head_dim = 0;
    std::vector<float> cs;  // [pos][j][{cos, sin}]

    const float* row(double b, int hd, int pos) {
        const int half = hd / 2;
        if (b != base || hd != head_dim) {
            base = b;
            head_dim = hd;
            cs.clear();
        }
        const size_t need = static_cast<size_t>(pos + 1) * half * 2;
        if (cs.size() < need) {
            const int from = static_cast<int>(cs.size() / (half * 2));
            cs.resize(need);
            for (int p = from; p <= pos; ++p) {
                float* dst = cs.data() + static_cast<size_t>(p) * half * 2;
                for (int j = 0; j < half; ++j) {
                    const double theta = std::pow(b, -2.0 * j / static_cast<double>(hd));
                    dst[2 * j] = static_cast<float>(std::cos(p * theta));
                    dst[2 * j + 1] = static_cast<float>(std::sin(p * theta));
                }
            }
        }
        return cs.data() + static_cast<size_t>(pos) * half * 2;
    }
};

thread_local RopeTable t_rope_table;

inline void rotate_rows(const Tensor& in, Tensor& out, const std::vector<int>& positions,
                        int head_dim, double base, float sign) {
    const int r = in.shape[0], d = in.shape[1];
    const int half = head_dim / 2;
    for (int i = 0; i < r; ++i) {
        const float* cs = t_rope_table.row(base, head_dim, positions[i]);
        const float* src = in.row_ptr(i);
        float* dst = out.row_ptr(i);
        for (int h0 = 0; h0 + head_dim <= d; h0 += head_dim) {
            for (int j = 0; j < half; ++j) {
                const float c = cs[2 * j];
                const float s = sign * cs[2 * j + 1];
                const float x = src[h0 + 2 * j];
                const float y = src[h0 + 2 * j + 1];
                dst[h0 + 2 * j] = x * c - y * s;
                dst[h0 + 2 * j + 1] = x * s + y * c;
            }
        }
    }
}

}  // namespace

ValueId Graph::rope_rows(ValueId x, std::vector<int> positions, int head_dim, double base) {
    const Tensor& xv = value(x);
    require_config(head_dim > 0 && head_dim % 2 == 0, "rope: head dimension must be even");
    require_shape(xv.rank() == 2 && xv.shape[1] % head_dim == 0,
                  "rope: row width must be a multiple of head_dim");
    require(static_cast<int>(positions.size()) == xv.shape[0],
            "rope: one position per row required");
    for (int p : positions) require(p >= 0, "rope: positions must be non-negative");
    Tensor out(xv.shape);
    rotate_rows(xv, out, positions, head_dim, base, 1.0f);
    return push(std::move(out),
                [x, positions = std::move(positions), head_dim, base](Graph& g) {
                    ValueId self = g.cursor_;
                    const Tensor& go = g.nodes_[self].grad;
                    Tensor tmp(go.shape);
                    rotate_rows(go, tmp, positions, head_dim, base, -1.0f);
                    g.add_grad(x, tmp);
                });
}

ValueId Graph::cross_entropy(ValueId logits, std::vector<int> targets, std::vector<uint8_t> mask) {
    const Tensor& lv = value(logits);
    const double loss = oalm::cross_entropy(lv, targets, mask);  // validates inputs
    int64_t count = 0;
    for (uint8_t m : mask) count += m ? 1 : 0;
    return push(Tensor::scalar(static_cast<float>(loss)),
                [logits, targets = std::move(targets), mask = std::move(mask), count](Graph& g) {
                    if (count == 0) return;
                    ValueId self = g.cursor_;
                    const float go = g.nodes_[self].grad.data[0];
                    const Tensor& lv2 = g.value(logits);
                    Tensor& gl = g.grad(logits);
                    const int v = lv2.shape[1];
                    const float w = go / static_cast<float>(count);
                    std::vector<float> probs(v);
                    for (size_t i = 0; i < mask.size(); ++i) {
                        if (!mask[i]) continue;
                        const float* row = lv2.row_ptr(static_cast<int>(i));
                        float mx = row[0];
                        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                        double sum = 0.0;
                        for (int j = 0; j < v; ++j) {
                            probs[j] = std::exp(row[j] - mx);
                            sum += probs[j];
                        }
                        const float inv = static_cast<float>(1.0 / sum);
                        float* grow = gl.row_ptr(static_cast<int>(i));
                        for (int j = 0; j < v; ++j) grow[j] += w * probs[j] * inv;
                        grow[targets[i]] -= w;
                    }
                });
}

ValueId Graph::mean_scalars(const std::vector<ValueId>& xs) {
    require(!xs.empty(), "mean_scalars: empty input");
    std::vector<double> w(xs.size(), 1.0);
    return weighted_mean_scalars(xs, w);
}

ValueId Graph::weighted_mean_scalars(const std::vector<ValueId>& xs, const std::vector<double>& w) {
    require(!xs.empty() && xs.size() == w.size(), "weighted_mean_scalars: bad input");
    double total_w = 0.0, acc = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        require_shape(value(xs[i]).numel() == 1, "weighted_mean_scalars: inputs must be scalars");
        total_w += w[i];
        acc += w[i] * scalar_value(xs[i]);
    }
    require(total_w > 0.0, "weighted_mean_scalars: weights must sum to > 0");
    const double mean = acc / total_w;
    std::vector<ValueId> xs2 = xs;
    std::vector<double> w2 = w;
    return push(Tensor::scalar(static_cast<float>(mean)),
                [xs2 = std::move(xs2), w2 = std::move(w2), total_w](Graph& g) {
                    ValueId self = g.cursor_;
                    const float go = g.nodes_[self].grad.data[0];
                    for (size_t i = 0; i < xs2.size(); ++i)
                        g.grad(xs2[i]).data[0] += go * static_cast<float>(w2[i] / total_w);
                });
}

void Graph::backward(ValueId loss) {
    require(loss >= 0 && loss < static_cast<ValueId>(nodes_.size()), "backward: unknown node");
    require_shape(value(loss).numel() == 1, "backward: loss must be a scalar");
    grad(loss).data[0] = 1.0f;
    for (ValueId id = static_cast<ValueId>(nodes_.size()) - 1; id >= 0; --id) {
        Node& n = nodes_[id];
        if (!n.grad_ready || !n.back) continue;
        cursor_ = id;
        n.back(*this);
    }
    for (auto& [p, id] : param_leaves_) {
        if (!nodes_[id].grad_ready) continue;
        const Tensor& g = nodes_[id].grad;
        for (size_t i = 0; i < g.data.size(); ++i) p->grad.data[i] += g.data[i];
    }
}

void AdamW::step(const std::vector<Parameter*>& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (Parameter* p : params) {
        if (!p->trainable) continue;
        Slot& s = state_[p];
        if (s.m.numel() == 0) {
            s.m = Tensor::zeros(p->value.shape);
            s.v = Tensor::zeros(p->value.shape);
        }
        const size_t n = p->value.data.size();
        for (size_t i = 0; i < n; ++i) {
            const double g = p->grad.data[i];
            double m = beta1_ * s.m.data[i] + (1.0 - beta1_) * g;
            double v = beta2_ * s.v.data[i] + (1.0 - beta2_) * g * g;
            s.m.data[i] = static_cast<float>(m);
            s.v.data[i] = static_cast<float>(v);
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            double upd = mhat / (std::sqrt(vhat) + eps_);
            if (weight_decay_ != 0.0) upd += weight_decay_ * p->value.data[i];
            p->value.data[i] = static_cast<float>(p->value.data[i] - lr_ * upd);
        }
    }
}

}  // namespace oalm
