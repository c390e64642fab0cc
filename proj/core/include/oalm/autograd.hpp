#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "oalm/tensor.hpp"

namespace oalm {

/// Named learnable tensor. Gradients accumulate into `grad` during
/// Graph::backward and are consumed by the optimizer.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
        grad = Tensor::zeros(value.shape);
    }

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0f); }
};

using ValueId = int;

/// Single-use computation tape. Operations append nodes in execution order;
/// backward() replays registered closures in reverse. One graph per training
/// step; graphs are independent, so concurrent forward passes on separate
/// graphs are safe.
class Graph {
  public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    ValueId input(Tensor v);
    ValueId param(Parameter& p);

    const Tensor& value(ValueId id) const { return nodes_[id].value; }
    float scalar_value(ValueId id) const { return nodes_[id].value.data.at(0); }
    Tensor& grad(ValueId id);

    // -- arithmetic --
    ValueId matmul(ValueId a, ValueId b);
    ValueId matmul_nt(ValueId a, ValueId b);  // a * b^T
    ValueId add(ValueId a, ValueId b);
    ValueId mul(ValueId a, ValueId b);
    ValueId scale(ValueId a, float s);
    ValueId silu(ValueId a);
    ValueId sum(ValueId a);

    // -- structure --
    ValueId slice_cols(ValueId a, int col0, int ncols);
    ValueId concat_cols(const std::vector<ValueId>& parts);
    ValueId gather_rows(ValueId table, std::vector<int> ids);

    // -- normalization / attention --
    ValueId rms_norm(ValueId x, ValueId gain, float eps = 1e-5f);
    ValueId softmax_rows(ValueId x);
    ValueId log_softmax_rows(ValueId x);
    /// Row i is softmaxed over columns [0, i]; columns beyond i are zero.
    ValueId causal_softmax(ValueId scores);
    /// Rotates every `head_dim` segment of row r by angles position[r] * theta_j.
    ValueId rope_rows(ValueId x, std::vector<int> positions, int head_dim, double base);

    // -- losses --
    ValueId cross_entropy(ValueId logits, std::vector<int> targets, std::vector<uint8_t> mask);
    ValueId mean_scalars(const std::vector<ValueId>& xs);
    ValueId weighted_mean_scalars(const std::vector<ValueId>& xs, const std::vector<double>& w);

    /// Reverse pass from a scalar loss; flushes leaf gradients into Parameters.
    void backward(ValueId loss);

    size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool grad_ready = false;
        std::function<void(Graph&)> back;  // null for leaves without parents
    };

    ValueId push(Tensor value, std::function<void(Graph&)> back = nullptr);
    void add_grad(ValueId id, const Tensor& g);

    std::vector<Node> nodes_;
    std::vector<std::pair<Parameter*, ValueId>> param_leaves_;
    ValueId cursor_ = -1;  // node whose backward closure is running

    friend struct GraphAccess;
};

/// AdamW. Weight decay defaults to 0 so that plain Adam falls out.
class AdamW {
  public:
    explicit AdamW(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                   double weight_decay = 0.0)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

    /// One update from the gradients currently held by the parameters.
    /// Untrainable parameters are skipped entirely.
    void step(const std::vector<Parameter*>& params);

    void set_lr(double lr) { lr_ = lr; }
    int64_t steps_taken() const { return t_; }

  private:
    struct Slot {
        Tensor m, v;
    };
    double lr_, beta1_, beta2_, eps_, weight_decay_;
    int64_t t_ = 0;
    std::unordered_map<Parameter*, Slot> state_;
};

}  // namespace oalm
