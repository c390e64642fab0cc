#include "oalm/model.hpp"

#include <algorithm>
#include <cmath>

namespace oalm {

std::vector<int> OffsetConfig::forward_offsets() const {
    std::vector<int> out;
    for (int d = 1; d <= k_fwd; ++d) out.push_back(d);
    return out;
}

std::vector<int> OffsetConfig::backward_offsets() const {
    std::vector<int> out;
    for (int d = 0; d > -k_bwd; --d) out.push_back(d);
    return out;
}

std::vector<int> OffsetConfig::offsets() const {
    std::vector<int> out = forward_offsets();
    for (int d : backward_offsets()) out.push_back(d);
    return out;
}

double OffsetConfig::lambda_of(int offset) const {
    auto it = lambda.find(offset);
    if (it != lambda.end()) return it->second;
    if (offset <= 1) return 1.0;
    return std::pow(lambda_decay, offset - 1);
}

double OffsetConfig::gamma_at(int depth_in_block) const {
    if (gamma.empty()) return 1.0;
    const int i = std::min<int>(depth_in_block, static_cast<int>(gamma.size()) - 1);
    return gamma[std::max(i, 0)];
}

void OffsetConfig::validate() const {
    require_config(k_fwd >= 1, "offset config: k_fwd must be >= 1");
    require_config(k_bwd >= 0, "offset config: k_bwd must be >= 0");
    require_config(block_size >= 1, "offset config: block_size must be >= 1");
    require_config(epsilon > 0.0 && epsilon <= 1.0, "offset config: epsilon must be in (0, 1]");
    require_config(lambda_decay > 0.0 && lambda_decay <= 1.0,
                   "offset config: lambda_decay must be in (0, 1]");
    for (auto& [d, l] : lambda)
        require_config(l >= 0.0 && l <= 1.0, "offset config: lambda values must be in [0, 1]");
    require_config(lambda_of(1) == 1.0, "offset config: lambda(1) must be 1");
    for (double gma : gamma) require_config(gma >= 1.0, "offset config: gamma entries must be >= 1");
}

OffsetConfig OffsetConfig::next_token_only() {
    OffsetConfig oc;
    oc.k_fwd = 1;
    oc.k_bwd = 0;
    oc.block_size = 1;
    return oc;
}

void ModelConfig::validate() const {
    require_config(vocab_size >= 2, "model config: vocab_size must be >= 2");
    require_config(n_heads >= 1 && d_model % n_heads == 0,
                   "model config: d_model must be divisible by n_heads");
    require_config(head_dim() % 2 == 0, "model config: head dimension must be even for RoPE");
    require_config(n_layers >= 1, "model config: need at least one layer");
    require_config(d_ff >= 1, "model config: d_ff must be >= 1");
    require_config(max_seq_len >= 2, "model config: max_seq_len must be >= 2");
}

int PredictionGrid::col_of(int offset) const {
    for (size_t i = 0; i < offsets.size(); ++i)
        if (offsets[i] == offset) return static_cast<int>(i);
    return -1;
}

bool PredictionGrid::available(int pos, int offset) const {
    if (pos < 0 || pos >= seq_len) return false;
    const int c = col_of(offset);
    if (c < 0) return false;
    return !logp[pos][c].empty();
}

const std::vector<float>& PredictionGrid::at(int pos, int offset) const {
    const int c = col_of(offset);
    require(c >= 0 && pos >= 0 && pos < seq_len, "grid: entry out of range");
    const auto& row = logp[pos][c];
    require(!row.empty(), "grid: entry unavailable");
    return row;
}

std::vector<PredictionGrid::Dep> PredictionGrid::deps_for_target(int t) const {
    std::vector<Dep> out;
    for (int d : offsets) {
        const int i = t - d;
        if (available(i, d)) out.push_back({i, d});
    }
    return out;
}

int mu_index(int base_pos, int offset, MuConvention mu) {
    return base_pos + offset - (mu == MuConvention::target_minus_one ? 1 : 0);
}

std::vector<float> rope_encode(const std::vector<float>& vec, int position, double base) {
    require_config(vec.size() % 2 == 0, "rope_encode: dimension must be even");
    require(position >= 0, "rope_encode: position must be non-negative");
    const int dim = static_cast<int>(vec.size());
    std::vector<float> out(vec.size());
    for (int j = 0; j < dim / 2; ++j) {
        const double theta = std::pow(base, -2.0 * j / static_cast<double>(dim));
        const double ang = position * theta;
        const float c = static_cast<float>(std::cos(ang));
        const float s = static_cast<float>(std::sin(ang));
        out[2 * j] = vec[2 * j] * c - vec[2 * j + 1] * s;
        out[2 * j + 1] = vec[2 * j] * s + vec[2 * j + 1] * c;
    }
    return out;
}

std::optional<std::vector<float>> target_aware_query(const std::vector<float>& q, int base_pos,
                                                     int offset, MuConvention mu, double base) {
    const int m = mu_index(base_pos, offset, mu);
    if (m < 0) return std::nullopt;
    return rope_encode(q, m, base);
}

namespace {

std::vector<int> iota_positions(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    return p;
}

}  // namespace

Model::Model(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.d_model;
    embedding_ = Parameter("embedding", Tensor::zeros({cfg_.vocab_size, d}));
    layers_.resize(cfg_.n_layers);
    for (int l = 0; l < cfg_.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        Layer& L = layers_[l];
        L.attn_norm = Parameter(p + "attn_norm", Tensor::full({d}, 1.0f));
        L.wq = Parameter(p + "wq", Tensor::zeros({d, d}));
        L.wk = Parameter(p + "wk", Tensor::zeros({d, d}));
        L.wv = Parameter(p + "wv", Tensor::zeros({d, d}));
        L.wo = Parameter(p + "wo", Tensor::zeros({d, d}));
        L.ffn_norm = Parameter(p + "ffn_norm", Tensor::full({d}, 1.0f));
        L.w_gate = Parameter(p + "w_gate", Tensor::zeros({d, cfg_.d_ff}));
        L.w_up = Parameter(p + "w_up", Tensor::zeros({d, cfg_.d_ff}));
        L.w_down = Parameter(p + "w_down", Tensor::zeros({cfg_.d_ff, d}));
    }
    final_norm_ = Parameter("final_norm", Tensor::full({d}, 1.0f));
}

Model::Model(ModelConfig cfg, uint64_t seed) : Model(cfg) {
    Rng rng(hash_combine(seed, 0x6f616c6dull));
    const float s = static_cast<float>(cfg_.init_std);
    for (Parameter* p : parameters()) {
        if (p->name.find("norm") != std::string::npos) continue;  // gains stay at 1
        for (auto& x : p->value.data) x = static_cast<float>(rng.gauss()) * s;
    }
}

std::vector<Parameter*> Model::parameters() {
    std::vector<Parameter*> out;
    out.push_back(&embedding_);
    for (auto& L : layers_) {
        out.push_back(&L.attn_norm);
        out.push_back(&L.wq);
        out.push_back(&L.wk);
        out.push_back(&L.wv);
        out.push_back(&L.wo);
        out.push_back(&L.ffn_norm);
        out.push_back(&L.w_gate);
        out.push_back(&L.w_up);
        out.push_back(&L.w_down);
    }
    out.push_back(&final_norm_);
    return out;
}

std::vector<const Parameter*> Model::parameters() const {
    auto mut = const_cast<Model*>(this)->parameters();
    return {mut.begin(), mut.end()};
}

Parameter* Model::find_parameter(const std::string& name) {
    for (Parameter* p : parameters())
        if (p->name == name) return p;
    return nullptr;
}

int64_t Model::param_count() const {
    int64_t n = 0;
    for (const Parameter* p : parameters()) n += p->value.numel();
    return n;
}

ValueId Model::block_forward(Graph& g, ValueId x, const Layer& layer,
                             const std::vector<int>& positions) const {
    auto& L = const_cast<Layer&>(layer);
    const int hd = cfg_.head_dim();
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));

    ValueId h = g.rms_norm(x, g.param(L.attn_norm), cfg_.norm_eps);
    ValueId q = g.rope_rows(g.matmul(h, g.param(L.wq)), positions, hd, cfg_.rope_base);
    ValueId k = g.rope_rows(g.matmul(h, g.param(L.wk)), positions, hd, cfg_.rope_base);
    ValueId v = g.matmul(h, g.param(L.wv));

    std::vector<ValueId> heads;
    for (int hix = 0; hix < cfg_.n_heads; ++hix) {
        ValueId qh = g.slice_cols(q, hix * hd, hd);
        ValueId kh = g.slice_cols(k, hix * hd, hd);
        ValueId vh = g.slice_cols(v, hix * hd, hd);
        ValueId scores = g.scale(g.matmul_nt(qh, kh), inv_sqrt);
        ValueId probs = g.causal_softmax(scores);
        heads.push_back(g.matmul(probs, vh));
    }
    ValueId ctx = g.concat_cols(heads);
    ValueId x1 = g.add(x, g.matmul(ctx, g.param(L.wo)));

    ValueId h2 = g.rms_norm(x1, g.param(L.ffn_norm), cfg_.norm_eps);
    ValueId gate = g.silu(g.matmul(h2, g.param(L.w_gate)));
    ValueId up = g.matmul(h2, g.param(L.w_up));
    ValueId ffn = g.matmul(g.mul(gate, up), g.param(L.w_down));
    return g.add(x1, ffn);
}

std::vector<Model::OffsetLogits> Model::forward_offsets(Graph& g, const std::vector<int>& tokens,
                                                        const std::vector<int>& offsets,
                                                        int target_bound, MuConvention mu) const {
    require(!tokens.empty(), "forward: empty input");
    require(static_cast<int>(tokens.size()) <= cfg_.max_seq_len,
            "forward: sequence exceeds max_seq_len");
    require(!offsets.empty(), "forward: no offsets requested");
    const int n = static_cast<int>(tokens.size());
    const std::vector<int> positions = iota_positions(n);
    auto* self = const_cast<Model*>(this);

    ValueId emb = g.param(self->embedding_);
    ValueId x = g.gather_rows(emb, tokens);
    for (int l = 0; l + 1 < cfg_.n_layers; ++l) x = block_forward(g, x, layers_[l], positions);

    // last layer: K/V (and the pre-rotation Q) are shared across offsets
    auto& L = const_cast<Layer&>(layers_[cfg_.n_layers - 1]);
    const int hd = cfg_.head_dim();
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));

    ValueId h = g.rms_norm(x, g.param(L.attn_norm), cfg_.norm_eps);
    ValueId q_pre = g.matmul(h, g.param(L.wq));
    ValueId k = g.rope_rows(g.matmul(h, g.param(L.wk)), positions, hd, cfg_.rope_base);
    ValueId v = g.matmul(h, g.param(L.wv));
    std::vector<ValueId> kh(cfg_.n_heads), vh(cfg_.n_heads);
    for (int hix = 0; hix < cfg_.n_heads; ++hix) {
        kh[hix] = g.slice_cols(k, hix * hd, hd);
        vh[hix] = g.slice_cols(v, hix * hd, hd);
    }
    ValueId ffn_norm = g.param(L.ffn_norm);
    ValueId w_gate = g.param(L.w_gate);
    ValueId w_up = g.param(L.w_up);
    ValueId w_down = g.param(L.w_down);
    ValueId wo = g.param(L.wo);
    ValueId fnorm = g.param(self->final_norm_);

    std::vector<OffsetLogits> out;
    out.reserve(offsets.size());
    for (int d : offsets) {
        std::vector<int> mu_pos(n);
        std::vector<uint8_t> avail(n);
        for (int i = 0; i < n; ++i) {
            const int m = mu_index(i, d, mu);
            const int t = i + d;
            avail[i] = (m >= 0 && t >= 0 && t < target_bound) ? 1 : 0;
            mu_pos[i] = std::max(m, 0);
        }
        ValueId qd = g.rope_rows(q_pre, mu_pos, hd, cfg_.rope_base);
        std::vector<ValueId> heads;
        for (int hix = 0; hix < cfg_.n_heads; ++hix) {
            ValueId qh = g.slice_cols(qd, hix * hd, hd);
            ValueId scores = g.scale(g.matmul_nt(qh, kh[hix]), inv_sqrt);
            ValueId probs = g.causal_softmax(scores);
            heads.push_back(g.matmul(probs, vh[hix]));
        }
        ValueId ctx = g.concat_cols(heads);
        ValueId x1 = g.add(x, g.matmul(ctx, wo));
        ValueId h2 = g.rms_norm(x1, ffn_norm, cfg_.norm_eps);
        ValueId gate = g.silu(g.matmul(h2, w_gate));
        ValueId up = g.matmul(h2, w_up);
        ValueId x2 = g.add(x1, g.matmul(g.mul(gate, up), w_down));
        ValueId fin = g.rms_norm(x2, fnorm, cfg_.norm_eps);
        ValueId logits = g.matmul_nt(fin, emb);  // tied unembedding
        out.push_back({d, g.log_softmax_rows(logits), std::move(avail)});
    }
    return out;
}

PredictionGrid Model::forward_grid(const std::vector<int>& tokens, const std::vector<int>& offsets,
                                   int target_bound, MuConvention mu) const {
    const int n = static_cast<int>(tokens.size());
    if (target_bound < 0) target_bound = n;
    Graph g;
    auto per_offset = forward_offsets(g, tokens, offsets, target_bound, mu);

    PredictionGrid grid;
    grid.seq_len = n;
    grid.vocab = cfg_.vocab_size;
    grid.target_bound = target_bound;
    grid.offsets = offsets;
    grid.logp.assign(n, std::vector<std::vector<float>>(offsets.size()));
    for (size_t c = 0; c < per_offset.size(); ++c) {
        const Tensor& lp = g.value(per_offset[c].logp);
        for (int i = 0; i < n; ++i) {
            if (!per_offset[c].available[i]) continue;
            grid.logp[i][c].assign(lp.row_ptr(i), lp.row_ptr(i) + cfg_.vocab_size);
        }
    }
    return grid;
}

}  // namespace oalm
