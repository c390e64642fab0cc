#pragma once

#include <map>
#include <memory>
#include <optional>
#include <vector>

#include "oalm/autograd.hpp"

namespace oalm {

enum class MuConvention {
    target,            // query rotated at the target position itself
    target_minus_one,  // query rotated at target - 1; offset 1 matches plain next-token RoPE
};

/// Dependency window and decoding knobs shared by trainer and decoder.
struct OffsetConfig {
    int k_fwd = 4;  // forward offsets 1..k_fwd
    int k_bwd = 8;  // backward offsets 0, -1, .., -(k_bwd-1)
    std::map<int, double> lambda;            // offset -> decay weight; filled by default_lambda()
    double lambda_decay = 0.7;               // default for offsets >= 2 when lambda is empty
    std::vector<double> gamma = {1.0, 1.1, 1.2, 1.3};  // tree scale by depth in block
    double epsilon = 0.2;                    // acceptance threshold
    int block_size = 8;
    MuConvention mu_convention = MuConvention::target_minus_one;

    std::vector<int> offsets() const;           // forward then backward
    std::vector<int> forward_offsets() const;   // 1..k_fwd
    std::vector<int> backward_offsets() const;  // 0,-1,..
    double lambda_of(int offset) const;
    double gamma_at(int depth_in_block) const;  // clamps to the last entry
    void validate() const;

    static OffsetConfig next_token_only();  // k_fwd=1, k_bwd=0, block 1
};

struct ModelConfig {
    int vocab_size = 64;
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int d_ff = 256;
    int max_seq_len = 256;
    double rope_base = 10000.0;
    double init_std = 0.02;
    float norm_eps = 1e-5f;

    int head_dim() const { return d_model / n_heads; }
    void validate() const;
};

/// Per-position, per-offset log-probability lattice from one forward pass.
/// Entry (i, d) is the predicted distribution of the token at absolute
/// position i + d conditioned on tokens 0..i. Unavailable entries are empty.
struct PredictionGrid {
    int seq_len = 0;
    int vocab = 0;
    int target_bound = 0;  // entries require 0 <= i + d < target_bound
    std::vector<int> offsets;
    std::vector<std::vector<std::vector<float>>> logp;  // [pos][offset column]

    struct Dep {
        int pos;     // conditioning end i
        int offset;  // d with i + d == target
    };

    int col_of(int offset) const;
    bool available(int pos, int offset) const;
    const std::vector<float>& at(int pos, int offset) const;
    /// All available dependencies predicting absolute position t.
    std::vector<Dep> deps_for_target(int t) const;
};

// ---- rotary position encoding, standalone form ----

/// Pairwise 2-D rotation of `vec` by angles position * base^(-2j/dim).
std::vector<float> rope_encode(const std::vector<float>& vec, int position, double base = 10000.0);

/// Final-layer query for predicting offset d from base position m.
/// Returns nothing when the effective rotation index is negative, which
/// marks the (m, d) grid entry unavailable.
std::optional<std::vector<float>> target_aware_query(const std::vector<float>& q, int base_pos,
                                                     int offset, MuConvention mu,
                                                     double base = 10000.0);

/// Effective rotation index for (base position, offset) under a convention;
/// negative means unavailable.
int mu_index(int base_pos, int offset, MuConvention mu);

/// Decoder-only transformer with RMS-norm pre-norm blocks, SwiGLU feed
/// forward, tied input/output embeddings, and per-offset final-layer query
/// rotation. The parameter set is independent of the offset configuration.
class Model {
  public:
    Model(ModelConfig cfg, uint64_t seed);     // random init
    explicit Model(ModelConfig cfg);           // zero init (checkpoint loading)

    const ModelConfig& config() const { return cfg_; }
    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    Parameter* find_parameter(const std::string& name);
    int64_t param_count() const;

    struct OffsetLogits {
        int offset;
        ValueId logp;                    // [T x V] log-softmax rows
        std::vector<uint8_t> available;  // per conditioning position
    };

    /// Taped forward pass. Layers below the last use standard RoPE; the last
    /// layer is evaluated once per requested offset with shared K/V.
    std::vector<OffsetLogits> forward_offsets(Graph& g, const std::vector<int>& tokens,
                                              const std::vector<int>& offsets,
                                              int target_bound, MuConvention mu) const;

    /// Untaped convenience wrapper producing a PredictionGrid.
    /// target_bound < 0 means "length of tokens" (training convention).
    PredictionGrid forward_grid(const std::vector<int>& tokens, const std::vector<int>& offsets,
                                int target_bound = -1,
                                MuConvention mu = MuConvention::target_minus_one) const;

  private:
    struct Layer {
        Parameter attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down;
    };

    ValueId block_forward(Graph& g, ValueId x, const Layer& layer,
                          const std::vector<int>& positions) const;

    ModelConfig cfg_;
    Parameter embedding_;  // [V x d], tied with the unembedding
    std::vector<Layer> layers_;
    Parameter final_norm_;
};

}  // namespace oalm
