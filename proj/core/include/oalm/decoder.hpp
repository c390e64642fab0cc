#pragma once

#include <limits>
#include <map>

#include "oalm/model.hpp"

namespace oalm {

/// Anything that can produce a PredictionGrid for a token sequence: the
/// transformer, or a mock oracle in decoder-only tests. Decoding counts one
/// model call per forward() invocation.
struct GridSource {
    virtual ~GridSource() = default;
    virtual PredictionGrid forward(const std::vector<int>& tokens, const std::vector<int>& offsets,
                                   int target_bound) = 0;
    /// Hard cap on sequence length (model capacity); decoding clamps to it.
    virtual int max_positions() const { return std::numeric_limits<int>::max() / 2; }
};

class ModelGridSource : public GridSource {
  public:
    explicit ModelGridSource(const Model& m, MuConvention mu = MuConvention::target_minus_one)
        : model_(m), mu_(mu) {}
    PredictionGrid forward(const std::vector<int>& tokens, const std::vector<int>& offsets,
                           int target_bound) override {
        return model_.forward_grid(tokens, offsets, target_bound, mu_);
    }
    int max_positions() const override { return model_.config().max_seq_len; }

  private:
    const Model& model_;
    MuConvention mu_;
};

/// Grid source with a fixed ground-truth continuation. Per offset d, the
/// mode of each produced distribution is the true token with probability
/// alpha_d and a random wrong token otherwise; the mode carries mass 0.9.
class MockOracle : public GridSource {
  public:
    MockOracle(std::vector<int> prompt, std::vector<int> continuation, int vocab,
               double default_alpha, uint64_t seed);

    /// Per-offset accuracy override (defaults to the constructor alpha).
    std::map<int, double> alpha;

    PredictionGrid forward(const std::vector<int>& tokens, const std::vector<int>& offsets,
                           int target_bound) override;

    const std::vector<int>& truth() const { return truth_; }

  private:
    std::vector<int> truth_;  // prompt followed by the continuation
    int prompt_len_;
    int vocab_;
    double default_alpha_;
    Rng rng_;
};

// ---- ensemble prediction ----

/// Normalized dependency weights: lambda(offset) times the mean cached
/// confidence of the dependency's generated context (prompt-only -> 1).
/// `confidence` holds per-generated-token acceptance probabilities.
std::vector<double> dependency_weights(const std::vector<PredictionGrid::Dep>& deps,
                                       const OffsetConfig& oc,
                                       const std::vector<double>& confidence, int prompt_len);

/// Weighted geometric-mean ensemble: softmax of the weighted average of
/// per-dependency log-probabilities. Weights are normalized defensively.
std::vector<double> ensemble_distribution(const std::vector<const std::vector<float>*>& logps,
                                          const std::vector<double>& weights);

/// Top-k (token, probability) pairs, probability descending, ties by id.
std::vector<std::pair<int, double>> top_k_tokens(const std::vector<double>& probs, int k);

// ---- verification and acceptance ----

/// Lambda-weighted mean log-probability of `token` at position `t` over the
/// available next-token and backward dependencies.
double verification_score(const PredictionGrid& grid, int t, int token, const OffsetConfig& oc);

/// Clamped margin of the next-token log-probability over the inverse-lambda
/// weighted mean of long-forward dependencies; 0 when none are available.
double contrastive_score(const PredictionGrid& grid, int t, int token, const OffsetConfig& oc);

/// Fraction of available next-token/backward dependencies whose probability
/// for `token` exceeds min(epsilon, epsilon * exp(-H)) with H the Shannon
/// entropy (nats) of that dependency's distribution.
double acceptance_probability(const PredictionGrid& grid, int t, int token,
                              const OffsetConfig& oc);

// ---- candidate tree ----

struct CandidateTree {
    struct Node {
        int pos;            // depth within the block (0-based)
        int rank;           // which top-k entry of that position
        int token;
        double prob;        // model probability of this token at this position
        double path_score;  // product of prob/gamma along the path
        int parent;         // -1 for children of the virtual root
    };
    std::vector<Node> nodes;
    int n_positions = 0;
};

/// Greedy budget-bounded construction: repeatedly adds the frontier node
/// with the highest path score prod_j p_j / gamma_j.
CandidateTree build_candidate_tree(const std::vector<std::vector<std::pair<int, double>>>& topk,
                                   const std::vector<double>& gamma_by_depth, int node_budget);

/// Leaf-to-root paths as full block fillings; positions past a leaf are
/// filled with that position's rank-0 token.
std::vector<std::vector<int>> candidate_paths(
    const CandidateTree& tree, const std::vector<std::vector<std::pair<int, double>>>& topk);

// ---- sliding blockwise decoding ----

struct DecodeOptions {
    bool use_verifier = true;
    bool use_multi_forward = true;
    int max_len = 256;        // output budget T
    int min_refinements = 0;  // block residency floor before acceptance applies
    int tree_top_k = 4;
    int node_budget = 64;
    int max_stall = 16;  // force one accept after this many fruitless iterations
    uint64_t seed = 0;
    int eos_token = 1;
};

struct TraceEntry {
    int iter = 0;
    int t_s = 0, t_e = 0;
    int candidates_considered = 0;
    std::vector<int> chosen;
    std::vector<double> c;
    int accepted_prefix_len = 0;
};

struct DecodeResult {
    std::vector<int> tokens;
    bool complete = false;
    int model_calls = 0;
    int iterations = 0;
    std::vector<TraceEntry> trace;
};

/// Sliding blockwise decoding: per iteration one forward pass feeds the
/// per-position ensembles, a candidate tree proposes block fillings, the
/// verifier (optional) rescoring pass picks one, and per-token rejection
/// sampling on the acceptance probability slides the block start.
DecodeResult decode(GridSource& src, const std::vector<int>& prompt, const OffsetConfig& oc,
                    const DecodeOptions& opt);

/// Plain greedy next-token reference decoder.
struct GreedyResult {
    std::vector<int> tokens;
    bool complete = false;
    int model_calls = 0;
};

GreedyResult greedy_decode(GridSource& src, const std::vector<int>& prompt, int eos_token,
                           int max_len);

void write_trace_jsonl(const std::string& path, const std::vector<TraceEntry>& trace);

}  // namespace oalm
