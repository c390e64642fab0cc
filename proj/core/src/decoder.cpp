#include "oalm/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>

#include <json.hpp>

namespace oalm {

MockOracle::MockOracle(std::vector<int> prompt, std::vector<int> continuation, int vocab,
                       double default_alpha, uint64_t seed)
    : prompt_len_(static_cast<int>(prompt.size())),
      vocab_(vocab),
      default_alpha_(default_alpha),
      rng_(hash_combine(seed, 0x0AC1Eull)) {
    require(!prompt.empty() && !continuation.empty(), "mock oracle: empty prompt/continuation");
    truth_ = std::move(prompt);
    truth_.insert(truth_.end(), continuation.begin(), continuation.end());
}

PredictionGrid MockOracle::forward(const std::vector<int>& tokens,
                                   const std::vector<int>& offsets, int target_bound) {
    const int n = static_cast<int>(tokens.size());
    const int truth_len = static_cast<int>(truth_.size());
    PredictionGrid grid;
    grid.seq_len = n;
    grid.vocab = vocab_;
    grid.target_bound = std::min(target_bound, truth_len);
    grid.offsets = offsets;
    grid.logp.assign(n, std::vector<std::vector<float>>(offsets.size()));

    const float lp_mode = std::log(0.9f);
    const float lp_rest = std::log(0.1f / static_cast<float>(vocab_ - 1));
    for (size_t c = 0; c < offsets.size(); ++c) {
        const int d = offsets[c];
        const double a = alpha.count(d) ? alpha.at(d) : default_alpha_;
        for (int i = 0; i < n; ++i) {
            const int t = i + d;
            if (t < 0 || t >= grid.target_bound) continue;
            const int true_token = truth_[t];
            int mode = true_token;
            if (rng_.uniform() >= a) {
                mode = rng_.uniform_int(vocab_ - 1);
                if (mode >= true_token) ++mode;
            }
            std::vector<float> row(vocab_, lp_rest);
            row[mode] = lp_mode;
            grid.logp[i][c] = std::move(row);
        }
    }
    return grid;
}

std::vector<double> dependency_weights(const std::vector<PredictionGrid::Dep>& deps,
                                       const OffsetConfig& oc,
                                       const std::vector<double>& confidence, int prompt_len) {
    require(!deps.empty(), "dependency_weights: no available dependency");
    std::vector<double> w(deps.size());
    for (size_t i = 0; i < deps.size(); ++i) {
        double ctx = 1.0;
        const int oi = deps[i].pos - prompt_len;  // index of the last generated context token
        if (oi >= 0) {
            const int win = std::min(oi + 1, oc.block_size);
            double acc = 0.0;
            for (int j = oi - win + 1; j <= oi; ++j) acc += confidence[j];
            ctx = acc / win;
        }
        w[i] = oc.lambda_of(deps[i].offset) * ctx;
    }
    double sum = 0.0;
    for (double x : w) sum += x;
    if (sum <= 0.0) {
        std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(w.size()));
        return w;
    }
    for (auto& x : w) x /= sum;
    return w;
}

std::vector<double> ensemble_distribution(const std::vector<const std::vector<float>*>& logps,
                                          const std::vector<double>& weights) {
    require(!logps.empty() && logps.size() == weights.size(),
            "ensemble_distribution: inputs and weights must align");
    const size_t v = logps[0]->size();
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    require(wsum > 0.0, "ensemble_distribution: weights must sum to > 0");

    std::vector<double> avg(v, 0.0);
    for (size_t i = 0; i < logps.size(); ++i) {
        require(logps[i]->size() == v, "ensemble_distribution: dimension mismatch");
        const double w = weights[i] / wsum;
        const std::vector<float>& lp = *logps[i];
        for (size_t j = 0; j < v; ++j) avg[j] += w * lp[j];
    }
    double mx = avg[0];
    for (double x : avg) mx = std::max(mx, x);
    double sum = 0.0;
    for (auto& x : avg) {
        x = std::exp(x - mx);
        sum += x;
    }
    for (auto& x : avg) x /= sum;
    return avg;
}

std::vector<std::pair<int, double>> top_k_tokens(const std::vector<double>& probs, int k) {
    std::vector<std::pair<int, double>> all(probs.size());
    for (size_t i = 0; i < probs.size(); ++i) all[i] = {static_cast<int>(i), probs[i]};
    const int kk = std::min<int>(k, static_cast<int>(probs.size()));
    std::partial_sort(all.begin(), all.begin() + kk, all.end(),
                      [](const auto& a, const auto& b) {
                          if (a.second != b.second) return a.second > b.second;
                          return a.first < b.first;
                      });
    all.resize(kk);
    return all;
}

namespace {

struct DepTerm {
    int pos;
    int offset;
};

// next-token plus backward dependencies of target t that exist in the grid
std::vector<DepTerm> verification_family(const PredictionGrid& grid, int t,
                                         const OffsetConfig& oc) {
    std::vector<DepTerm> out;
    if (grid.available(t - 1, 1)) out.push_back({t - 1, 1});
    for (int j = 0; j < oc.k_bwd; ++j) {
        if (grid.available(t + j, -j)) out.push_back({t + j, -j});
    }
    return out;
}

double row_entropy(const std::vector<float>& logp) {
    double h = 0.0;
    for (float lp : logp) {
        const double p = std::exp(static_cast<double>(lp));
        if (p > 0.0) h -= p * lp;
    }
    return h;
}

double vote_fraction(const PredictionGrid& grid, const std::vector<DepTerm>& fam, int token,
                     double epsilon) {
    int passes = 0;
    for (const DepTerm& f : fam) {
        const auto& lp = grid.at(f.pos, f.offset);
        const double p = std::exp(static_cast<double>(lp[token]));
        const double thr = std::min(epsilon, epsilon * std::exp(-row_entropy(lp)));
        if (p > thr) ++passes;
    }
    return static_cast<double>(passes) / static_cast<double>(fam.size());
}

}  // namespace

double verification_score(const PredictionGrid& grid, int t, int token, const OffsetConfig& oc) {
    const auto fam = verification_family(grid, t, oc);
    require(!fam.empty(), "verification_score: no available dependency terms");
    double num = 0.0, den = 0.0;
    for (const DepTerm& f : fam) {
        const double l = oc.lambda_of(f.offset);
        num += l * grid.at(f.pos, f.offset)[token];
        den += l;
    }
    return num / den;
}

double contrastive_score(const PredictionGrid& grid, int t, int token, const OffsetConfig& oc) {
    require(grid.available(t - 1, 1), "contrastive_score: next-token entry unavailable");
    const double log_nt = grid.at(t - 1, 1)[token];
    double num = 0.0, den = 0.0;
    for (int d = 2; d <= oc.k_fwd; ++d) {
        if (!grid.available(t - d, d)) continue;
        const double lp = 1.0 / oc.lambda_of(d);
        num += lp * grid.at(t - d, d)[token];
        den += lp;
    }
    if (den == 0.0) return 0.0;
    return std::max(0.0, log_nt - num / den);
}

double acceptance_probability(const PredictionGrid& grid, int t, int token,
                              const OffsetConfig& oc) {
    const auto fam = verification_family(grid, t, oc);
    require(!fam.empty(), "acceptance_probability: no available dependency");
    return vote_fraction(grid, fam, token, oc.epsilon);
}

CandidateTree build_candidate_tree(const std::vector<std::vector<std::pair<int, double>>>& topk,
                                   const std::vector<double>& gamma_by_depth, int node_budget) {
    require(node_budget >= 1, "candidate tree: node budget must be >= 1");
    require(!topk.empty(), "candidate tree: need at least one position");
    require(gamma_by_depth.size() >= topk.size(), "candidate tree: gamma per depth required");
    for (const auto& lst : topk) require(!lst.empty(), "candidate tree: empty top-k list");

    CandidateTree tree;
    tree.n_positions = static_cast<int>(topk.size());

    struct Cand {
        double score;
        int pos, rank, parent;
        int token;
    };
    auto worse = [](const Cand& a, const Cand& b) {
        if (a.score != b.score) return a.score < b.score;
        if (a.token != b.token) return a.token > b.token;  // lowest token id wins
        if (a.pos != b.pos) return a.pos > b.pos;
        return a.parent > b.parent;
    };
    std::priority_queue<Cand, std::vector<Cand>, decltype(worse)> frontier(worse);

    frontier.push({topk[0][0].second / gamma_by_depth[0], 0, 0, -1, topk[0][0].first});
    while (!frontier.empty() && static_cast<int>(tree.nodes.size()) < node_budget) {
        const Cand c = frontier.top();
        frontier.pop();
        const int id = static_cast<int>(tree.nodes.size());
        tree.nodes.push_back({c.pos, c.rank, c.token, topk[c.pos][c.rank].second, c.score,
                              c.parent});
        if (c.rank + 1 < static_cast<int>(topk[c.pos].size())) {
            const double parent_score =
                c.parent < 0 ? 1.0 : tree.nodes[c.parent].path_score;
            frontier.push({parent_score * topk[c.pos][c.rank + 1].second / gamma_by_depth[c.pos],
                           c.pos, c.rank + 1, c.parent, topk[c.pos][c.rank + 1].first});
        }
        if (c.pos + 1 < tree.n_positions) {
            frontier.push({c.score * topk[c.pos + 1][0].second / gamma_by_depth[c.pos + 1],
                           c.pos + 1, 0, id, topk[c.pos + 1][0].first});
        }
    }
    return tree;
}

std::vector<std::vector<int>> candidate_paths(
    const CandidateTree& tree, const std::vector<std::vector<std::pair<int, double>>>& topk) {
    std::vector<uint8_t> has_child(tree.nodes.size(), 0);
    for (const auto& n : tree.nodes)
        if (n.parent >= 0) has_child[n.parent] = 1;

    std::vector<std::vector<int>> paths;
    for (size_t i = 0; i < tree.nodes.size(); ++i) {
        if (has_child[i]) continue;
        std::vector<int> path(tree.n_positions);
        for (int p = 0; p < tree.n_positions; ++p) path[p] = topk[p][0].first;
        for (int cur = static_cast<int>(i); cur >= 0; cur = tree.nodes[cur].parent)
            path[tree.nodes[cur].pos] = tree.nodes[cur].token;
        paths.push_back(std::move(path));
    }
    return paths;
}

namespace {

// Acceptance for the decode loop. Fresh frontier positions may lack every
// next-token/backward term in the current pass; the vote then falls back to
// whatever dependencies the grid does have for them.
double decode_acceptance(const PredictionGrid& grid, int t, int token, const OffsetConfig& oc) {
    const auto fam = verification_family(grid, t, oc);
    if (!fam.empty()) return vote_fraction(grid, fam, token, oc.epsilon);
    std::vector<DepTerm> all;
    for (const auto& dep : grid.deps_for_target(t)) all.push_back({dep.pos, dep.offset});
    if (all.empty()) return 0.0;
    return vote_fraction(grid, all, token, oc.epsilon);
}

}  // namespace

DecodeResult decode(GridSource& src, const std::vector<int>& prompt, const OffsetConfig& oc,
                    const DecodeOptions& opt) {
    require(!prompt.empty(), "decode: prompt must be non-empty");
    oc.validate();
    require(opt.max_len >= 1, "decode: max_len must be >= 1");

    const int P = static_cast<int>(prompt.size());
    const int b = oc.block_size;
    const int k = oc.k_fwd;
    const auto offsets = oc.offsets();

    DecodeResult res;
    std::vector<int> y;
    std::vector<double> conf;
    std::vector<int> refine;
    Rng rng(hash_combine(opt.seed, 0xDEC0DEull));

    int t_s = 0;
    int t_e = std::min(k, b) - 1;
    int stall = 0;

    while (t_s < opt.max_len) {
        t_e = std::min(t_e, opt.max_len - 1);
        if (!opt.use_multi_forward) t_e = std::min(t_e, static_cast<int>(y.size()));
        t_e = std::min(t_e, src.max_positions() - P - 1);
        if (t_e < t_s) break;  // capacity exhausted

        std::vector<int> full = prompt;
        full.insert(full.end(), y.begin(), y.end());
        PredictionGrid base = src.forward(full, offsets, P + t_e + 1);
        ++res.model_calls;

        // ensemble distribution and top-k per block position
        std::vector<std::vector<std::pair<int, double>>> topk;
        for (int j = t_s; j <= t_e; ++j) {
            const auto deps = base.deps_for_target(P + j);
            if (deps.empty()) {
                t_e = j - 1;
                break;
            }
            const auto w = dependency_weights(deps, oc, conf, P);
            std::vector<const std::vector<float>*> lps;
            lps.reserve(deps.size());
            for (const auto& dep : deps) lps.push_back(&base.at(dep.pos, dep.offset));
            topk.push_back(top_k_tokens(ensemble_distribution(lps, w), opt.tree_top_k));
        }
        if (t_e < t_s) break;  // nothing predictable at the block start
        topk.resize(t_e - t_s + 1);

        std::vector<double> gammas(topk.size());
        for (size_t j = 0; j < gammas.size(); ++j) gammas[j] = oc.gamma_at(static_cast<int>(j));
        CandidateTree tree = build_candidate_tree(topk, gammas, opt.node_budget);
        auto paths = candidate_paths(tree, topk);

        std::vector<int> chosen;
        PredictionGrid chosen_grid;
        bool have_chosen_grid = false;
        int considered = 1;
        if (opt.use_verifier) {
            considered = static_cast<int>(paths.size());
            double best = -std::numeric_limits<double>::infinity();
            for (const auto& path : paths) {
                std::vector<int> seqp = prompt;
                seqp.insert(seqp.end(), y.begin(), y.begin() + t_s);
                seqp.insert(seqp.end(), path.begin(), path.end());
                PredictionGrid gp = src.forward(seqp, offsets, P + t_e + 1);
                ++res.model_calls;
                double score = 0.0;
                for (size_t j = 0; j < path.size(); ++j) {
                    const int t = P + t_s + static_cast<int>(j);
                    score += verification_score(gp, t, path[j], oc) +
                             contrastive_score(gp, t, path[j], oc);
                }
                score /= static_cast<double>(path.size());
                const bool better =
                    score > best || (score == best && !chosen.empty() && path < chosen);
                if (better) {
                    best = score;
                    chosen = path;
                    chosen_grid = std::move(gp);
                    have_chosen_grid = true;
                }
            }
        } else {
            chosen.resize(topk.size());
            for (size_t j = 0; j < topk.size(); ++j) chosen[j] = topk[j][0].first;
        }

        // splice the block into the output buffer
        y.resize(t_s);
        y.insert(y.end(), chosen.begin(), chosen.end());
        conf.resize(t_e + 1, 0.0);
        refine.resize(t_e + 1, 0);

        const PredictionGrid& score_grid = have_chosen_grid ? chosen_grid : base;
        for (int j = t_s; j <= t_e; ++j) {
            conf[j] = decode_acceptance(score_grid, P + j, y[j], oc);
            refine[j] += 1;
        }

        // rejection sampling slides the block start over the accepted prefix;
        // a position needs min_refinements re-prediction rounds after its
        // first proposal before it may be accepted
        const int block_start = t_s;
        int accepted = 0;
        bool hit_eos = false;
        for (int j = t_s; j <= t_e; ++j) {
            if (refine[j] < opt.min_refinements + 1) break;
            if (rng.uniform() >= conf[j]) break;
            ++t_s;
            ++accepted;
            if (y[j] == opt.eos_token) {
                y.resize(j + 1);
                res.complete = true;
                hit_eos = true;
                break;
            }
        }
        if (accepted == 0) {
            ++stall;
            if (stall >= opt.max_stall) {
                // livelock guard: commit the block's first token
                ++t_s;
                accepted = 1;
                stall = 0;
                if (y[t_s - 1] == opt.eos_token) {
                    y.resize(t_s);
                    res.complete = true;
                    hit_eos = true;
                }
            }
        } else {
            stall = 0;
        }

        TraceEntry te;
        te.iter = ++res.iterations;
        te.t_s = block_start;
        te.t_e = t_e;
        te.candidates_considered = considered;
        te.chosen = chosen;
        te.c.assign(conf.begin() + block_start, conf.begin() + t_e + 1);
        te.accepted_prefix_len = accepted;
        res.trace.push_back(std::move(te));

        if (hit_eos) break;
        const int t = static_cast<int>(y.size());
        t_e = std::min(t_s + b - 1, t + k - 1);
    }

    if (static_cast<int>(y.size()) > opt.max_len) y.resize(opt.max_len);
    res.tokens = std::move(y);
    return res;
}

GreedyResult greedy_decode(GridSource& src, const std::vector<int>& prompt, int eos_token,
                           int max_len) {
    require(!prompt.empty(), "greedy_decode: prompt must be non-empty");
    GreedyResult res;
    std::vector<int> full = prompt;
    const std::vector<int> nt = {1};
    while (static_cast<int>(res.tokens.size()) < max_len) {
        if (static_cast<int>(full.size()) + 1 > src.max_positions()) break;
        PredictionGrid grid = src.forward(full, nt, static_cast<int>(full.size()) + 1);
        ++res.model_calls;
        const int last = static_cast<int>(full.size()) - 1;
        if (!grid.available(last, 1)) break;
        const auto& lp = grid.at(last, 1);
        int best = 0;
        for (int v = 1; v < static_cast<int>(lp.size()); ++v)
            if (lp[v] > lp[best]) best = v;
        res.tokens.push_back(best);
        full.push_back(best);
        if (best == eos_token) {
            res.complete = true;
            break;
        }
    }
    return res;
}

void write_trace_jsonl(const std::string& path, const std::vector<TraceEntry>& trace) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open trace for writing: " + path);
    for (const TraceEntry& te : trace) {
        nlohmann::json j;
        j["iter"] = te.iter;
        j["t_s"] = te.t_s;
        j["t_e"] = te.t_e;
        j["candidates_considered"] = te.candidates_considered;
        j["chosen"] = te.chosen;
        j["c"] = te.c;
        j["accepted_prefix_len"] = te.accepted_prefix_len;
        out << j.dump() << "\n";
    }
}

}  // namespace oalm
