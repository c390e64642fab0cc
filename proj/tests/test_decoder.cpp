#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "oalm/decoder.hpp"

using namespace oalm;

namespace {

PredictionGrid make_grid(int seq_len, int vocab, std::vector<int> offsets) {
    PredictionGrid g;
    g.seq_len = seq_len;
    g.vocab = vocab;
    g.target_bound = seq_len + 8;
    g.offsets = std::move(offsets);
    g.logp.assign(seq_len, std::vector<std::vector<float>>(g.offsets.size()));
    return g;
}

void set_probs(PredictionGrid& g, int pos, int offset, const std::vector<double>& probs) {
    std::vector<float> lp(probs.size());
    for (size_t i = 0; i < probs.size(); ++i) lp[i] = static_cast<float>(std::log(probs[i]));
    g.logp[pos][g.col_of(offset)] = std::move(lp);
}

std::vector<float> random_logp(int vocab, Rng& rng) {
    std::vector<double> x(vocab);
    double mx = -1e300;
    for (auto& v : x) {
        v = rng.gauss();
        mx = std::max(mx, v);
    }
    double sum = 0;
    for (auto& v : x) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    std::vector<float> out(vocab);
    for (int i = 0; i < vocab; ++i) out[i] = static_cast<float>(x[i] - lse);
    return out;
}

OffsetConfig oc_with(int k_fwd, int k_bwd) {
    OffsetConfig oc;
    oc.k_fwd = k_fwd;
    oc.k_bwd = k_bwd;
    return oc;
}

}  // namespace

TEST_CASE("dependency weights: single, hand-normalized pair, zero confidence") {
    OffsetConfig oc = oc_with(2, 1);
    std::vector<double> conf;  // nothing generated yet

    std::vector<PredictionGrid::Dep> one = {{4, 1}};
    auto w1 = dependency_weights(one, oc, conf, 5);
    REQUIRE(w1.size() == 1);
    CHECK(w1[0] == doctest::Approx(1.0));

    // lambda(1)=1 and lambda(2)=0.5 with unit confidences -> (2/3, 1/3)
    OffsetConfig oc2 = oc_with(2, 0);
    oc2.lambda[2] = 0.5;
    std::vector<PredictionGrid::Dep> deps = {{4, 1}, {3, 2}};
    auto w2 = dependency_weights(deps, oc2, conf, 5);
    CHECK(w2[0] == doctest::Approx(2.0 / 3));
    CHECK(w2[1] == doctest::Approx(1.0 / 3));

    // zero confidence context zeroes its dependency
    std::vector<double> conf0 = {0.0};
    std::vector<PredictionGrid::Dep> mixed = {{4, 1}, {5, 0}};  // second ends at output 0
    auto w3 = dependency_weights(mixed, oc, conf0, 5);
    CHECK(w3[0] == doctest::Approx(1.0));
    CHECK(w3[1] == doctest::Approx(0.0));

    CHECK_THROWS_AS(dependency_weights({}, oc, conf, 5), UsageError);
}

TEST_CASE("dependency weights use the mean confidence of the recent window") {
    OffsetConfig oc = oc_with(1, 0);
    oc.block_size = 2;
    std::vector<double> conf = {0.2, 0.4, 1.0};
    // dependency ends at output index 2: window of last 2 -> mean(0.4, 1.0) = 0.7
    std::vector<PredictionGrid::Dep> deps = {{7, 1}, {4, 4}};  // second is prompt-only
    oc.k_fwd = 4;
    auto w = dependency_weights(deps, oc, conf, 5);
    const double l4 = oc.lambda_of(4);
    const double total = 1.0 * 0.7 + l4 * 1.0;
    CHECK(w[0] == doctest::Approx(0.7 / total));
    CHECK(w[1] == doctest::Approx(l4 / total));
}

TEST_CASE("ensemble: single dependency is the identity") {
    Rng rng(1);
    auto lp = random_logp(16, rng);
    auto pi = ensemble_distribution({&lp}, {1.0});
    for (int v = 0; v < 16; ++v)
        CHECK(pi[v] == doctest::Approx(std::exp(static_cast<double>(lp[v]))).epsilon(1e-6));
}

TEST_CASE("ensemble: equal-weight pair is the normalized geometric mean") {
    std::vector<float> a = {std::log(0.9f), std::log(0.1f)};
    std::vector<float> b = {std::log(0.5f), std::log(0.5f)};
    auto pi = ensemble_distribution({&a, &b}, {0.5, 0.5});
    CHECK(pi[0] == doctest::Approx(0.75).epsilon(1e-6));
    CHECK(pi[1] == doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("ensemble: permutation symmetry and unanimous argmax preservation") {
    Rng rng(2);
    for (int trial = 0; trial < 1000; ++trial) {
        const int vocab = 8;
        auto a = random_logp(vocab, rng);
        auto b = random_logp(vocab, rng);
        auto c = random_logp(vocab, rng);
        const double w1 = 0.2 + rng.uniform(), w2 = 0.2 + rng.uniform(),
                     w3 = 0.2 + rng.uniform();
        auto fwd = ensemble_distribution({&a, &b, &c}, {w1, w2, w3});
        auto rev = ensemble_distribution({&c, &a, &b}, {w3, w1, w2});
        for (int v = 0; v < vocab; ++v) CHECK(fwd[v] == doctest::Approx(rev[v]).epsilon(1e-9));

        // force a unanimous mode and check it survives the ensemble
        const int star = rng.uniform_int(vocab);
        for (auto* lp : {&a, &b, &c}) {
            float mx = -1e30f;
            for (float v : *lp) mx = std::max(mx, v);
            (*lp)[star] = mx + 0.5f;
        }
        auto pi = ensemble_distribution({&a, &b, &c}, {w1, w2, w3});
        CHECK(static_cast<int>(std::max_element(pi.begin(), pi.end()) - pi.begin()) == star);
    }
}

TEST_CASE("verification score: single term, arithmetic mean, fixed point") {
    OffsetConfig oc = oc_with(2, 2);
    const int t = 5;
    PredictionGrid g = make_grid(8, 4, oc.offsets());

    // only the next-token dependency available
    set_probs(g, t - 1, 1, {0.4, 0.3, 0.2, 0.1});
    CHECK(verification_score(g, t, 0, oc) ==
          doctest::Approx(std::log(0.4)).epsilon(1e-6));

    // add a backward term: lambda both 1, logs (-1, -3) -> mean -2
    PredictionGrid g2 = make_grid(8, 4, oc.offsets());
    std::vector<float> r1(4, -5.0f), r2(4, -5.0f);
    r1[2] = -1.0f;
    r2[2] = -3.0f;
    g2.logp[t - 1][g2.col_of(1)] = r1;
    g2.logp[t][g2.col_of(0)] = r2;
    CHECK(verification_score(g2, t, 2, oc) == doctest::Approx(-2.0).epsilon(1e-6));

    // adding a term equal to the current mean leaves the mean unchanged
    PredictionGrid g3 = g2;
    std::vector<float> r3(4, -5.0f);
    r3[2] = -2.0f;
    g3.logp[t + 1][g3.col_of(-1)] = r3;
    CHECK(verification_score(g3, t, 2, oc) == doctest::Approx(-2.0).epsilon(1e-6));

    PredictionGrid empty = make_grid(8, 4, oc.offsets());
    CHECK_THROWS_AS(verification_score(empty, t, 0, oc), UsageError);
}

TEST_CASE("verification score never drops when every dependency improves") {
    Rng rng(3);
    OffsetConfig oc = oc_with(2, 3);
    for (int trial = 0; trial < 200; ++trial) {
        const int t = 4;
        PredictionGrid g = make_grid(8, 6, oc.offsets());
        g.logp[t - 1][g.col_of(1)] = random_logp(6, rng);
        if (rng.uniform() < 0.7) g.logp[t][g.col_of(0)] = random_logp(6, rng);
        if (rng.uniform() < 0.7) g.logp[t + 1][g.col_of(-1)] = random_logp(6, rng);
        const int token = rng.uniform_int(6);
        const double before = verification_score(g, t, token, oc);
        PredictionGrid boosted = g;
        for (auto& cols : boosted.logp)
            for (auto& row : cols)
                if (!row.empty()) row[token] += 0.3f;
        CHECK(verification_score(boosted, t, token, oc) >= before - 1e-9);
    }
}

TEST_CASE("contrastive score: vacuous, hand margin, clamped") {
    OffsetConfig oc = oc_with(3, 1);
    const int t = 5;

    PredictionGrid g = make_grid(8, 4, oc.offsets());
    std::vector<float> nt(4, -4.0f);
    nt[1] = -0.1f;
    g.logp[t - 1][g.col_of(1)] = nt;
    CHECK(contrastive_score(g, t, 1, oc) == 0.0);  // no long-forward entries

    PredictionGrid g2 = g;
    std::vector<float> far(4, -4.0f);
    far[1] = -2.3f;
    g2.logp[t - 2][g2.col_of(2)] = far;
    CHECK(contrastive_score(g2, t, 1, oc) == doctest::Approx(2.2).epsilon(1e-5));

    // next-token below the long-dependency mean clamps at zero
    PredictionGrid g3 = g2;
    g3.logp[t - 1][g3.col_of(1)][1] = -3.0f;
    CHECK(contrastive_score(g3, t, 1, oc) == 0.0);

    PredictionGrid missing = make_grid(8, 4, oc.offsets());
    CHECK_THROWS_AS(contrastive_score(missing, t, 1, oc), UsageError);
}

TEST_CASE("contrastive score weights long dependencies by inverse lambda") {
    OffsetConfig oc = oc_with(3, 0);
    const int t = 6;
    PredictionGrid g = make_grid(8, 4, oc.offsets());
    std::vector<float> nt(4, -9.0f);
    nt[0] = -0.5f;
    std::vector<float> d2(4, -9.0f);
    d2[0] = -2.0f;
    std::vector<float> d3(4, -9.0f);
    d3[0] = -4.0f;
    g.logp[t - 1][g.col_of(1)] = nt;
    g.logp[t - 2][g.col_of(2)] = d2;
    g.logp[t - 3][g.col_of(3)] = d3;
    const double lp2 = 1.0 / oc.lambda_of(2), lp3 = 1.0 / oc.lambda_of(3);
    const double mean = (lp2 * -2.0 + lp3 * -4.0) / (lp2 + lp3);
    CHECK(contrastive_score(g, t, 0, oc) == doctest::Approx(-0.5 - mean).epsilon(1e-6));
}

TEST_CASE("acceptance probability: counting and the entropy-adaptive threshold") {
    OffsetConfig oc = oc_with(2, 3);
    oc.epsilon = 0.2;
    const int t = 4;

    // one uniform dependency over V=4: H = ln 4, threshold 0.05, p = 0.25 passes
    PredictionGrid g = make_grid(8, 4, oc.offsets());
    set_probs(g, t - 1, 1, {0.25, 0.25, 0.25, 0.25});
    CHECK(acceptance_probability(g, t, 2, oc) == doctest::Approx(1.0));

    // all dependencies pass -> 1
    PredictionGrid g2 = make_grid(8, 4, oc.offsets());
    for (auto [pos, off] : std::vector<std::pair<int, int>>{{t - 1, 1}, {t, 0}, {t + 1, -1}})
        set_probs(g2, pos, off, {0.85, 0.05, 0.05, 0.05});
    CHECK(acceptance_probability(g2, t, 0, oc) == doctest::Approx(1.0));

    // 2 of 4 pass -> 0.5
    PredictionGrid g3 = make_grid(8, 4, oc.offsets());
    set_probs(g3, t - 1, 1, {0.9, 0.04, 0.03, 0.03});      // pass for token 0
    set_probs(g3, t, 0, {0.85, 0.05, 0.05, 0.05});         // pass
    set_probs(g3, t + 1, -1, {0.001, 0.997, 0.001, 0.001});  // peaked elsewhere: fail
    set_probs(g3, t + 2, -2, {0.001, 0.001, 0.997, 0.001});  // fail
    CHECK(acceptance_probability(g3, t, 0, oc) == doctest::Approx(0.5));

    PredictionGrid none = make_grid(8, 4, oc.offsets());
    CHECK_THROWS_AS(acceptance_probability(none, t, 0, oc), UsageError);
}

TEST_CASE("candidate tree: budget one picks the top token of the first position") {
    std::vector<std::vector<std::pair<int, double>>> topk = {{{7, 0.6}, {3, 0.4}},
                                                             {{2, 0.9}, {5, 0.1}}};
    CandidateTree tree = build_candidate_tree(topk, {1.0, 1.1}, 1);
    REQUIRE(tree.nodes.size() == 1);
    CHECK(tree.nodes[0].pos == 0);
    CHECK(tree.nodes[0].token == 7);
    CHECK(tree.nodes[0].path_score == doctest::Approx(0.6));
    CHECK_THROWS_AS(build_candidate_tree(topk, {1.0, 1.1}, 0), UsageError);
}

TEST_CASE("candidate tree: worked example with gamma scaling") {
    // scores: 0.6, 0.6*(0.9/1.1)=0.4909.., 0.4 -- exactly the brute-force top 3
    std::vector<std::vector<std::pair<int, double>>> topk = {{{0, 0.6}, {1, 0.4}},
                                                             {{2, 0.9}, {3, 0.1}}};
    CandidateTree tree = build_candidate_tree(topk, {1.0, 1.1}, 3);
    REQUIRE(tree.nodes.size() == 3);
    CHECK(tree.nodes[0].path_score == doctest::Approx(0.6));
    CHECK(tree.nodes[0].token == 0);
    CHECK(tree.nodes[1].path_score == doctest::Approx(0.6 * 0.9 / 1.1));
    CHECK(tree.nodes[1].token == 2);
    CHECK(tree.nodes[1].parent == 0);
    CHECK(tree.nodes[2].path_score == doctest::Approx(0.4));
    CHECK(tree.nodes[2].token == 1);
}

namespace {

struct OracleNode {
    std::vector<int> ranks;  // path from the root, one rank per position
    double score;
};

void enumerate_nodes(const std::vector<std::vector<std::pair<int, double>>>& topk,
                     const std::vector<double>& gamma, std::vector<int>& path, double score,
                     std::vector<OracleNode>& out) {
    const size_t pos = path.size();
    if (pos == topk.size()) return;
    for (size_t r = 0; r < topk[pos].size(); ++r) {
        const double s = score * topk[pos][r].second / gamma[pos];
        path.push_back(static_cast<int>(r));
        out.push_back({path, s});
        enumerate_nodes(topk, gamma, path, s, out);
        path.pop_back();
    }
}

std::vector<int> tree_node_ranks(const CandidateTree& tree, int id) {
    std::vector<int> ranks;
    for (int cur = id; cur >= 0; cur = tree.nodes[cur].parent)
        ranks.push_back(tree.nodes[cur].rank);
    std::reverse(ranks.begin(), ranks.end());
    return ranks;
}

}  // namespace

TEST_CASE("candidate tree: greedy equals brute force on exhaustive small instances") {
    Rng rng(9);
    const std::vector<double> gamma = {1.0, 1.1, 1.2, 1.3};
    for (int n_pos = 1; n_pos <= 4; ++n_pos) {
        for (int rep = 0; rep < 20; ++rep) {
            std::vector<std::vector<std::pair<int, double>>> topk(n_pos);
            for (auto& lst : topk) {
                std::vector<double> p(3);
                double sum = 0;
                for (auto& v : p) {
                    v = 0.05 + rng.uniform();
                    sum += v;
                }
                std::sort(p.rbegin(), p.rend());
                for (int r = 0; r < 3; ++r) lst.push_back({r, p[r] / sum});
            }
            std::vector<OracleNode> all;
            std::vector<int> path;
            enumerate_nodes(topk, gamma, path, 1.0, all);
            std::stable_sort(all.begin(), all.end(),
                             [](const OracleNode& a, const OracleNode& b) {
                                 return a.score > b.score;
                             });
            for (int budget = 1; budget <= 10; ++budget) {
                // distinct-score precondition for a well-defined top set
                if (budget < static_cast<int>(all.size()) &&
                    std::abs(all[budget - 1].score - all[budget].score) < 1e-12)
                    continue;
                CandidateTree tree = build_candidate_tree(topk, gamma, budget);
                std::set<std::vector<int>> expect, got;
                for (int i = 0; i < std::min<int>(budget, static_cast<int>(all.size())); ++i)
                    expect.insert(all[i].ranks);
                for (size_t i = 0; i < tree.nodes.size(); ++i)
                    got.insert(tree_node_ranks(tree, static_cast<int>(i)));
                CHECK(expect == got);
            }
        }
    }
}

TEST_CASE("candidate tree: neutral gamma ranks paths by joint probability") {
    Rng rng(10);
    std::vector<std::vector<std::pair<int, double>>> topk(3);
    for (auto& lst : topk) {
        std::vector<double> p = {0.5 + rng.uniform() * 0.3, 0.2, 0.1};
        for (int r = 0; r < 3; ++r) lst.push_back({r, p[r]});
    }
    const std::vector<double> ones = {1.0, 1.0, 1.0};
    CandidateTree tree = build_candidate_tree(topk, ones, 39);  // full tree
    for (const auto& n : tree.nodes) {
        double joint = 1.0;
        for (int cur = static_cast<int>(&n - tree.nodes.data()); cur >= 0;
             cur = tree.nodes[cur].parent)
            joint *= tree.nodes[cur].prob;
        CHECK(n.path_score == doctest::Approx(joint).epsilon(1e-9));
    }
}

TEST_CASE("candidate paths pad short leaves with rank-0 tokens") {
    std::vector<std::vector<std::pair<int, double>>> topk = {{{0, 0.6}, {1, 0.4}},
                                                             {{2, 0.9}, {3, 0.1}}};
    CandidateTree tree = build_candidate_tree(topk, {1.0, 1.1}, 3);
    auto paths = candidate_paths(tree, topk);
    // leaves: (pos1 rank0 under pos0 rank0) and (pos0 rank1)
    REQUIRE(paths.size() == 2);
    CHECK(std::find(paths.begin(), paths.end(), std::vector<int>{0, 2}) != paths.end());
    CHECK(std::find(paths.begin(), paths.end(), std::vector<int>{1, 2}) != paths.end());
}

TEST_CASE("mock oracle: alpha pins the mode accuracy") {
    std::vector<int> prompt = {1, 2, 3};
    std::vector<int> cont = {4, 5, 6, 7, 8, 9, 10, 11};

    MockOracle sure(prompt, cont, 16, 1.0, 1);
    PredictionGrid g = sure.forward({1, 2, 3, 4, 5}, {1, 2, 0}, 8);
    for (int i = 0; i < 5; ++i) {
        for (int d : {1, 2, 0}) {
            if (!g.available(i, d)) continue;
            const auto& lp = g.at(i, d);
            const int mode =
                static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
            const int truth = (i + d < 3) ? prompt[i + d] : cont[i + d - 3];
            CHECK(mode == truth);
        }
    }

    MockOracle never(prompt, cont, 16, 0.0, 2);
    PredictionGrid g0 = never.forward({1, 2, 3, 4}, {1}, 5);
    for (int i = 0; i < 4; ++i) {
        if (!g0.available(i, 1)) continue;
        const auto& lp = g0.at(i, 1);
        const int mode = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
        const int truth = (i + 1 < 3) ? prompt[i + 1] : cont[i + 1 - 3];
        CHECK(mode != truth);
    }
}

TEST_CASE("mock oracle: empirical mode accuracy matches alpha within 1%") {
    std::vector<int> prompt = {1};
    std::vector<int> cont(24, 7);
    MockOracle oracle(prompt, cont, 32, 0.8, 3);
    int hits = 0, total = 0;
    while (total < 10000) {
        PredictionGrid g = oracle.forward({1, 7, 7, 7, 7}, {1, 2, 3}, 20);
        for (int i = 0; i < 5 && total < 10000; ++i) {
            for (int d : {1, 2, 3}) {
                if (!g.available(i, d) || total >= 10000) continue;
                const auto& lp = g.at(i, d);
                const int mode =
                    static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
                hits += (mode == 7) ? 1 : 0;
                ++total;
            }
        }
    }
    CHECK(std::abs(static_cast<double>(hits) / total - 0.8) < 0.01);
}

TEST_CASE("decode with offsets {1}, block 1, verifier off matches greedy decoding") {
    ModelConfig cfg;
    cfg.vocab_size = 64;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 48;
    cfg.max_seq_len = 48;
    Model model(cfg, 77);
    ModelGridSource src(model);

    OffsetConfig nt = OffsetConfig::next_token_only();
    DecodeOptions opt;
    opt.use_verifier = false;
    opt.max_len = 14;
    opt.eos_token = 1;

    Rng rng(20);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<int> prompt(3 + rng.uniform_int(5));
        for (auto& t : prompt) t = rng.uniform_int(cfg.vocab_size);
        opt.seed = rng.uniform_int(1 << 30);
        DecodeResult dr = decode(src, prompt, nt, opt);
        GreedyResult gr = greedy_decode(src, prompt, 1, opt.max_len);
        CHECK(dr.tokens == gr.tokens);
        CHECK(dr.complete == gr.complete);
    }
}

TEST_CASE("decode is deterministic for a fixed seed") {
    std::vector<int> prompt = {3, 4, 5};
    std::vector<int> cont = {10, 11, 12, 13, 14, 15, 16, 1};
    OffsetConfig oc = oc_with(3, 2);
    oc.block_size = 4;
    DecodeOptions opt;
    opt.use_verifier = false;
    opt.max_len = 16;
    opt.seed = 1234;

    MockOracle a(prompt, cont, 32, 0.7, 5);
    MockOracle b(prompt, cont, 32, 0.7, 5);
    DecodeResult ra = decode(a, prompt, oc, opt);
    DecodeResult rb = decode(b, prompt, oc, opt);
    CHECK(ra.tokens == rb.tokens);
    CHECK(ra.model_calls == rb.model_calls);
    REQUIRE(ra.trace.size() == rb.trace.size());
    for (size_t i = 0; i < ra.trace.size(); ++i) {
        CHECK(ra.trace[i].t_s == rb.trace[i].t_s);
        CHECK(ra.trace[i].chosen == rb.trace[i].chosen);
        CHECK(ra.trace[i].c == rb.trace[i].c);
    }
}

TEST_CASE("perfect oracle yields at least 3 accepted tokens per model call") {
    std::vector<int> prompt = {2, 3, 4, 5};
    Rng rng(6);
    std::vector<int> cont(41);
    for (auto& t : cont) t = 2 + rng.uniform_int(28);
    cont.back() = 1;  // EOS

    MockOracle oracle(prompt, cont, 32, 1.0, 7);
    OffsetConfig oc = oc_with(4, 4);
    oc.block_size = 64;
    DecodeOptions opt;
    opt.use_verifier = false;
    opt.max_len = 128;
    opt.seed = 9;
    opt.eos_token = 1;

    DecodeResult dr = decode(oracle, prompt, oc, opt);
    CHECK(dr.complete);
    CHECK(dr.tokens == cont);
    CHECK(static_cast<double>(dr.tokens.size()) / dr.model_calls >= 3.0);
}

TEST_CASE("decode terminates and makes progress under a noisy oracle") {
    std::vector<int> prompt = {2, 3};
    std::vector<int> cont(20, 9);
    cont.back() = 1;
    MockOracle oracle(prompt, cont, 16, 0.3, 8);
    OffsetConfig oc = oc_with(3, 2);
    oc.block_size = 6;
    DecodeOptions opt;
    opt.use_verifier = false;
    opt.max_len = 20;
    opt.seed = 11;

    DecodeResult dr = decode(oracle, prompt, oc, opt);
    CHECK(dr.iterations <= opt.max_stall * (opt.max_len + 2));
    int prev = 0;
    for (const auto& te : dr.trace) {
        CHECK(te.t_s >= prev);  // the block start never moves backwards
        prev = te.t_s;
    }
    CHECK(static_cast<int>(dr.tokens.size()) <= opt.max_len);
}

TEST_CASE("verifier mode selects a candidate and still terminates") {
    std::vector<int> prompt = {2, 3, 4};
    std::vector<int> cont = {8, 9, 10, 11, 12, 13, 1};
    MockOracle oracle(prompt, cont, 16, 0.9, 12);
    OffsetConfig oc = oc_with(3, 2);
    oc.block_size = 4;
    DecodeOptions opt;
    opt.use_verifier = true;
    opt.max_len = 16;
    opt.seed = 13;
    opt.node_budget = 8;
    opt.tree_top_k = 2;

    DecodeResult dr = decode(oracle, prompt, oc, opt);
    CHECK(dr.iterations >= 1);
    for (const auto& te : dr.trace) CHECK(te.candidates_considered >= 1);
    CHECK(static_cast<int>(dr.tokens.size()) <= opt.max_len);
}

TEST_CASE("min_refinements forces block residency before acceptance") {
    std::vector<int> prompt = {2, 3};
    std::vector<int> cont = {8, 9, 10, 11, 1};
    MockOracle oracle(prompt, cont, 16, 1.0, 14);
    OffsetConfig oc = oc_with(2, 2);
    oc.block_size = 3;
    DecodeOptions opt;
    opt.use_verifier = false;
    opt.max_len = 12;
    opt.min_refinements = 2;
    opt.seed = 15;

    DecodeResult dr = decode(oracle, prompt, oc, opt);
    // nothing can be accepted on the first iteration
    REQUIRE(!dr.trace.empty());
    CHECK(dr.trace[0].accepted_prefix_len == 0);
    bool accepted_later = false;
    for (const auto& te : dr.trace) accepted_later |= te.accepted_prefix_len > 0;
    CHECK(accepted_later);
}

TEST_CASE("acceptance sampling frequency matches c") {
    Rng rng(21);
    for (double c : {0.25, 0.5, 0.75}) {
        int accepted = 0;
        const int trials = 10000;
        for (int i = 0; i < trials; ++i) accepted += rng.uniform() < c ? 1 : 0;
        CHECK(std::abs(static_cast<double>(accepted) / trials - c) < 0.02);
    }
}

TEST_CASE("trace export writes one JSON line per iteration") {
    std::vector<int> prompt = {2, 3};
    std::vector<int> cont = {8, 9, 10, 1};
    MockOracle oracle(prompt, cont, 16, 1.0, 30);
    OffsetConfig oc = oc_with(2, 1);
    DecodeOptions opt;
    opt.use_verifier = false;
    opt.max_len = 8;
    DecodeResult dr = decode(oracle, prompt, oc, opt);

    const std::string path = "decode_trace_test.jsonl";
    write_trace_jsonl(path, dr.trace);
    std::ifstream in(path);
    REQUIRE(in.good());
    int lines = 0;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) ++lines;
    CHECK(lines == static_cast<int>(dr.trace.size()));
    in.close();
    std::remove(path.c_str());
}
