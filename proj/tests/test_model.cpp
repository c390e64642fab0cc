#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oalm/model.hpp"

using namespace oalm;

namespace {

std::vector<float> random_vec(int n, Rng& rng) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.gauss());
    return v;
}

double dot(const std::vector<float>& a, const std::vector<float>& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

double norm(const std::vector<float>& a) { return std::sqrt(dot(a, a)); }

// ---- independent double-precision reference: plain next-token transformer ----

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
    Mat m(t.shape[0], std::vector<double>(t.cols()));
    for (int i = 0; i < t.shape[0]; ++i)
        for (int j = 0; j < t.cols(); ++j) m[i][j] = t.rank() == 1 ? t.data[i] : t.at(i, j);
    return m;
}

std::vector<double> to_vec(const Tensor& t) {
    return std::vector<double>(t.data.begin(), t.data.end());
}

Mat ref_matmul(const Mat& a, const Mat& b) {
    Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (size_t i = 0; i < a.size(); ++i)
        for (size_t p = 0; p < b.size(); ++p)
            for (size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][p] * b[p][j];
    return c;
}

Mat ref_rmsnorm(const Mat& x, const std::vector<double>& gain, double eps) {
    Mat y = x;
    for (auto& row : y) {
        double ss = 0;
        for (double v : row) ss += v * v;
        const double s = 1.0 / std::sqrt(ss / row.size() + eps);
        for (size_t j = 0; j < row.size(); ++j) row[j] = row[j] * gain[j] * s;
    }
    return y;
}

void ref_rope(Mat& x, int head_dim, double base) {
    for (size_t r = 0; r < x.size(); ++r) {
        for (size_t h0 = 0; h0 + head_dim <= x[r].size(); h0 += head_dim) {
            for (int j = 0; j < head_dim / 2; ++j) {
                const double th = std::pow(base, -2.0 * j / head_dim);
                const double ang = static_cast<double>(r) * th;
                const double c = std::cos(ang), s = std::sin(ang);
                const double a = x[r][h0 + 2 * j], b = x[r][h0 + 2 * j + 1];
                x[r][h0 + 2 * j] = a * c - b * s;
                x[r][h0 + 2 * j + 1] = a * s + b * c;
            }
        }
    }
}

Mat reference_forward(const ModelConfig& cfg, Model& model, const std::vector<int>& tokens) {
    auto find = [&](const std::string& n) { return to_mat(model.find_parameter(n)->value); };
    auto findv = [&](const std::string& n) { return to_vec(model.find_parameter(n)->value); };

    const int n = static_cast<int>(tokens.size());
    const int hd = cfg.head_dim();
    Mat emb = find("embedding");
    Mat x(n);
    for (int i = 0; i < n; ++i) x[i] = emb[tokens[i]];

    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        Mat h = ref_rmsnorm(x, findv(p + "attn_norm"), cfg.norm_eps);
        Mat q = ref_matmul(h, find(p + "wq"));
        Mat k = ref_matmul(h, find(p + "wk"));
        Mat v = ref_matmul(h, find(p + "wv"));
        ref_rope(q, hd, cfg.rope_base);
        ref_rope(k, hd, cfg.rope_base);
        Mat ctx(n, std::vector<double>(cfg.d_model, 0.0));
        for (int head = 0; head < cfg.n_heads; ++head) {
            const int c0 = head * hd;
            for (int i = 0; i < n; ++i) {
                std::vector<double> scores(i + 1);
                double mx = -1e300;
                for (int j = 0; j <= i; ++j) {
                    double s = 0;
                    for (int t = 0; t < hd; ++t) s += q[i][c0 + t] * k[j][c0 + t];
                    scores[j] = s / std::sqrt(static_cast<double>(hd));
                    mx = std::max(mx, scores[j]);
                }
                double sum = 0;
                for (auto& s : scores) {
                    s = std::exp(s - mx);
                    sum += s;
                }
                for (int j = 0; j <= i; ++j)
                    for (int t = 0; t < hd; ++t) ctx[i][c0 + t] += scores[j] / sum * v[j][c0 + t];
            }
        }
        Mat attn = ref_matmul(ctx, find(p + "wo"));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < cfg.d_model; ++j) x[i][j] += attn[i][j];

        Mat h2 = ref_rmsnorm(x, findv(p + "ffn_norm"), cfg.norm_eps);
        Mat gate = ref_matmul(h2, find(p + "w_gate"));
        Mat up = ref_matmul(h2, find(p + "w_up"));
        for (size_t i = 0; i < gate.size(); ++i)
            for (size_t j = 0; j < gate[0].size(); ++j) {
                const double g = gate[i][j];
                gate[i][j] = g / (1.0 + std::exp(-g)) * up[i][j];
            }
        Mat ffn = ref_matmul(gate, find(p + "w_down"));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < cfg.d_model; ++j) x[i][j] += ffn[i][j];
    }
    Mat fin = ref_rmsnorm(x, findv("final_norm"), cfg.norm_eps);
    Mat logits(n, std::vector<double>(cfg.vocab_size, 0.0));
    for (int i = 0; i < n; ++i)
        for (int v = 0; v < cfg.vocab_size; ++v)
            for (int j = 0; j < cfg.d_model; ++j) logits[i][v] += fin[i][j] * emb[v][j];
    for (auto& row : logits) {
        double mx = row[0];
        for (double v : row) mx = std::max(mx, v);
        double sum = 0;
        for (double v : row) sum += std::exp(v - mx);
        const double lse = mx + std::log(sum);
        for (auto& v : row) v -= lse;
    }
    return logits;
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab_size = 16;
    cfg.d_model = 24;
    cfg.n_layers = 2;
    cfg.n_heads = 3;
    cfg.d_ff = 32;
    cfg.max_seq_len = 64;
    return cfg;
}

std::vector<int> random_tokens(int n, int vocab, Rng& rng) {
    std::vector<int> t(n);
    for (auto& x : t) x = rng.uniform_int(vocab);
    return t;
}

}  // namespace

TEST_CASE("rope at position zero is the identity") {
    Rng rng(1);
    auto q = random_vec(8, rng);
    CHECK(rope_encode(q, 0) == q);
}

TEST_CASE("rope shift invariance of inner products") {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        auto q = random_vec(16, rng);
        auto k = random_vec(16, rng);
        const int m = rng.uniform_int(512), n = rng.uniform_int(512), s = rng.uniform_int(256);
        const double a = dot(rope_encode(q, m), rope_encode(k, n));
        const double b = dot(rope_encode(q, m + s), rope_encode(k, n + s));
        CHECK(std::abs(a - b) < 1e-4);
    }
}

TEST_CASE("rope preserves the norm") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        auto q = random_vec(12, rng);
        CHECK(std::abs(norm(rope_encode(q, rng.uniform_int(1024))) - norm(q)) < 1e-5);
    }
}

TEST_CASE("rope rejects odd dimensions") {
    std::vector<float> q(5, 1.0f);
    CHECK_THROWS_AS(rope_encode(q, 3), ConfigError);
}

TEST_CASE("target-aware query: offset 1 under target_minus_one is plain rope") {
    Rng rng(4);
    auto q = random_vec(8, rng);
    auto tq = target_aware_query(q, 5, 1, MuConvention::target_minus_one);
    REQUIRE(tq.has_value());
    CHECK(*tq == rope_encode(q, 5));  // bit-exact
}

TEST_CASE("target-aware query composes with a further rotation") {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        auto q = random_vec(8, rng);
        const int m = 1 + rng.uniform_int(100);
        const int d = rng.uniform_int(9) - 4;
        for (MuConvention mu : {MuConvention::target, MuConvention::target_minus_one}) {
            const int delta = d - (mu == MuConvention::target_minus_one ? 1 : 0);
            auto direct = target_aware_query(q, m, d, mu);
            if (!direct.has_value()) continue;
            // rope is additive in the angle: rotating rope(q, m) by a further
            // delta >= 0 must land on rope(q, m + delta)
            auto composed = delta >= 0 ? rope_encode(rope_encode(q, m), delta)
                                       : rope_encode(q, m + delta);
            for (size_t i = 0; i < q.size(); ++i)
                CHECK(std::abs((*direct)[i] - composed[i]) < 1e-5);
        }
    }
}

TEST_CASE("target-aware query depends only on the relative distance") {
    Rng rng(6);
    for (int trial = 0; trial < 200; ++trial) {
        auto q = random_vec(8, rng);
        auto k = random_vec(8, rng);
        const int m = 2 + rng.uniform_int(200);
        const int n = rng.uniform_int(200);
        const int d = rng.uniform_int(7) - 3;
        const int s = rng.uniform_int(100);
        auto a = target_aware_query(q, m, d, MuConvention::target_minus_one);
        auto b = target_aware_query(q, m + s, d, MuConvention::target_minus_one);
        REQUIRE(a.has_value());
        REQUIRE(b.has_value());
        const double da = dot(*a, rope_encode(k, n));
        const double db = dot(*b, rope_encode(k, n + s));
        CHECK(std::abs(da - db) < 1e-4);
    }
}

TEST_CASE("target-aware query reports unavailable when mu is negative") {
    std::vector<float> q(4, 1.0f);
    CHECK_FALSE(target_aware_query(q, 0, 0, MuConvention::target_minus_one).has_value());
    CHECK_FALSE(target_aware_query(q, 0, -2, MuConvention::target).has_value());
    CHECK(target_aware_query(q, 0, 0, MuConvention::target).has_value());
}

TEST_CASE("forward grid: next-token column matches the f64 reference transformer") {
    ModelConfig cfg = tiny_config();
    Model model(cfg, 99);
    Rng rng(7);
    auto tokens = random_tokens(12, cfg.vocab_size, rng);

    PredictionGrid grid = model.forward_grid(tokens, {1}, static_cast<int>(tokens.size()) + 1);
    Mat ref = reference_forward(cfg, model, tokens);

    double max_err = 0;
    for (int i = 0; i < 12; ++i) {
        REQUIRE(grid.available(i, 1));
        const auto& lp = grid.at(i, 1);
        for (int v = 0; v < cfg.vocab_size; ++v)
            max_err = std::max(max_err, std::abs(lp[v] - ref[i][v]));
    }
    CHECK(max_err < 2e-3);
}

TEST_CASE("forward grid entries are normalized log distributions") {
    ModelConfig cfg = tiny_config();
    Model model(cfg, 100);
    Rng rng(8);
    auto tokens = random_tokens(10, cfg.vocab_size, rng);
    OffsetConfig oc;
    oc.k_fwd = 3;
    oc.k_bwd = 4;
    PredictionGrid grid = model.forward_grid(tokens, oc.offsets(), 10);
    int checked = 0;
    for (int i = 0; i < 10; ++i) {
        for (int d : grid.offsets) {
            if (!grid.available(i, d)) continue;
            double sum = 0;
            for (float lp : grid.at(i, d)) sum += std::exp(static_cast<double>(lp));
            CHECK(std::abs(std::log(sum)) < 1e-4);
            ++checked;
        }
    }
    CHECK(checked > 30);
}

TEST_CASE("forward grid availability follows mu and the target bound") {
    ModelConfig cfg = tiny_config();
    Model model(cfg, 5);
    std::vector<int> tokens = {1, 2, 3, 4, 5};
    PredictionGrid g1 = model.forward_grid(tokens, {1, 0, -1, 2}, 5);
    // d=1 under target_minus_one: mu = i, every position predicts i+1 < 5
    CHECK(g1.available(0, 1));
    CHECK_FALSE(g1.available(4, 1));  // target 5 out of bound
    // d=0: mu = i-1, so position 0 is unavailable
    CHECK_FALSE(g1.available(0, 0));
    CHECK(g1.available(1, 0));
    // d=-1: target below zero at i=0, mu<0 at i=1
    CHECK_FALSE(g1.available(0, -1));
    CHECK_FALSE(g1.available(1, -1));
    CHECK(g1.available(2, -1));
    // extended bound exposes the frontier
    PredictionGrid g2 = model.forward_grid(tokens, {1, 2}, 7);
    CHECK(g2.available(4, 1));
    CHECK(g2.available(4, 2));
    CHECK(g2.col_of(3) == -1);  // offset not requested
}

TEST_CASE("causality: future tokens never change earlier grid entries") {
    ModelConfig cfg = tiny_config();
    Model model(cfg, 11);
    Rng rng(12);
    OffsetConfig oc;
    oc.k_fwd = 3;
    oc.k_bwd = 3;
    for (int trial = 0; trial < 5; ++trial) {
        auto tokens = random_tokens(10, cfg.vocab_size, rng);
        const int j = 4 + rng.uniform_int(6);  // perturbed position
        auto mutated = tokens;
        mutated[j] = (mutated[j] + 1 + rng.uniform_int(cfg.vocab_size - 1)) % cfg.vocab_size;
        PredictionGrid a = model.forward_grid(tokens, oc.offsets(), 10);
        PredictionGrid b = model.forward_grid(mutated, oc.offsets(), 10);
        for (int i = 0; i < j; ++i) {
            for (int d : a.offsets) {
                CHECK(a.available(i, d) == b.available(i, d));
                if (a.available(i, d)) CHECK(a.at(i, d) == b.at(i, d));  // bit-exact
            }
        }
    }
}

TEST_CASE("offset-subset consistency") {
    ModelConfig cfg = tiny_config();
    Model model(cfg, 21);
    Rng rng(22);
    auto tokens = random_tokens(9, cfg.vocab_size, rng);
    PredictionGrid small = model.forward_grid(tokens, {1, 0}, 9);
    PredictionGrid big = model.forward_grid(tokens, {1, 2, 0, -1, -2}, 9);
    for (int i = 0; i < 9; ++i) {
        for (int d : {1, 0}) {
            CHECK(small.available(i, d) == big.available(i, d));
            if (small.available(i, d)) CHECK(small.at(i, d) == big.at(i, d));
        }
    }
}

TEST_CASE("empty input is rejected") {
    Model model(tiny_config(), 1);
    CHECK_THROWS_AS(model.forward_grid({}, {1}, 1), UsageError);
}

TEST_CASE("param count matches the closed form and ignores offsets") {
    ModelConfig cfg;
    cfg.vocab_size = 64;
    cfg.d_model = 128;
    cfg.n_layers = 4;
    cfg.n_heads = 4;
    cfg.d_ff = 256;
    Model model(cfg, 3);

    const int64_t v = cfg.vocab_size, d = cfg.d_model, l = cfg.n_layers, ff = cfg.d_ff;
    const int64_t per_layer = 4 * d * d + 3 * d * ff + 2 * d;  // attn + ffn + two norm gains
    const int64_t expected = v * d + l * per_layer + d;        // tied unembedding adds nothing
    CHECK(model.param_count() == expected);

    // the dependency window never touches the parameter set
    Model again(cfg, 3);
    (void)model.forward_grid({1, 2, 3}, {1}, 3);
    (void)again.forward_grid({1, 2, 3}, OffsetConfig{4, 8}.offsets(), 3);
    CHECK(model.param_count() == again.param_count());
}

TEST_CASE("param count is linear in layer count") {
    ModelConfig a = tiny_config();
    ModelConfig b = a;
    b.n_layers = 2 * a.n_layers;
    const int64_t block = 4 * a.d_model * a.d_model + 3 * a.d_model * a.d_ff + 2 * a.d_model;
    CHECK(Model(b, 1).param_count() - Model(a, 1).param_count() == a.n_layers * block);
}

TEST_CASE("model config validation") {
    ModelConfig bad = tiny_config();
    bad.n_heads = 5;  // 24 % 5 != 0
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    ModelConfig odd = tiny_config();
    odd.d_model = 12;
    odd.n_heads = 4;  // head dim 3, odd
    CHECK_THROWS_AS(odd.validate(), ConfigError);
}

TEST_CASE("offset config defaults and validation") {
    OffsetConfig oc;
    CHECK(oc.lambda_of(1) == 1.0);
    CHECK(oc.lambda_of(0) == 1.0);
    CHECK(oc.lambda_of(-3) == 1.0);
    CHECK(oc.lambda_of(2) == doctest::Approx(0.7));
    CHECK(oc.lambda_of(4) == doctest::Approx(0.343));
    CHECK(oc.gamma_at(0) == 1.0);
    CHECK(oc.gamma_at(3) == doctest::Approx(1.3));
    CHECK(oc.gamma_at(9) == doctest::Approx(1.3));  // repeats past the list
    CHECK(oc.offsets() == std::vector<int>{1, 2, 3, 4, 0, -1, -2, -3, -4, -5, -6, -7});

    OffsetConfig bad;
    bad.k_fwd = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    OffsetConfig bad2;
    bad2.lambda[1] = 0.5;  // next-token must stay at weight 1
    CHECK_THROWS_AS(bad2.validate(), ConfigError);
    OffsetConfig bad3;
    bad3.gamma = {0.5};
    CHECK_THROWS_AS(bad3.validate(), ConfigError);
}
