#include <benchmark/benchmark.h>

#include "oalm/bench.hpp"

using namespace oalm;

namespace {

ModelConfig bench_config() {
    ModelConfig cfg;
    cfg.vocab_size = 64;
    cfg.d_model = 128;
    cfg.n_layers = 4;
    cfg.n_heads = 4;
    cfg.d_ff = 256;
    cfg.max_seq_len = 128;
    return cfg;
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    Rng rng(1);
    Tensor a = Tensor::randn({n, n}, rng, 1.0f);
    Tensor b = Tensor::randn({n, n}, rng, 1.0f);
    Tensor c({n, n});
    for (auto _ : state) {
        matmul_into(a.data.data(), b.data.data(), c.data.data(), n, n, n);
        benchmark::DoNotOptimize(c.data.data());
    }
    state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

static void BM_ForwardGrid(benchmark::State& state) {
    const int n_offsets = static_cast<int>(state.range(0));
    ModelConfig cfg = bench_config();
    Model model(cfg, 7);
    Rng rng(2);
    std::vector<int> tokens(24);
    for (auto& t : tokens) t = rng.uniform_int(cfg.vocab_size);
    OffsetConfig oc;
    oc.k_fwd = std::min(4, n_offsets);
    oc.k_bwd = n_offsets - oc.k_fwd;
    std::vector<int> offsets = oc.offsets();
    offsets.resize(n_offsets);
    for (auto _ : state) {
        PredictionGrid grid = model.forward_grid(tokens, offsets, 24);
        benchmark::DoNotOptimize(grid.seq_len);
    }
}
BENCHMARK(BM_ForwardGrid)->Arg(1)->Arg(4)->Arg(12);

static void BM_TrainStep(benchmark::State& state) {
    ModelConfig cfg = bench_config();
    Model model(cfg, 8);
    auto samples = gen_task(TaskId::copy, 3, 32, {6, 10});
    OffsetConfig oc;
    oc.k_fwd = 4;
    oc.k_bwd = 8;
    CorruptionSpec spec;
    spec.granularity = 2;
    Rng rng(4);
    Batch batch = make_training_batch(samples, spec, rng);
    AdamW opt(1e-4);
    auto params = model.parameters();
    for (auto _ : state) {
        Graph g;
        TapedLoss tl = batch_loss(g, model, batch, oc);
        for (Parameter* p : params) p->zero_grad();
        g.backward(tl.total);
        opt.step(params);
    }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

static void BM_EnsembleAndTree(benchmark::State& state) {
    Rng rng(5);
    const int vocab = 64;
    std::vector<std::vector<float>> rows(8);
    for (auto& r : rows) {
        r.resize(vocab);
        double sum = 0;
        for (auto& v : r) {
            v = static_cast<float>(rng.gauss());
            sum += std::exp(v);
        }
        const float lse = std::log(static_cast<float>(sum));
        for (auto& v : r) v -= lse;
    }
    std::vector<const std::vector<float>*> ptrs;
    for (auto& r : rows) ptrs.push_back(&r);
    std::vector<double> w(rows.size(), 1.0 / rows.size());
    OffsetConfig oc;
    for (auto _ : state) {
        auto pi = ensemble_distribution(ptrs, w);
        auto topk = top_k_tokens(pi, 4);
        std::vector<std::vector<std::pair<int, double>>> per_pos(8, topk);
        std::vector<double> gammas(8);
        for (int j = 0; j < 8; ++j) gammas[j] = oc.gamma_at(j);
        CandidateTree tree = build_candidate_tree(per_pos, gammas, 64);
        benchmark::DoNotOptimize(tree.nodes.size());
    }
}
BENCHMARK(BM_EnsembleAndTree);

static void BM_DecodeOracleBlock(benchmark::State& state) {
    std::vector<int> prompt = {2, 3, 4, 5};
    Rng rng(6);
    std::vector<int> cont(40);
    for (auto& t : cont) t = 4 + rng.uniform_int(50);
    cont.back() = 1;
    OffsetConfig oc;
    oc.k_fwd = 4;
    oc.k_bwd = 4;
    oc.block_size = 64;
    DecodeOptions opt;
    opt.use_verifier = false;
    opt.max_len = 64;
    uint64_t salt = 0;
    for (auto _ : state) {
        MockOracle oracle(prompt, cont, 64, 1.0, ++salt);
        DecodeResult dr = decode(oracle, prompt, oc, opt);
        benchmark::DoNotOptimize(dr.tokens.size());
    }
}
BENCHMARK(BM_DecodeOracleBlock);

BENCHMARK_MAIN();
