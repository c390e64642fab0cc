// Command-line front end: train / decode / bench / analyze subcommands.
// Every flag has a config-file equivalent (JSON, see --config); flags win
// on conflict. Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "oalm/bench.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace oalm;

namespace {

struct RunConfig {
    uint64_t seed = 7;
    std::string config_path;
    std::string out;

    ModelConfig model;
    OffsetConfig offsets;

    // train
    std::string task = "copy";
    int samples = 768;
    int len_min = 4, len_max = 8;
    int epochs = 3;
    int epochs_2b = 12;
    int sft_epochs = 6;
    int batch_size = 32;
    double lr1 = 1e-4, lr2 = 1e-4;
    double sft_lr = 1e-3;
    CorruptionSpec corruption;
    std::string data_in, data_out;

    // decode / bench / analyze
    std::string ckpt;
    std::string prompt_text;
    int max_len = 128;
    int min_refinements = 0;
    int tree_top_k = 4;
    int node_budget = 64;
    bool no_verifier = false;
    bool no_multi_forward = false;
    std::string trace_out;
    std::string variants = "nt,ours,ours-nv,ours-nmf";
    bool mock = false;
    double mock_accuracy = 1.0;
};

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void apply_config_file(RunConfig& rc) {
    if (rc.config_path.empty()) return;
    std::ifstream in(rc.config_path);
    if (!in) throw IoError("cannot open config file: " + rc.config_path);
    json j = json::parse(in);
    maybe(j, "seed", rc.seed);
    maybe(j, "out", rc.out);
    if (j.contains("model")) {
        const json& m = j["model"];
        maybe(m, "vocab_size", rc.model.vocab_size);
        maybe(m, "d_model", rc.model.d_model);
        maybe(m, "n_layers", rc.model.n_layers);
        maybe(m, "n_heads", rc.model.n_heads);
        maybe(m, "d_ff", rc.model.d_ff);
        maybe(m, "max_seq_len", rc.model.max_seq_len);
        maybe(m, "rope_base", rc.model.rope_base);
    }
    if (j.contains("offsets")) {
        const json& o = j["offsets"];
        maybe(o, "k_fwd", rc.offsets.k_fwd);
        maybe(o, "k_bwd", rc.offsets.k_bwd);
        maybe(o, "lambda_decay", rc.offsets.lambda_decay);
        maybe(o, "gamma", rc.offsets.gamma);
        maybe(o, "epsilon", rc.offsets.epsilon);
        maybe(o, "block_size", rc.offsets.block_size);
        if (o.contains("mu_convention")) {
            const std::string mu = o["mu_convention"].get<std::string>();
            if (mu == "target") {
                rc.offsets.mu_convention = MuConvention::target;
            } else if (mu == "target_minus_one") {
                rc.offsets.mu_convention = MuConvention::target_minus_one;
            } else {
                throw UsageError("config: unknown mu_convention " + mu);
            }
        }
    }
    if (j.contains("train")) {
        const json& t = j["train"];
        maybe(t, "task", rc.task);
        maybe(t, "samples", rc.samples);
        maybe(t, "len_min", rc.len_min);
        maybe(t, "len_max", rc.len_max);
        maybe(t, "epochs", rc.epochs);
        maybe(t, "epochs_2b", rc.epochs_2b);
        maybe(t, "sft_epochs", rc.sft_epochs);
        maybe(t, "sft_lr", rc.sft_lr);
        maybe(t, "batch_size", rc.batch_size);
        maybe(t, "lr1", rc.lr1);
        maybe(t, "lr2", rc.lr2);
        maybe(t, "granularity", rc.corruption.granularity);
        maybe(t, "ratio", rc.corruption.ratio);
        maybe(t, "strategy_mix", rc.corruption.strategy_mix);
    }
    if (j.contains("decode")) {
        const json& d = j["decode"];
        maybe(d, "max_len", rc.max_len);
        maybe(d, "min_refinements", rc.min_refinements);
        maybe(d, "tree_top_k", rc.tree_top_k);
        maybe(d, "node_budget", rc.node_budget);
        maybe(d, "no_verifier", rc.no_verifier);
        maybe(d, "no_multi_forward", rc.no_multi_forward);
    }
    if (j.contains("bench")) {
        const json& b = j["bench"];
        maybe(b, "variants", rc.variants);
        maybe(b, "samples", rc.samples);
        maybe(b, "mock", rc.mock);
        maybe(b, "mock_accuracy", rc.mock_accuracy);
    }
}

DecodeOptions decode_options(const RunConfig& rc) {
    DecodeOptions opt;
    opt.use_verifier = !rc.no_verifier;
    opt.use_multi_forward = !rc.no_multi_forward;
    opt.max_len = rc.max_len;
    opt.min_refinements = rc.min_refinements;
    opt.tree_top_k = rc.tree_top_k;
    opt.node_budget = rc.node_budget;
    opt.seed = rc.seed;
    opt.eos_token = Tokenizer::eos();
    return opt;
}

int cmd_train(const RunConfig& rc) {
    require(!rc.out.empty(), "train: --out checkpoint directory is required");
    std::vector<Sample> data;
    if (!rc.data_in.empty()) {
        data = load_samples_jsonl(rc.data_in);
    } else {
        data = gen_task(parse_task(rc.task), rc.seed, rc.samples, {rc.len_min, rc.len_max});
    }
    if (!rc.data_out.empty()) save_samples_jsonl(rc.data_out, data);

    Model model(rc.model, rc.seed);
    TrainPlan plan;
    plan.sft = {StageId::sft, rc.sft_epochs, rc.sft_lr, rc.batch_size, rc.corruption};
    plan.stage1 = {StageId::stage1, rc.epochs, rc.lr1, rc.batch_size, rc.corruption};
    plan.stage2a = {StageId::stage2a, rc.epochs, rc.lr2, rc.batch_size, rc.corruption};
    plan.stage2b = {StageId::stage2b, rc.epochs_2b, rc.lr2, rc.batch_size, rc.corruption};

    fs::create_directories(rc.out);
    std::ofstream metrics(fs::path(rc.out) / "metrics.jsonl");
    auto records = train_all_stages(model, rc.offsets, plan, data, rc.seed, &metrics);

    CheckpointMeta meta;
    meta.stage = "2b";
    meta.step = records.empty() ? 0 : records.back().step;
    meta.seed = rc.seed;
    save_checkpoint(model, rc.offsets, rc.out, meta);
    std::cout << "trained " << records.size() << " steps; final loss "
              << (records.empty() ? 0.0 : records.back().loss) << "\n"
              << "checkpoint written to " << rc.out << "\n";
    return 0;
}

int cmd_decode(const RunConfig& rc) {
    require(!rc.ckpt.empty(), "decode: --ckpt is required");
    require(!rc.prompt_text.empty(), "decode: --prompt is required");
    LoadedCheckpoint ck = load_checkpoint(rc.ckpt);
    if (!ck.warning.empty()) std::cerr << "warning: " << ck.warning << "\n";
    OffsetConfig oc = ck.offsets;

    std::vector<int> prompt;
    prompt.push_back(Tokenizer::bos());
    for (int id : Tokenizer::encode(rc.prompt_text)) prompt.push_back(id);
    prompt.push_back(Tokenizer::id_of('='));

    ModelGridSource src(ck.model, oc.mu_convention);
    DecodeResult dr = decode(src, prompt, oc, decode_options(rc));
    std::cout << Tokenizer::decode(dr.tokens) << "\n";
    std::cerr << (dr.complete ? "complete" : "incomplete (max_len reached)") << ", "
              << dr.model_calls << " model calls, " << dr.iterations << " iterations\n";
    if (!rc.trace_out.empty()) {
        write_trace_jsonl(rc.trace_out, dr.trace);
        std::cerr << "trace written to " << rc.trace_out << "\n";
    }
    return 0;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

int cmd_bench(const RunConfig& rc) {
    const auto variant_list = split_csv(rc.variants);
    std::vector<Sample> eval =
        gen_task(parse_task(rc.task), hash_combine(rc.seed, 0xEE), rc.samples,
                 {rc.len_min, rc.len_max});
    DecodeOptions opts = decode_options(rc);

    BenchReport report;
    if (rc.mock) {
        ModelConfig cfg = rc.model;
        SourceFactory factory = [&rc](const Sample& s, int index) -> std::unique_ptr<GridSource> {
            return std::make_unique<MockOracle>(s.prompt, s.target, Tokenizer::kVocab,
                                                rc.mock_accuracy,
                                                hash_combine(rc.seed, 0xAA00 + index));
        };
        report = run_benchmark(factory, cfg, rc.offsets, eval, variant_list, rc.seed, opts);
    } else {
        require(!rc.ckpt.empty(), "bench: --ckpt is required (or pass --mock)");
        LoadedCheckpoint ck = load_checkpoint(rc.ckpt);
        if (!ck.warning.empty()) std::cerr << "warning: " << ck.warning << "\n";
        report = run_benchmark(ck.model, ck.offsets, eval, variant_list, rc.seed, opts);
    }
    const std::string text = bench_report_json(report);
    if (!rc.out.empty()) {
        std::ofstream out(rc.out);
        if (!out) throw IoError("cannot write report: " + rc.out);
        out << text << "\n";
    }
    std::cout << text << "\n";
    return 0;
}

int cmd_analyze(const RunConfig& rc) {
    require(!rc.ckpt.empty(), "analyze: --ckpt is required");
    require(!rc.out.empty(), "analyze: --out CSV path is required");
    LoadedCheckpoint ck = load_checkpoint(rc.ckpt);
    std::vector<Sample> eval =
        gen_task(parse_task(rc.task), hash_combine(rc.seed, 0xA11), rc.samples,
                 {rc.len_min, rc.len_max});
    auto table = analyze_offsets(ck.model, ck.offsets, eval, rc.corruption, rc.seed, rc.out);
    std::cout << "offset,loss,top1,top8\n";
    for (const auto& m : table)
        std::cout << m.offset << "," << m.mean_loss << "," << m.topk[0] << "," << m.topk[7]
                  << "\n";
    std::cerr << "full table written to " << rc.out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    RunConfig rc;
    CLI::App app{"order-agnostic multi-offset language model workbench"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand

    app.add_option("--seed", rc.seed, "global random seed");
    app.add_option("--config", rc.config_path, "JSON config file (flags win on conflict)");

    auto add_model_flags = [&](CLI::App* cmd) {
        cmd->add_option("--vocab", rc.model.vocab_size, "vocabulary size");
        cmd->add_option("--d-model", rc.model.d_model, "model width");
        cmd->add_option("--layers", rc.model.n_layers, "transformer layers");
        cmd->add_option("--heads", rc.model.n_heads, "attention heads");
        cmd->add_option("--d-ff", rc.model.d_ff, "feed-forward width");
        cmd->add_option("--max-seq", rc.model.max_seq_len, "max sequence length");
    };
    auto add_offset_flags = [&](CLI::App* cmd) {
        cmd->add_option("--k-fwd", rc.offsets.k_fwd, "forward window size");
        cmd->add_option("--k-bwd", rc.offsets.k_bwd, "backward window size");
        cmd->add_option("--epsilon", rc.offsets.epsilon, "acceptance threshold");
        cmd->add_option("--block-size", rc.offsets.block_size, "decoding block size");
        cmd->add_option("--lambda-decay", rc.offsets.lambda_decay, "forward weight decay base");
    };

    CLI::App* train = app.add_subcommand("train", "two-stage training on a synthetic task");
    train->fallthrough();
    train->add_option("--task", rc.task, "copy | reverse | modchain");
    train->add_option("--out", rc.out, "checkpoint output directory")->required();
    train->add_option("--samples", rc.samples, "training samples to generate");
    train->add_option("--len-min", rc.len_min, "minimum content length / operand count");
    train->add_option("--len-max", rc.len_max, "maximum content length / operand count");
    train->add_option("--epochs", rc.epochs, "epochs per stage");
    train->add_option("--epochs-2b", rc.epochs_2b, "epochs for the final stage");
    train->add_option("--sft-epochs", rc.sft_epochs,
                      "epochs of plain next-token base training (0 skips)");
    train->add_option("--sft-lr", rc.sft_lr, "base-stage learning rate");
    train->add_option("--batch-size", rc.batch_size, "batch size");
    train->add_option("--lr1", rc.lr1, "stage 1 learning rate");
    train->add_option("--lr2", rc.lr2, "stage 2a/2b learning rate");
    train->add_option("--granularity", rc.corruption.granularity, "corruption patch size");
    train->add_option("--ratio", rc.corruption.ratio, "corruption ratio");
    train->add_option("--strategy-mix", rc.corruption.strategy_mix,
                      "P(random patch) vs repeat-first");
    train->add_option("--data-in", rc.data_in, "load dataset from JSONL instead of generating");
    train->add_option("--data-out", rc.data_out, "dump the dataset as JSONL");
    add_model_flags(train);
    add_offset_flags(train);

    CLI::App* dec = app.add_subcommand("decode", "decode a prompt with a trained checkpoint");
    dec->fallthrough();
    dec->add_option("--ckpt", rc.ckpt, "checkpoint directory")->required();
    dec->add_option("--prompt", rc.prompt_text, "prompt text (BOS/'=' added automatically)")
        ->required();
    dec->add_option("--max-len", rc.max_len, "output token budget");
    dec->add_option("--min-refinements", rc.min_refinements, "block residency floor");
    dec->add_option("--tree-top-k", rc.tree_top_k, "top-k per block position");
    dec->add_option("--node-budget", rc.node_budget, "candidate tree node budget");
    dec->add_flag("--no-verifier", rc.no_verifier, "skip the verification stage");
    dec->add_flag("--no-multi-forward", rc.no_multi_forward,
                  "cap the block at the next-token frontier");
    dec->add_option("--trace-out", rc.trace_out, "write per-iteration trace JSONL");

    CLI::App* bench = app.add_subcommand("bench", "accuracy / speed comparison across variants");
    bench->fallthrough();
    bench->add_option("--ckpt", rc.ckpt, "checkpoint directory");
    bench->add_option("--task", rc.task, "copy | reverse | modchain");
    bench->add_option("--samples", rc.samples, "evaluation samples")->default_val(50);
    bench->add_option("--len-min", rc.len_min, "minimum content length");
    bench->add_option("--len-max", rc.len_max, "maximum content length");
    bench->add_option("--variants", rc.variants, "comma list: nt,ours,ours-nv,ours-nmf");
    bench->add_option("--out", rc.out, "write the report JSON here");
    bench->add_option("--max-len", rc.max_len, "output token budget");
    bench->add_option("--min-refinements", rc.min_refinements, "block residency floor");
    bench->add_option("--tree-top-k", rc.tree_top_k, "top-k per block position");
    bench->add_option("--node-budget", rc.node_budget, "candidate tree node budget");
    bench->add_flag("--mock", rc.mock, "use the mock oracle instead of a checkpoint");
    bench->add_option("--mock-accuracy", rc.mock_accuracy, "oracle per-offset accuracy");
    add_offset_flags(bench);
    add_model_flags(bench);

    CLI::App* analyze = app.add_subcommand("analyze", "per-offset loss/accuracy table");
    analyze->fallthrough();
    analyze->add_option("--ckpt", rc.ckpt, "checkpoint directory")->required();
    analyze->add_option("--task", rc.task, "copy | reverse | modchain");
    analyze->add_option("--samples", rc.samples, "evaluation samples")->default_val(64);
    analyze->add_option("--len-min", rc.len_min, "minimum content length");
    analyze->add_option("--len-max", rc.len_max, "maximum content length");
    analyze->add_option("--granularity", rc.corruption.granularity, "corruption patch size");
    analyze->add_option("--ratio", rc.corruption.ratio, "corruption ratio");
    analyze->add_option("--out", rc.out, "CSV output path")->required();

    // config file must be applied before flag parsing so flags override it
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::string(argv[i]) == "--config") {
            rc.config_path = argv[i + 1];
            break;
        }
    }
    try {
        apply_config_file(rc);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (train->parsed()) return cmd_train(rc);
        if (dec->parsed()) return cmd_decode(rc);
        if (bench->parsed()) return cmd_bench(rc);
        if (analyze->parsed()) return cmd_analyze(rc);
        std::cerr << "error: no subcommand\n";
        return 1;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
