#include "oalm/bench.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace oalm {

using nlohmann::json;

double flops_estimate_n(const ModelConfig& cfg, int n_offsets, int seq_len) {
    require(n_offsets >= 1 && seq_len >= 1, "flops_estimate: bad arguments");
    const double t = seq_len;
    const double d = cfg.d_model;
    const double v = cfg.vocab_size;
    const double ff = cfg.d_ff;

    const double proj_qkvo = 8.0 * d * d * t;       // q,k,v,o projections
    const double attn_sv = 4.0 * t * t * d;         // scores and value application
    const double ffn = 6.0 * d * ff * t;            // SwiGLU gate/up/down
    const double layer = proj_qkvo + attn_sv + ffn;

    const double shared = (cfg.n_layers - 1) * layer + 4.0 * d * d * t;  // final-layer K/V
    const double per_offset = 2.0 * d * d * t      // query projection
                              + attn_sv            // per-offset attention application
                              + 2.0 * d * d * t    // output projection
                              + ffn                // final-layer feed-forward
                              + 2.0 * d * v * t;   // unembedding
    return shared + n_offsets * per_offset;
}

double flops_estimate(const ModelConfig& cfg, const OffsetConfig& oc, int seq_len) {
    return flops_estimate_n(cfg, static_cast<int>(oc.offsets().size()), seq_len);
}

std::vector<std::string> default_variants() { return {"nt", "ours", "ours-nv", "ours-nmf"}; }

namespace {

struct VariantPlan {
    OffsetConfig oc;
    DecodeOptions opt;
};

VariantPlan plan_variant(const std::string& name, const OffsetConfig& base,
                         const DecodeOptions& base_opts) {
    VariantPlan p{base, base_opts};
    if (name == "nt") {
        p.oc = OffsetConfig::next_token_only();
        p.oc.epsilon = base.epsilon;
        p.oc.mu_convention = base.mu_convention;
        p.opt.use_verifier = false;
        p.opt.use_multi_forward = true;
        p.opt.min_refinements = 0;
    } else if (name == "ours") {
        p.opt.use_verifier = true;
        p.opt.use_multi_forward = true;
    } else if (name == "ours-nv") {
        // without the verifier, one refinement round stands in for it
        p.opt.use_verifier = false;
        p.opt.use_multi_forward = true;
        p.opt.min_refinements = std::max(1, base_opts.min_refinements);
    } else if (name == "ours-nmf") {
        p.opt.use_verifier = true;
        p.opt.use_multi_forward = false;
        p.opt.min_refinements = std::max(1, base_opts.min_refinements);
    } else {
        throw UsageError("unknown benchmark variant: " + name);
    }
    return p;
}

bool sample_correct(const Sample& s, const std::vector<int>& generated) {
    if (s.task == "modchain") {
        const std::string want = extract_answer_span(Tokenizer::decode(s.target));
        const std::string got = extract_answer_span(Tokenizer::decode(generated));
        return !want.empty() && want == got;
    }
    return generated == s.target;
}

}  // namespace

BenchReport run_benchmark(const SourceFactory& make_source, const ModelConfig& cfg,
                          const OffsetConfig& oc, const std::vector<Sample>& eval,
                          const std::vector<std::string>& variants, uint64_t seed,
                          const DecodeOptions& base_opts) {
    require(!eval.empty(), "run_benchmark: empty evaluation set");
    require(!variants.empty(), "run_benchmark: no variants requested");
    oc.validate();

    BenchReport report;
    report.task = eval.front().task;
    report.seed = seed;
    report.flops_next_token = flops_estimate_n(cfg, 1, cfg.max_seq_len);
    report.flops_all_offsets = flops_estimate(cfg, oc, cfg.max_seq_len);
    report.flops_ratio = report.flops_all_offsets / report.flops_next_token;

    for (const std::string& name : variants) {
        VariantPlan plan = plan_variant(name, oc, base_opts);
        VariantResult vr;
        vr.name = name;
        vr.samples = static_cast<int>(eval.size());
        int correct = 0;
        double seconds = 0.0;
        for (size_t i = 0; i < eval.size(); ++i) {
            const Sample& s = eval[i];
            auto src = make_source(s, static_cast<int>(i));
            DecodeOptions opt = plan.opt;
            opt.seed = hash_combine(seed, static_cast<uint64_t>(i));
            opt.max_len = std::max<int>(base_opts.max_len,
                                        static_cast<int>(s.target.size()) + 8);
            const auto start = std::chrono::steady_clock::now();
            DecodeResult dr = decode(*src, s.prompt, plan.oc, opt);
            const auto stop = std::chrono::steady_clock::now();
            seconds += std::chrono::duration<double>(stop - start).count();
            vr.total_tokens += static_cast<int64_t>(dr.tokens.size());
            vr.total_calls += dr.model_calls;
            if (sample_correct(s, dr.tokens)) ++correct;
        }
        vr.accuracy = static_cast<double>(correct) / static_cast<double>(eval.size());
        vr.wall_clock_sec = seconds;
        vr.accepted_tokens_per_sec =
            vr.total_tokens > 0 && seconds > 0.0 ? vr.total_tokens / seconds : 0.0;
        vr.model_calls_per_token =
            vr.total_tokens > 0 ? static_cast<double>(vr.total_calls) / vr.total_tokens : 0.0;
        report.variants.push_back(std::move(vr));
    }

    // speedup against the nt row (first row when nt is absent)
    const VariantResult* base = &report.variants.front();
    for (const auto& vr : report.variants)
        if (vr.name == "nt") base = &vr;
    const double base_spt =
        base->total_tokens > 0 ? base->wall_clock_sec / base->total_tokens : 0.0;
    for (auto& vr : report.variants) {
        const double spt = vr.total_tokens > 0 ? vr.wall_clock_sec / vr.total_tokens : 0.0;
        vr.speedup = (spt > 0.0 && base_spt > 0.0) ? base_spt / spt : 0.0;
        if (&vr == base) vr.speedup = 1.0;
    }
    return report;
}

BenchReport run_benchmark(const Model& model, const OffsetConfig& oc,
                          const std::vector<Sample>& eval,
                          const std::vector<std::string>& variants, uint64_t seed,
                          const DecodeOptions& base_opts) {
    auto factory = [&model](const Sample&, int) -> std::unique_ptr<GridSource> {
        return std::make_unique<ModelGridSource>(model);
    };
    return run_benchmark(factory, model.config(), oc, eval, variants, seed, base_opts);
}

std::string bench_report_json(const BenchReport& report) {
    json j;
    j["task"] = report.task;
    j["seed"] = report.seed;
    j["flops"] = {{"next_token", report.flops_next_token},
                  {"all_offsets", report.flops_all_offsets},
                  {"ratio", report.flops_ratio}};
    json vars = json::array();
    for (const auto& v : report.variants) {
        vars.push_back({{"name", v.name},
                        {"accuracy", v.accuracy},
                        {"accepted_tokens_per_sec", v.accepted_tokens_per_sec},
                        {"model_calls_per_token", v.model_calls_per_token},
                        {"speedup", v.speedup},
                        {"wall_clock_sec", v.wall_clock_sec},
                        {"total_tokens", v.total_tokens},
                        {"total_calls", v.total_calls},
                        {"samples", v.samples}});
    }
    j["variants"] = vars;
    return j.dump(2);
}

std::vector<OffsetMetrics> analyze_offsets(const Model& model, const OffsetConfig& oc,
                                           const std::vector<Sample>& eval,
                                           const CorruptionSpec& spec, uint64_t seed,
                                           const std::string& csv_path) {
    auto table = eval_token_metrics(model, eval, oc, spec, seed);
    if (!csv_path.empty()) {
        std::ofstream out(csv_path);
        if (!out) throw IoError("cannot open CSV for writing: " + csv_path);
        out << "offset,loss";
        for (int k = 1; k <= 8; ++k) out << ",top" << k;
        out << "\n";
        for (const auto& m : table) {
            out << m.offset << "," << m.mean_loss;
            for (int k = 0; k < 8; ++k) out << "," << m.topk[k];
            out << "\n";
        }
    }
    return table;
}

}  // namespace oalm
