#pragma once

#include <functional>
#include <memory>

#include "oalm/decoder.hpp"
#include "oalm/trainer.hpp"

namespace oalm {

/// Analytic matmul FLOPs for one forward pass (2 FLOPs per MAC).
/// Layers below the last are counted once; the last layer shares K/V across
/// offsets while its query path, score/value application, output projection,
/// feed-forward, and the unembedding are counted once per offset. With a
/// single offset this reduces to the textbook transformer count.
double flops_estimate(const ModelConfig& cfg, const OffsetConfig& oc, int seq_len);
double flops_estimate_n(const ModelConfig& cfg, int n_offsets, int seq_len);

struct VariantResult {
    std::string name;
    double accuracy = 0.0;
    double accepted_tokens_per_sec = 0.0;
    double model_calls_per_token = 0.0;
    double speedup = 0.0;  // baseline sec/token over this variant's sec/token
    double wall_clock_sec = 0.0;
    int64_t total_tokens = 0;
    int64_t total_calls = 0;
    int samples = 0;
};

struct BenchReport {
    std::string task;
    uint64_t seed = 0;
    std::vector<VariantResult> variants;
    double flops_next_token = 0.0;
    double flops_all_offsets = 0.0;
    double flops_ratio = 0.0;
};

/// nt, ours, ours-nv (no verifier), ours-nmf (no multi-forward).
std::vector<std::string> default_variants();

using SourceFactory = std::function<std::unique_ptr<GridSource>(const Sample&, int index)>;

/// Runs every variant on identical inputs and per-sample seeds. Timing covers
/// the decode loop only. Accuracy is exact-sequence match for copy/reverse
/// and answer-span match for modchain.
BenchReport run_benchmark(const SourceFactory& make_source, const ModelConfig& cfg,
                          const OffsetConfig& oc, const std::vector<Sample>& eval,
                          const std::vector<std::string>& variants, uint64_t seed,
                          const DecodeOptions& base_opts = {});

BenchReport run_benchmark(const Model& model, const OffsetConfig& oc,
                          const std::vector<Sample>& eval,
                          const std::vector<std::string>& variants, uint64_t seed,
                          const DecodeOptions& base_opts = {});

std::string bench_report_json(const BenchReport& report);

/// Per-offset eval table written as plot-ready CSV:
/// offset,loss,top1..top8 (cumulative).
std::vector<OffsetMetrics> analyze_offsets(const Model& model, const OffsetConfig& oc,
                                           const std::vector<Sample>& eval,
                                           const CorruptionSpec& spec, uint64_t seed,
                                           const std::string& csv_path = "");

}  // namespace oalm
