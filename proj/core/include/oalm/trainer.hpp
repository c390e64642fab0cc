#pragma once

#include <array>
#include <iosfwd>
#include <map>

#include "oalm/corpus.hpp"
#include "oalm/model.hpp"

namespace oalm {

/// Per-offset cross-entropy terms of the training objective for one row.
/// Forward offsets read the clean grid against clean targets; backward
/// offsets read the corrupted grid against the original tokens, restricted
/// to corrupted positions. Prompt and padding positions never contribute.
struct LossTerms {
    double total = 0.0;
    double fwd = 0.0;
    double bwd = 0.0;
    bool has_bwd = false;
    std::map<int, double> per_offset;
    std::map<int, int64_t> counts;
};

/// Objective evaluated from prediction grids (no tape). The forward and
/// backward means are averaged with equal weight; an empty backward side
/// leaves the forward term alone.
LossTerms grid_loss(const PredictionGrid& grid_clean, const PredictionGrid& grid_corrupt,
                    const std::vector<int>& clean_tokens,
                    const std::vector<uint8_t>& corruption_mask, int response_start,
                    const OffsetConfig& oc);

/// Taped batch objective; value matches grid_loss pooled over rows.
struct TapedLoss {
    ValueId total = -1;
    double fwd = 0.0;
    double bwd = 0.0;
    bool has_bwd = false;
    std::map<int, double> per_offset;
};

TapedLoss batch_loss(Graph& g, const Model& model, const Batch& batch, const OffsetConfig& oc);

/// sft is the from-scratch base stage (plain next-token objective, all
/// parameters); stage1 trains only the last layer; stage2a everything but
/// the last layer; stage2b everything.
enum class StageId { sft, stage1, stage2a, stage2b };

std::string stage_name(StageId id);

struct StageConfig {
    StageId id = StageId::stage1;
    int epochs = 3;
    double lr = 3e-4;
    int batch_size = 32;
    CorruptionSpec corruption;
};

struct StepRecord {
    int64_t step = 0;
    std::string stage;
    double loss = 0.0;
    double loss_fwd = 0.0;
    double loss_bwd = 0.0;
    std::map<int, double> per_offset;
};

/// Applies the stage's freeze selector to the model's parameters.
void select_trainable(Model& model, StageId id);

/// Runs one stage of objective minimization. Deterministic in (seed, data).
/// Writes one JSON record per step to `metrics` when given. Throws
/// DivergenceError if the loss stops being finite.
std::vector<StepRecord> train_stage(Model& model, const OffsetConfig& oc, const StageConfig& stage,
                                    const std::vector<Sample>& data, uint64_t seed,
                                    std::ostream* metrics = nullptr, int64_t step_base = 0);

struct TrainPlan {
    /// Base next-token training; the stand-in for starting from a fine-tuned
    /// model. Runs with offsets {1} and no corruption; 0 epochs skips it.
    StageConfig sft{StageId::sft, 6, 1e-3, 32, {}};
    StageConfig stage1{StageId::stage1, 3, 1e-4, 32, {}};
    StageConfig stage2a{StageId::stage2a, 3, 1e-4, 32, {}};
    /// The final stage runs longest: it repairs the next-token head after
    /// the offset-adaptation stages while the other offsets converge.
    StageConfig stage2b{StageId::stage2b, 12, 1e-4, 32, {}};
};

/// sft -> stage1 -> stage2a -> stage2b on the same data.
std::vector<StepRecord> train_all_stages(Model& model, const OffsetConfig& oc,
                                         const TrainPlan& plan, const std::vector<Sample>& data,
                                         uint64_t seed, std::ostream* metrics = nullptr);

// ---- checkpoint persistence ----
// Directory layout: manifest.json (config + named-tensor index) and
// weights.bin (little-endian row-major f32 blobs). Writes go through a
// temp file + rename.

struct CheckpointMeta {
    std::string stage = "none";
    int64_t step = 0;
    uint64_t seed = 0;
};

void save_checkpoint(const Model& model, const OffsetConfig& oc, const std::string& dir,
                     const CheckpointMeta& meta = {});

struct LoadedCheckpoint {
    Model model;
    OffsetConfig offsets;
    CheckpointMeta meta;
    std::string warning;  // set when requested offsets conflicted with stored ones
};

/// Loads a checkpoint directory. When `requested` disagrees with the stored
/// offset configuration the stored one wins and `warning` is set.
LoadedCheckpoint load_checkpoint(const std::string& dir, const OffsetConfig* requested = nullptr);

// ---- held-out evaluation ----

struct OffsetMetrics {
    int offset = 0;
    double mean_loss = 0.0;
    std::array<double, 8> topk{};  // cumulative top-1..top-8 accuracy
    int64_t count = 0;
};

/// Per-offset loss and top-k accuracy. Forward offsets are measured on
/// clean sequences, backward offsets on reconstructing corrupted positions.
std::vector<OffsetMetrics> eval_token_metrics(const Model& model, const std::vector<Sample>& data,
                                              const OffsetConfig& oc, const CorruptionSpec& spec,
                                              uint64_t seed);

}  // namespace oalm
