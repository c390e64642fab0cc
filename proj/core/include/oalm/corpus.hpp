#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "oalm/common.hpp"
#include "oalm/random.hpp"

namespace oalm {

/// Fixed 64-symbol character tokenizer. Every id maps to one printable
/// ASCII character, including the four control symbols, so encode/decode
/// round-trips the full alphabet.
class Tokenizer {
  public:
    static constexpr int kVocab = 64;

    static int bos() { return 0; }      // '^'
    static int eos() { return 1; }      // '$'
    static int pad() { return 2; }      // '~'
    static int ignore() { return 3; }   // '`'

    static const std::string& alphabet();
    static bool in_alphabet(char c);
    static int id_of(char c);  // throws EncodingError for foreign characters
    static char char_of(int id);

    static std::vector<int> encode(std::string_view text);
    static std::string decode(const std::vector<int>& ids);
};

enum class TaskId { copy, reverse, modchain };

TaskId parse_task(std::string_view name);  // throws UsageError on unknown ids
std::string task_name(TaskId id);

/// One prompt/target pair. Prompts start with BOS and end with '=';
/// targets end with EOS.
struct Sample {
    std::vector<int> prompt;
    std::vector<int> target;
    std::string task;
    uint64_t seed = 0;
};

/// Deterministic synthetic data. `length_range` bounds the content length
/// for copy/reverse and the operand count for modchain.
std::vector<Sample> gen_task(TaskId task, uint64_t seed, int count,
                             std::pair<int, int> length_range);

/// Chained addition mod 97; the reference answer for a modchain operand list.
int modchain_answer(const std::vector<int>& operands);
/// Text after '#' and before EOS/'$'; empty when no answer marker exists.
std::string extract_answer_span(const std::string& text);

struct CorruptionSpec {
    int granularity = 4;       // tokens per patch
    double ratio = 0.25;       // fraction of patches to corrupt
    double strategy_mix = 0.5; // P(random patch); else repeat-first

    void validate() const;
};

struct CorruptedSample {
    std::vector<int> tokens;
    std::vector<uint8_t> mask;  // true on every token of a corrupted patch
};

/// Partitions `y` into floor(|y|/g) non-overlapping patches (the tail
/// remainder is never corrupted), picks round(ratio * num_patches) of them
/// without replacement, and corrupts each by copying another patch of the
/// same sequence or by repeating the patch's first token.
CorruptedSample corrupt_sequence(const std::vector<int>& y, const CorruptionSpec& spec, Rng& rng);

/// One training row: aligned clean/corrupted copies of prompt+target.
/// Prompts are never corrupted and the trailing EOS is never corrupted.
struct BatchRow {
    std::vector<int> clean;
    std::vector<int> corrupt;
    std::vector<uint8_t> corruption_mask;  // over the padded row
    int response_start = 0;                // first target position
    int length = 0;                        // true length before padding
};

struct Batch {
    std::vector<BatchRow> rows;
    int max_len = 0;
};

/// Rows are padded to the batch max length with the IGNORE symbol; padding
/// never enters a loss mask.
Batch make_training_batch(const std::vector<Sample>& samples, const CorruptionSpec& spec, Rng& rng);

// JSON-lines dataset records: {"task", "seed", "prompt", "target"}.
void save_samples_jsonl(const std::string& path, const std::vector<Sample>& samples);
std::vector<Sample> load_samples_jsonl(const std::string& path);

}  // namespace oalm
