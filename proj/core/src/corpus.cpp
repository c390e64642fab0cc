#include "oalm/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace oalm {

namespace {

// 4 control symbols, 10 digits, 26 letters, 24 punctuation marks.
constexpr char kAlphabet[] = "^$~`0123456789abcdefghijklmnopqrstuvwxyz +-*/%=<>()[]{},.:;?!|#&";

std::array<int, 256> build_lookup() {
    std::array<int, 256> lut{};
    lut.fill(-1);
    for (int i = 0; kAlphabet[i] != '\0'; ++i)
        lut[static_cast<unsigned char>(kAlphabet[i])] = i;
    return lut;
}

const std::array<int, 256>& lookup() {
    static const std::array<int, 256> lut = build_lookup();
    return lut;
}

}  // namespace

const std::string& Tokenizer::alphabet() {
    static const std::string a = kAlphabet;
    return a;
}

bool Tokenizer::in_alphabet(char c) { return lookup()[static_cast<unsigned char>(c)] >= 0; }

int Tokenizer::id_of(char c) {
    const int id = lookup()[static_cast<unsigned char>(c)];
    if (id < 0) throw EncodingError(std::string("character outside the alphabet: '") + c + "'");
    return id;
}

char Tokenizer::char_of(int id) {
    require(id >= 0 && id < kVocab, "token id out of range");
    return kAlphabet[id];
}

std::vector<int> Tokenizer::encode(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (char c : text) out.push_back(id_of(c));
    return out;
}

std::string Tokenizer::decode(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(char_of(id));
    return out;
}

TaskId parse_task(std::string_view name) {
    if (name == "copy") return TaskId::copy;
    if (name == "reverse") return TaskId::reverse;
    if (name == "modchain") return TaskId::modchain;
    throw UsageError("unknown task: " + std::string(name));
}

std::string task_name(TaskId id) {
    switch (id) {
        case TaskId::copy: return "copy";
        case TaskId::reverse: return "reverse";
        case TaskId::modchain: return "modchain";
    }
    return "?";
}

int modchain_answer(const std::vector<int>& operands) {
    require(!operands.empty(), "modchain: need at least one operand");
    int acc = 0;
    for (int v : operands) acc = (acc + v) % 97;
    return acc;
}

std::string extract_answer_span(const std::string& text) {
    const auto hash = text.rfind('#');
    if (hash == std::string::npos) return "";
    std::string out;
    for (size_t i = hash + 1; i < text.size() && text[i] != '$'; ++i) out.push_back(text[i]);
    return out;
}

namespace {

// content alphabet for copy/reverse: letters and digits only
int random_content_symbol(Rng& rng) {
    const int r = rng.uniform_int(36);
    return r < 10 ? Tokenizer::id_of(static_cast<char>('0' + r))
                  : Tokenizer::id_of(static_cast<char>('a' + r - 10));
}

Sample make_copy_like(TaskId task, Rng& rng, uint64_t seed, std::pair<int, int> len_range) {
    const int n = len_range.first + rng.uniform_int(len_range.second - len_range.first + 1);
    std::vector<int> content(n);
    for (auto& t : content) t = random_content_symbol(rng);

    Sample s;
    s.task = task_name(task);
    s.seed = seed;
    s.prompt.push_back(Tokenizer::bos());
    s.prompt.insert(s.prompt.end(), content.begin(), content.end());
    s.prompt.push_back(Tokenizer::id_of('='));
    if (task == TaskId::reverse) std::reverse(content.begin(), content.end());
    s.target = content;
    s.target.push_back(Tokenizer::eos());
    return s;
}

Sample make_modchain(Rng& rng, uint64_t seed, std::pair<int, int> len_range) {
    const int n_ops =
        std::max(2, len_range.first + rng.uniform_int(len_range.second - len_range.first + 1));
    std::vector<int> operands(n_ops);
    for (auto& v : operands) v = rng.uniform_int(97);

    std::string prompt_text = "^";
    for (int i = 0; i < n_ops; ++i) {
        if (i) prompt_text += '+';
        prompt_text += std::to_string(operands[i]);
    }
    prompt_text += '=';

    // scratchpad of running partial sums, then the final answer span
    std::string target_text;
    int acc = operands[0];
    for (int i = 1; i < n_ops; ++i) {
        acc = (acc + operands[i]) % 97;
        if (i + 1 < n_ops) {
            if (i > 1) target_text += ',';
            target_text += std::to_string(acc);
        }
    }
    target_text += '#';
    target_text += std::to_string(acc);
    target_text += '$';

    Sample s;
    s.task = "modchain";
    s.seed = seed;
    s.prompt = Tokenizer::encode(prompt_text);
    s.target = Tokenizer::encode(target_text);
    return s;
}

}  // namespace

std::vector<Sample> gen_task(TaskId task, uint64_t seed, int count,
                             std::pair<int, int> length_range) {
    require(count >= 1, "gen_task: count must be >= 1");
    require(length_range.first >= 1 && length_range.second >= length_range.first,
            "gen_task: bad length range");
    std::vector<Sample> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        Rng rng(hash_combine(seed, static_cast<uint64_t>(i)));
        switch (task) {
            case TaskId::copy:
            case TaskId::reverse:
                out.push_back(make_copy_like(task, rng, seed, length_range));
                break;
            case TaskId::modchain:
                out.push_back(make_modchain(rng, seed, length_range));
                break;
        }
    }
    return out;
}

void CorruptionSpec::validate() const {
    require_config(granularity >= 1, "corruption: granularity must be >= 1");
    require_config(ratio >= 0.0 && ratio <= 1.0, "corruption: ratio must be in [0, 1]");
    require_config(strategy_mix >= 0.0 && strategy_mix <= 1.0,
                   "corruption: strategy_mix must be in [0, 1]");
}

CorruptedSample corrupt_sequence(const std::vector<int>& y, const CorruptionSpec& spec, Rng& rng) {
    spec.validate();
    const int t = static_cast<int>(y.size());
    const int g = spec.granularity;
    require(t >= g, "corrupt_sequence: sequence shorter than one patch");

    CorruptedSample out;
    out.tokens = y;
    out.mask.assign(y.size(), 0);

    const int num_patches = t / g;
    const int n_sel = static_cast<int>(std::floor(spec.ratio * num_patches + 0.5));
    if (n_sel == 0) return out;

    // sample n_sel patch indices without replacement
    std::vector<int> order(num_patches);
    for (int i = 0; i < num_patches; ++i) order[i] = i;
    for (int i = 0; i < n_sel; ++i) {
        const int j = i + rng.uniform_int(num_patches - i);
        std::swap(order[i], order[j]);
    }

    for (int s = 0; s < n_sel; ++s) {
        const int patch = order[s];
        const int base = patch * g;
        if (rng.uniform() < spec.strategy_mix && num_patches > 1) {
            // replace with another patch drawn from the same sequence
            int src = rng.uniform_int(num_patches - 1);
            if (src >= patch) ++src;
            for (int j = 0; j < g; ++j) out.tokens[base + j] = y[src * g + j];
        } else {
            for (int j = 1; j < g; ++j) out.tokens[base + j] = out.tokens[base];
        }
        for (int j = 0; j < g; ++j) out.mask[base + j] = 1;
    }
    return out;
}

Batch make_training_batch(const std::vector<Sample>& samples, const CorruptionSpec& spec,
                          Rng& rng) {
    require(!samples.empty(), "make_training_batch: empty sample list");
    Batch batch;
    for (const Sample& s : samples) {
        require(!s.prompt.empty() && !s.target.empty(), "batch: empty prompt or target");
        BatchRow row;
        row.response_start = static_cast<int>(s.prompt.size());
        row.clean = s.prompt;
        row.clean.insert(row.clean.end(), s.target.begin(), s.target.end());
        row.length = static_cast<int>(row.clean.size());

        // corrupt the response only, excluding the trailing EOS
        std::vector<int> body(s.target.begin(), s.target.end() - 1);
        std::vector<uint8_t> body_mask(body.size(), 0);
        if (static_cast<int>(body.size()) >= spec.granularity && spec.ratio > 0.0) {
            CorruptedSample cs = corrupt_sequence(body, spec, rng);
            body = std::move(cs.tokens);
            body_mask = std::move(cs.mask);
        }
        row.corrupt = s.prompt;
        row.corrupt.insert(row.corrupt.end(), body.begin(), body.end());
        row.corrupt.push_back(s.target.back());
        row.corruption_mask.assign(row.length, 0);
        for (size_t i = 0; i < body_mask.size(); ++i)
            row.corruption_mask[row.response_start + i] = body_mask[i];

        batch.max_len = std::max(batch.max_len, row.length);
        batch.rows.push_back(std::move(row));
    }
    for (BatchRow& row : batch.rows) {
        row.clean.resize(batch.max_len, Tokenizer::ignore());
        row.corrupt.resize(batch.max_len, Tokenizer::ignore());
        row.corruption_mask.resize(batch.max_len, 0);
    }
    return batch;
}

void save_samples_jsonl(const std::string& path, const std::vector<Sample>& samples) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    for (const Sample& s : samples) {
        nlohmann::json j;
        j["task"] = s.task;
        j["seed"] = s.seed;
        j["prompt"] = Tokenizer::decode(s.prompt);
        j["target"] = Tokenizer::decode(s.target);
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("failed writing: " + path);
}

std::vector<Sample> load_samples_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::vector<Sample> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw IoError("malformed dataset line in " + path);
        Sample s;
        s.task = j.at("task").get<std::string>();
        s.seed = j.at("seed").get<uint64_t>();
        s.prompt = Tokenizer::encode(j.at("prompt").get<std::string>());
        s.target = Tokenizer::encode(j.at("target").get<std::string>());
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace oalm
