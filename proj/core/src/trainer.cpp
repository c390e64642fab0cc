#include "oalm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <ostream>

#include <json.hpp>

namespace oalm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RowSides {
    std::vector<int> clean, corrupt;
    const std::vector<uint8_t>* mask;
    int response_start, length;
};

RowSides trim(const BatchRow& row) {
    RowSides r;
    r.clean.assign(row.clean.begin(), row.clean.begin() + row.length);
    r.corrupt.assign(row.corrupt.begin(), row.corrupt.begin() + row.length);
    r.mask = &row.corruption_mask;
    r.response_start = row.response_start;
    r.length = row.length;
    return r;
}

// CE target/mask vectors for one (row, offset) pair.
struct CeInputs {
    std::vector<int> targets;
    std::vector<uint8_t> mask;
    int64_t count = 0;
};

CeInputs ce_inputs(const std::vector<uint8_t>& avail, const std::vector<int>& clean_tokens,
                   int offset, int response_start, const std::vector<uint8_t>* corruption_mask) {
    const int n = static_cast<int>(clean_tokens.size());
    CeInputs ci;
    ci.targets.assign(n, 0);
    ci.mask.assign(n, 0);
    for (int i = 0; i < n; ++i) {
        const int t = i + offset;
        if (!avail[i] || t < response_start || t >= n) continue;
        if (corruption_mask && !(*corruption_mask)[t]) continue;
        ci.targets[i] = clean_tokens[t];
        ci.mask[i] = 1;
        ++ci.count;
    }
    return ci;
}

}  // namespace

LossTerms grid_loss(const PredictionGrid& grid_clean, const PredictionGrid& grid_corrupt,
                    const std::vector<int>& clean_tokens,
                    const std::vector<uint8_t>& corruption_mask, int response_start,
                    const OffsetConfig& oc) {
    require(corruption_mask.size() >= clean_tokens.size(),
            "grid_loss: mask shorter than the token sequence");
    const int n = static_cast<int>(clean_tokens.size());
    LossTerms out;

    auto accumulate = [&](const PredictionGrid& grid, int offset, bool corrupted_only,
                          double& sum, int64_t& cnt) {
        for (int i = 0; i < n; ++i) {
            const int t = i + offset;
            if (t < response_start || t >= n || !grid.available(i, offset)) continue;
            if (corrupted_only && !corruption_mask[t]) continue;
            sum += -static_cast<double>(grid.at(i, offset)[clean_tokens[t]]);
            ++cnt;
        }
    };

    double fwd_sum = 0.0;
    int fwd_terms = 0;
    for (int d : oc.forward_offsets()) {
        double s = 0.0;
        int64_t c = 0;
        accumulate(grid_clean, d, false, s, c);
        out.counts[d] = c;
        if (c == 0) continue;
        out.per_offset[d] = s / static_cast<double>(c);
        fwd_sum += out.per_offset[d];
        ++fwd_terms;
    }
    double bwd_sum = 0.0;
    int bwd_terms = 0;
    for (int d : oc.backward_offsets()) {
        double s = 0.0;
        int64_t c = 0;
        accumulate(grid_corrupt, d, true, s, c);
        out.counts[d] = c;
        if (c == 0) continue;
        out.per_offset[d] = s / static_cast<double>(c);
        bwd_sum += out.per_offset[d];
        ++bwd_terms;
    }

    out.fwd = fwd_terms ? fwd_sum / fwd_terms : 0.0;
    out.bwd = bwd_terms ? bwd_sum / bwd_terms : 0.0;
    out.has_bwd = bwd_terms > 0;
    if (fwd_terms && bwd_terms) {
        out.total = 0.5 * (out.fwd + out.bwd);
    } else if (fwd_terms) {
        out.total = out.fwd;
    } else {
        out.total = out.bwd;
    }
    return out;
}

TapedLoss batch_loss(Graph& g, const Model& model, const Batch& batch, const OffsetConfig& oc) {
    require(!batch.rows.empty(), "batch_loss: empty batch");
    const auto fwd_offsets = oc.forward_offsets();
    const auto bwd_offsets = oc.backward_offsets();

    std::map<int, std::vector<ValueId>> terms;
    std::map<int, std::vector<double>> weights;

    for (const BatchRow& row : batch.rows) {
        RowSides r = trim(row);
        auto clean_out =
            model.forward_offsets(g, r.clean, fwd_offsets, r.length, oc.mu_convention);
        for (const auto& ol : clean_out) {
            CeInputs ci = ce_inputs(ol.available, r.clean, ol.offset, r.response_start, nullptr);
            if (ci.count == 0) continue;
            terms[ol.offset].push_back(g.cross_entropy(ol.logp, ci.targets, ci.mask));
            weights[ol.offset].push_back(static_cast<double>(ci.count));
        }
        if (!bwd_offsets.empty()) {
            auto corrupt_out =
                model.forward_offsets(g, r.corrupt, bwd_offsets, r.length, oc.mu_convention);
            for (const auto& ol : corrupt_out) {
                CeInputs ci =
                    ce_inputs(ol.available, r.clean, ol.offset, r.response_start, r.mask);
                if (ci.count == 0) continue;
                terms[ol.offset].push_back(g.cross_entropy(ol.logp, ci.targets, ci.mask));
                weights[ol.offset].push_back(static_cast<double>(ci.count));
            }
        }
    }

    TapedLoss out;
    std::vector<ValueId> fwd_nodes, bwd_nodes;
    for (auto& [d, nodes] : terms) {
        ValueId pooled = g.weighted_mean_scalars(nodes, weights[d]);
        out.per_offset[d] = g.scalar_value(pooled);
        (d >= 1 ? fwd_nodes : bwd_nodes).push_back(pooled);
    }
    require(!fwd_nodes.empty() || !bwd_nodes.empty(), "batch_loss: no loss terms");

    std::vector<ValueId> parts;
    if (!fwd_nodes.empty()) {
        ValueId fwd = g.mean_scalars(fwd_nodes);
        out.fwd = g.scalar_value(fwd);
        parts.push_back(fwd);
    }
    if (!bwd_nodes.empty()) {
        ValueId bwd = g.mean_scalars(bwd_nodes);
        out.bwd = g.scalar_value(bwd);
        out.has_bwd = true;
        parts.push_back(bwd);
    }
    out.total = g.mean_scalars(parts);
    return out;
}

std::string stage_name(StageId id) {
    switch (id) {
        case StageId::sft: return "sft";
        case StageId::stage1: return "1";
        case StageId::stage2a: return "2a";
        case StageId::stage2b: return "2b";
    }
    return "?";
}

void select_trainable(Model& model, StageId id) {
    const std::string last_prefix = "layers." + std::to_string(model.config().n_layers - 1) + ".";
    for (Parameter* p : model.parameters()) {
        const bool in_last =
            p->name.rfind(last_prefix, 0) == 0 || p->name == "final_norm";
        switch (id) {
            case StageId::sft: p->trainable = true; break;
            case StageId::stage1: p->trainable = in_last; break;
            case StageId::stage2a: p->trainable = !in_last; break;
            case StageId::stage2b: p->trainable = true; break;
        }
    }
}

std::vector<StepRecord> train_stage(Model& model, const OffsetConfig& oc, const StageConfig& stage,
                                    const std::vector<Sample>& data, uint64_t seed,
                                    std::ostream* metrics, int64_t step_base) {
    require(!data.empty(), "train_stage: empty dataset");
    oc.validate();
    stage.corruption.validate();

    select_trainable(model, stage.id);
    AdamW opt(stage.lr);
    auto params = model.parameters();
    Rng rng(hash_combine(seed, 0x5741 + static_cast<uint64_t>(stage.id)));

    std::vector<StepRecord> records;
    std::vector<int> order(data.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    int64_t step = step_base;
    for (int epoch = 0; epoch < stage.epochs; ++epoch) {
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
            std::swap(order[i], order[rng.uniform_int(i + 1)]);
        for (size_t b0 = 0; b0 < order.size(); b0 += stage.batch_size) {
            std::vector<Sample> chunk;
            for (size_t i = b0; i < std::min(order.size(), b0 + stage.batch_size); ++i)
                chunk.push_back(data[order[i]]);
            Batch batch = make_training_batch(chunk, stage.corruption, rng);

            Graph g;
            TapedLoss tl = batch_loss(g, model, batch, oc);
            const double loss = g.scalar_value(tl.total);
            if (!std::isfinite(loss))
                throw DivergenceError("training diverged at stage " + stage_name(stage.id) +
                                      " step " + std::to_string(step) + " (loss not finite)");
            for (Parameter* p : params) p->zero_grad();
            g.backward(tl.total);
            opt.step(params);

            StepRecord rec;
            rec.step = ++step;
            rec.stage = stage_name(stage.id);
            rec.loss = loss;
            rec.loss_fwd = tl.fwd;
            rec.loss_bwd = tl.bwd;
            rec.per_offset = tl.per_offset;
            if (metrics) {
                json j;
                j["step"] = rec.step;
                j["stage"] = rec.stage;
                j["loss"] = rec.loss;
                j["loss_fwd"] = rec.loss_fwd;
                j["loss_bwd"] = rec.loss_bwd;
                json po = json::object();
                for (auto& [d, v] : rec.per_offset) po[std::to_string(d)] = v;
                j["per_offset_loss"] = po;
                (*metrics) << j.dump() << "\n";
            }
            records.push_back(std::move(rec));
        }
    }
    for (Parameter* p : params) p->trainable = true;
    return records;
}

std::vector<StepRecord> train_all_stages(Model& model, const OffsetConfig& oc,
                                         const TrainPlan& plan, const std::vector<Sample>& data,
                                         uint64_t seed, std::ostream* metrics) {
    std::vector<StepRecord> all;
    if (plan.sft.epochs > 0) {
        StageConfig base = plan.sft;
        base.id = StageId::sft;
        base.corruption.ratio = 0.0;
        OffsetConfig nt = OffsetConfig::next_token_only();
        nt.mu_convention = oc.mu_convention;
        all = train_stage(model, nt, base, data, seed, metrics, 0);
    }
    for (const StageConfig* st : {&plan.stage1, &plan.stage2a, &plan.stage2b}) {
        auto recs = train_stage(model, oc, *st, data, seed, metrics,
                                all.empty() ? 0 : all.back().step);
        all.insert(all.end(), recs.begin(), recs.end());
    }
    return all;
}

// ---- checkpoint ----

namespace {

json model_config_json(const ModelConfig& c) {
    return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                {"d_ff", c.d_ff},             {"max_seq_len", c.max_seq_len},
                {"rope_base", c.rope_base},   {"init_std", c.init_std},
                {"norm_eps", c.norm_eps}};
}

json offset_config_json(const OffsetConfig& oc) {
    json lam = json::object();
    for (auto& [d, l] : oc.lambda) lam[std::to_string(d)] = l;
    return json{{"k_fwd", oc.k_fwd},
                {"k_bwd", oc.k_bwd},
                {"lambda", lam},
                {"lambda_decay", oc.lambda_decay},
                {"gamma", oc.gamma},
                {"epsilon", oc.epsilon},
                {"block_size", oc.block_size},
                {"mu_convention",
                 oc.mu_convention == MuConvention::target_minus_one ? "target_minus_one"
                                                                    : "target"}};
}

void check_known_keys(const json& j, const std::vector<std::string>& known,
                      const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw VersionError("unknown key '" + it.key() + "' in " + where +
                               " (written by a newer version?)");
    }
}

ModelConfig model_config_from_json(const json& j) {
    check_known_keys(j,
                     {"vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len",
                      "rope_base", "init_std", "norm_eps"},
                     "model config");
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.rope_base = j.at("rope_base").get<double>();
    c.init_std = j.at("init_std").get<double>();
    c.norm_eps = j.at("norm_eps").get<float>();
    return c;
}

OffsetConfig offset_config_from_json(const json& j) {
    check_known_keys(j,
                     {"k_fwd", "k_bwd", "lambda", "lambda_decay", "gamma", "epsilon", "block_size",
                      "mu_convention"},
                     "offset config");
    OffsetConfig oc;
    oc.k_fwd = j.at("k_fwd").get<int>();
    oc.k_bwd = j.at("k_bwd").get<int>();
    oc.lambda.clear();
    for (auto it = j.at("lambda").begin(); it != j.at("lambda").end(); ++it)
        oc.lambda[std::stoi(it.key())] = it.value().get<double>();
    oc.lambda_decay = j.at("lambda_decay").get<double>();
    oc.gamma = j.at("gamma").get<std::vector<double>>();
    oc.epsilon = j.at("epsilon").get<double>();
    oc.block_size = j.at("block_size").get<int>();
    const std::string mu = j.at("mu_convention").get<std::string>();
    if (mu == "target_minus_one") {
        oc.mu_convention = MuConvention::target_minus_one;
    } else if (mu == "target") {
        oc.mu_convention = MuConvention::target;
    } else {
        throw VersionError("unknown mu_convention: " + mu);
    }
    return oc;
}

bool same_offsets(const OffsetConfig& a, const OffsetConfig& b) {
    return a.k_fwd == b.k_fwd && a.k_bwd == b.k_bwd && a.lambda == b.lambda &&
           a.lambda_decay == b.lambda_decay && a.gamma == b.gamma && a.epsilon == b.epsilon &&
           a.block_size == b.block_size && a.mu_convention == b.mu_convention;
}

void atomic_write(const fs::path& path, const void* data, size_t size) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + tmp.string());
        out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

}  // namespace

void save_checkpoint(const Model& model, const OffsetConfig& oc, const std::string& dir,
                     const CheckpointMeta& meta) {
    fs::create_directories(dir);
    json manifest;
    manifest["format_version"] = 1;
    manifest["model"] = model_config_json(model.config());
    manifest["offsets"] = offset_config_json(oc);
    manifest["stage"] = meta.stage;
    manifest["step"] = meta.step;
    manifest["seed"] = meta.seed;

    std::vector<char> blob;
    json tensors = json::array();
    for (const Parameter* p : model.parameters()) {
        const size_t bytes = p->value.data.size() * sizeof(float);
        json t;
        t["name"] = p->name;
        t["dtype"] = "f32";
        t["shape"] = p->value.shape;
        t["byte_offset"] = blob.size();
        t["byte_size"] = bytes;
        tensors.push_back(t);
        const size_t off = blob.size();
        blob.resize(off + bytes);
        std::memcpy(blob.data() + off, p->value.data.data(), bytes);
    }
    manifest["tensors"] = tensors;

    atomic_write(fs::path(dir) / "weights.bin", blob.data(), blob.size());
    const std::string mtext = manifest.dump(2);
    atomic_write(fs::path(dir) / "manifest.json", mtext.data(), mtext.size());
}

LoadedCheckpoint load_checkpoint(const std::string& dir, const OffsetConfig* requested) {
    const fs::path mpath = fs::path(dir) / "manifest.json";
    std::ifstream min(mpath);
    if (!min) throw IoError("cannot open checkpoint manifest: " + mpath.string());
    json manifest = json::parse(min, nullptr, false);
    if (manifest.is_discarded()) throw CheckpointError("malformed manifest: " + mpath.string());

    check_known_keys(manifest, {"format_version", "model", "offsets", "stage", "step", "seed",
                                "tensors"},
                     "manifest");
    if (manifest.at("format_version").get<int>() != 1)
        throw VersionError("unsupported checkpoint format_version");

    ModelConfig mcfg = model_config_from_json(manifest.at("model"));
    OffsetConfig oc = offset_config_from_json(manifest.at("offsets"));

    const fs::path wpath = fs::path(dir) / "weights.bin";
    std::ifstream win(wpath, std::ios::binary);
    if (!win) throw IoError("cannot open checkpoint weights: " + wpath.string());
    std::vector<char> blob((std::istreambuf_iterator<char>(win)), std::istreambuf_iterator<char>());

    Model model(mcfg);
    size_t expected = 0;
    for (const auto& t : manifest.at("tensors")) {
        check_known_keys(t, {"name", "dtype", "shape", "byte_offset", "byte_size"}, "tensor entry");
        const std::string name = t.at("name").get<std::string>();
        if (t.at("dtype").get<std::string>() != "f32")
            throw CheckpointError("unsupported tensor dtype for " + name);
        Parameter* p = model.find_parameter(name);
        if (!p) throw CheckpointError("checkpoint tensor has no matching parameter: " + name);
        const auto shape = t.at("shape").get<std::vector<int>>();
        if (shape != p->value.shape)
            throw CheckpointError("shape mismatch for " + name);
        const size_t off = t.at("byte_offset").get<size_t>();
        const size_t size = t.at("byte_size").get<size_t>();
        if (size != p->value.data.size() * sizeof(float))
            throw CheckpointError("byte size mismatch for " + name);
        if (off + size > blob.size())
            throw CheckpointError("weights.bin truncated (tensor " + name + " out of range)");
        std::memcpy(p->value.data.data(), blob.data() + off, size);
        expected += size;
    }
    if (expected != blob.size())
        throw CheckpointError("weights.bin size mismatch (trailing or missing bytes)");

    LoadedCheckpoint out{std::move(model), oc, {}, {}};
    out.meta.stage = manifest.at("stage").get<std::string>();
    out.meta.step = manifest.at("step").get<int64_t>();
    out.meta.seed = manifest.at("seed").get<uint64_t>();
    if (requested && !same_offsets(*requested, oc))
        out.warning = "requested offset config conflicts with checkpoint; using stored config";
    return out;
}

// ---- evaluation ----

std::vector<OffsetMetrics> eval_token_metrics(const Model& model, const std::vector<Sample>& data,
                                              const OffsetConfig& oc, const CorruptionSpec& spec,
                                              uint64_t seed) {
    Rng rng(hash_combine(seed, 0xE7A1ull));
    std::map<int, OffsetMetrics> acc;
    for (int d : oc.offsets()) acc[d] = OffsetMetrics{d, 0.0, {}, 0};

    auto tally = [&](const PredictionGrid& grid, int offset, const std::vector<int>& clean,
                     int response_start, const std::vector<uint8_t>* mask) {
        OffsetMetrics& m = acc[offset];
        const int n = static_cast<int>(clean.size());
        for (int i = 0; i < n; ++i) {
            const int t = i + offset;
            if (t < response_start || t >= n || !grid.available(i, offset)) continue;
            if (mask && !(*mask)[t]) continue;
            const auto& lp = grid.at(i, offset);
            const int target = clean[t];
            m.mean_loss += -static_cast<double>(lp[target]);
            int rank = 0;
            for (int v = 0; v < static_cast<int>(lp.size()); ++v) {
                if (lp[v] > lp[target] || (lp[v] == lp[target] && v < target)) ++rank;
            }
            for (int k = rank; k < 8; ++k) m.topk[k] += 1.0;
            ++m.count;
        }
    };

    Batch batch;
    {
        Rng brng = rng.fork(1);
        batch = make_training_batch(data, spec, brng);
    }
    const auto fwd = oc.forward_offsets();
    const auto bwd = oc.backward_offsets();
    for (const BatchRow& row : batch.rows) {
        std::vector<int> clean(row.clean.begin(), row.clean.begin() + row.length);
        std::vector<int> corrupt(row.corrupt.begin(), row.corrupt.begin() + row.length);
        PredictionGrid gc = model.forward_grid(clean, fwd, row.length, oc.mu_convention);
        for (int d : fwd) tally(gc, d, clean, row.response_start, nullptr);
        if (!bwd.empty()) {
            PredictionGrid gb = model.forward_grid(corrupt, bwd, row.length, oc.mu_convention);
            for (int d : bwd) tally(gb, d, clean, row.response_start, &row.corruption_mask);
        }
    }

    std::vector<OffsetMetrics> out;
    for (int d : oc.offsets()) {
        OffsetMetrics m = acc[d];
        if (m.count > 0) {
            m.mean_loss /= static_cast<double>(m.count);
            for (auto& v : m.topk) v /= static_cast<double>(m.count);
        }
        out.push_back(m);
    }
    return out;
}

}  // namespace oalm
