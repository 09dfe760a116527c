#include "memecap/pipeline.hpp"

#include "memecap/align.hpp"
#include "memecap/annotate.hpp"
#include "memecap/annotate_http.hpp"
#include "memecap/augment.hpp"
#include "memecap/checkpoint.hpp"
#include "memecap/corpus.hpp"
#include "memecap/decoder.hpp"
#include "memecap/encode.hpp"
#include "memecap/error.hpp"
#include "memecap/io.hpp"
#include "memecap/reward.hpp"
#include "memecap/rl.hpp"
#include "memecap/sft.hpp"
#include "memecap/synth.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace memecap {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ---- stage table ----

namespace {

struct StageInfo {
    Stage stage;
    const char *name;
    std::vector<Stage> requires_;
};

const std::vector<StageInfo> &stage_table() {
    static const std::vector<StageInfo> t = {
        {Stage::ingest, "ingest", {}},
        {Stage::segment, "segment", {Stage::ingest}},
        {Stage::augment, "augment", {Stage::segment}},
        {Stage::align, "align", {Stage::augment}},
        {Stage::sft, "sft", {Stage::align}},
        {Stage::candidates, "candidates", {Stage::sft}},
        {Stage::annotate_serve, "annotate-serve", {Stage::candidates}},
        {Stage::train_reward, "train-reward", {Stage::candidates}},
        {Stage::rl, "rl", {Stage::train_reward}},
        {Stage::evaluate, "evaluate", {Stage::rl}},
        {Stage::heatmap, "heatmap", {Stage::align}},
    };
    return t;
}

const StageInfo &info(Stage s) {
    for (const StageInfo &i : stage_table()) {
        if (i.stage == s) {
            return i;
        }
    }
    throw Error("unknown stage");
}

} // namespace

std::string_view to_string(Stage s) { return info(s).name; }

Stage parse_stage(std::string_view s) {
    for (const StageInfo &i : stage_table()) {
        if (s == i.name) {
            return i.stage;
        }
    }
    throw ValidationError("unknown stage '" + std::string(s) + "'");
}

const std::vector<Stage> &all_stages() {
    static const std::vector<Stage> v = [] {
        std::vector<Stage> out;
        for (const StageInfo &i : stage_table()) {
            out.push_back(i.stage);
        }
        return out;
    }();
    return v;
}

const std::vector<Stage> &stage_requirements(Stage s) { return info(s).requires_; }

fs::path stage_dir(const PipelineConfig &cfg, Stage s) { return cfg.data_dir / std::string(to_string(s)); }

// ---- run manifests ----

std::string RunManifest::to_json() const {
    json j;
    j["stage"] = stage;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    return j.dump(2) + "\n";
}

RunManifest RunManifest::parse(std::string_view text) {
    RunManifest m;
    try {
        const auto j = nlohmann::json::parse(text);
        m.stage = j.at("stage").get<std::string>();
        m.config_hash = j.at("config_hash").get<std::string>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
        m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception &e) {
        throw ValidationError(std::string("malformed run manifest: ") + e.what());
    }
    return m;
}

RunManifest read_run_manifest(const PipelineConfig &cfg, Stage s) {
    const fs::path p = stage_dir(cfg, s) / "run.json";
    if (!fs::exists(p)) {
        throw DependencyError(std::string(to_string(s)), "missing artifacts of stage '" + std::string(to_string(s)) +
                                                             "' under " + stage_dir(cfg, s).string() + "; run `" +
                                                             std::string(to_string(s)) + "` first");
    }
    return RunManifest::parse(read_file(p));
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)> &f) {
    const std::size_t w = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
    if (w <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            f(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first;
    std::mutex mu;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < w; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    f(i);
                } catch (...) {
                    std::lock_guard lock(mu);
                    if (!first) {
                        first = std::current_exception();
                    }
                    next = n;
                }
            }
        });
    }
    for (std::thread &t : pool) {
        t.join();
    }
    if (first) {
        std::rethrow_exception(first);
    }
}

namespace {

// ---- stage plumbing ----

class StageRun {
  public:
    StageRun(Stage s, const PipelineConfig &cfg, bool wipe = true) : stage_(s), cfg_(cfg), dir_(stage_dir(cfg, s)) {
        for (Stage r : stage_requirements(s)) {
            read_run_manifest(cfg, r);
            const fs::path p = stage_dir(cfg, r) / "run.json";
            manifest_.inputs[std::string(to_string(r)) + "/run.json"] = sha256_file(p);
        }
        if (wipe) {
            fs::remove_all(dir_);
        }
        fs::create_directories(dir_);
        manifest_.stage = std::string(to_string(s));
        manifest_.config_hash = cfg.hash();
        manifest_.seed = cfg.seed;
    }

    const fs::path &dir() const { return dir_; }

    void write(const std::string &rel, std::string_view bytes) {
        write_file(dir_ / rel, bytes);
        manifest_.outputs[rel] = sha256_hex(bytes);
    }
    void blob(const std::string &rel, const Blob &b) { write(rel, serialize_blob(b)); }
    /// Registers a file some other component wrote.
    void record(const std::string &rel) { manifest_.outputs[rel] = sha256_file(dir_ / rel); }
    void input_file(const std::string &name, const fs::path &p) { manifest_.inputs[name] = sha256_file(p); }

    StageResult finish(std::string summary) {
        write_file(dir_ / "run.json", manifest_.to_json());
        return {manifest_, std::move(summary)};
    }

  private:
    Stage stage_;
    const PipelineConfig &cfg_;
    fs::path dir_;
    RunManifest manifest_;
};

std::string lines_of(const std::vector<std::string> &lines) {
    std::string out;
    for (const std::string &l : lines) {
        out += l + "\n";
    }
    return out;
}

std::vector<std::string> read_lines(const fs::path &p) {
    std::istringstream in(read_file(p));
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);) {
        if (!line.empty()) {
            out.push_back(line);
        }
    }
    return out;
}

/// Mean of the first or last `n` entries of a noisy per-step log.
template <class T, class F> double window_mean(const std::vector<T> &v, std::size_t n, bool tail, F f) {
    n = std::max<std::size_t>(1, std::min(n, v.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        s += f(v[tail ? v.size() - n + i : i]);
    }
    return s / static_cast<double>(n);
}

std::string fmt(double x, int digits = 4) {
    std::ostringstream o;
    o << std::fixed << std::setprecision(digits) << x;
    return o.str();
}

fs::path records_path(const PipelineConfig &cfg, Stage s) { return stage_dir(cfg, s) / "records.jsonl"; }

std::vector<MemeRecord> stage_records(const PipelineConfig &cfg, Stage s) {
    return load_manifest(records_path(cfg, s));
}

/// Per-stage seed so that stages do not share random streams.
std::uint64_t stage_seed(const PipelineConfig &cfg, std::uint64_t salt) { return cfg.seed * 1000003ULL + salt; }

// ---- shared model inputs ----

struct AlignArtifacts {
    PatchMeanEncoder visual;
    EmbeddingTextEncoder text;
    AlignParams params;
    std::vector<AugmentOp> ops;
};

AlignArtifacts load_align(const PipelineConfig &cfg) {
    const fs::path dir = stage_dir(cfg, Stage::align);
    fs::path align_file = dir / "align.bin";
    if (cfg.train_align && fs::exists(stage_dir(cfg, Stage::sft) / "align.bin")) {
        align_file = stage_dir(cfg, Stage::sft) / "align.bin";
    }
    return {PatchMeanEncoder::from_blob(load_blob(dir / "visual.bin")),
            EmbeddingTextEncoder::from_blob(load_blob(dir / "text.bin")), AlignParams::from_blob(load_blob(align_file)),
            plan_augmentations(cfg.augment_variants, stage_seed(cfg, 3))};
}

std::vector<AreaFeatures> encode_subimages(const PatchMeanEncoder &enc, const Image &img, const MemeRecord &r,
                                           const std::vector<AugmentOp> &ops) {
    std::vector<AreaFeatures> out;
    for (const RoiBox &roi : r.rois) {
        const Image sub = crop(img, roi);
        out.push_back(encode_with_variants(enc, sub, augment_image(sub, ops), roi.index, VariantCombine::average));
    }
    return out;
}

std::vector<std::string> caption_tokens(const MemeRecord &r) {
    std::vector<std::string> t = r.caption_tokens;
    if (t.size() > static_cast<std::size_t>(kMaxCaptionTokens)) {
        t.resize(kMaxCaptionTokens);
    }
    return t;
}

constexpr int kMaxPrefix = 24;

std::vector<std::string> prefix_tokens(const PipelineConfig &cfg, const MemeRecord &r) {
    std::vector<std::string> out;
    if (cfg.baseline_mode) {
        out = basic_tokenize(cfg.baseline_prompt);
    } else {
        for (const ChainOfHumor &c : r.humor) {
            for (const std::string *slot : {&c.concept_name, &c.emotion, &c.event, &c.consequence, &c.humor_device}) {
                for (std::string &t : basic_tokenize(*slot)) {
                    out.push_back(std::move(t));
                }
            }
        }
    }
    if (out.size() > static_cast<std::size_t>(kMaxPrefix)) {
        out.resize(kMaxPrefix);
    }
    return out;
}

/// Everything the model stages need about one meme.
struct MemeInputs {
    MemeRecord record;
    Image image;
    std::vector<AreaFeatures> subs;
    std::vector<std::string> caption;
    std::vector<std::string> prefix;
    RowVec pooled; // image conditioning, attention-pooled against the prefix text
};

std::vector<MemeInputs> meme_inputs(const PipelineConfig &cfg, const AlignArtifacts &a) {
    const fs::path manifest = records_path(cfg, Stage::segment);
    std::vector<MemeRecord> records = stage_records(cfg, Stage::segment);
    std::vector<MemeInputs> out(records.size());
    parallel_for(records.size(), cfg.workers, [&](std::size_t i) {
        MemeInputs &m = out[i];
        m.record = records[i];
        m.image = read_ppm(resolve_image(manifest, m.record));
        m.subs = encode_subimages(a.visual, m.image, m.record, a.ops);
        m.caption = caption_tokens(m.record);
        m.prefix = prefix_tokens(cfg, m.record);
        const std::vector<std::string> query = m.prefix.empty() ? std::vector<std::string>{"<image>"} : m.prefix;
        m.pooled = align_view(m.subs, a.text.encode(query), a.params).pooled;
    });
    return out;
}

Conditioning conditioning(const MemeInputs &m, const Vocabulary &v) { return {m.pooled, v.encode(m.prefix)}; }

RowVec mean_embedding(const TextEncoder &enc, const std::vector<std::string> &tokens) {
    RowVec r = RowVec::Zero(enc.width());
    for (const std::string &t : tokens) {
        r += enc.embed(t);
    }
    return r / static_cast<double>(std::max<std::size_t>(1, tokens.size()));
}

CaptionDecoder load_decoder(const fs::path &p) { return CaptionDecoder::from_blob(load_blob(p)); }

// ---- candidate sets on disk ----

struct StoredCandidate {
    std::string id;
    std::vector<std::string> tokens;
    double temperature = 0.0;
};

struct StoredSet {
    std::string meme_id;
    std::string split;
    std::string provenance;
    std::vector<StoredCandidate> candidates;
};

std::string stored_set_line(const StoredSet &s) {
    json j;
    j["meme_id"] = s.meme_id;
    j["split"] = s.split;
    j["provenance"] = s.provenance;
    j["candidates"] = json::array();
    for (const StoredCandidate &c : s.candidates) {
        json cj;
        cj["id"] = c.id;
        cj["caption"] = join_tokens(c.tokens);
        cj["temperature"] = c.temperature;
        j["candidates"].push_back(cj);
    }
    return j.dump();
}

std::vector<StoredSet> load_candidate_sets(const PipelineConfig &cfg) {
    std::vector<StoredSet> out;
    for (const std::string &line : read_lines(stage_dir(cfg, Stage::candidates) / "candidates.jsonl")) {
        const auto j = nlohmann::json::parse(line);
        StoredSet s{j.at("meme_id"), j.at("split"), j.at("provenance"), {}};
        for (const auto &c : j.at("candidates")) {
            s.candidates.push_back({c.at("id"), basic_tokenize(c.at("caption").get<std::string>()), c.at("temperature")});
        }
        out.push_back(std::move(s));
    }
    return out;
}

std::map<std::string, const MemeInputs *> by_id(const std::vector<MemeInputs> &memes) {
    std::map<std::string, const MemeInputs *> m;
    for (const MemeInputs &x : memes) {
        m[x.record.id] = &x;
    }
    return m;
}

// ---- stages ----

StageResult run_ingest(const PipelineConfig &cfg) {
    StageRun run(Stage::ingest, cfg);
    std::vector<MemeRecord> records;
    if (cfg.manifest.empty()) {
        records = generate_synthetic_corpus(run.dir(), cfg.synth_size, stage_seed(cfg, 1));
        fs::remove(run.dir() / "manifest.jsonl");
        for (const MemeRecord &r : records) {
            run.record(r.image_path);
        }
    } else {
        run.input_file("manifest", cfg.manifest);
        records = load_manifest(cfg.manifest);
        fs::create_directories(run.dir() / "images");
        for (MemeRecord &r : records) {
            const fs::path src = resolve_image(cfg.manifest, r);
            const Image img = read_ppm(src); // only binary PPM inputs are accepted
            r.image_path = "images/" + r.id + ".ppm";
            run.write(r.image_path, encode_ppm(img));
        }
    }
    run.write("records.jsonl", manifest_text(records));
    const CorpusStats st = compute_stats(records);
    json j;
    j["count"] = st.count_total;
    j["fraction_single"] = st.fraction_single;
    j["fraction_multi"] = st.fraction_multi;
    j["fraction_per_sentiment"] = st.fraction_per_sentiment;
    j["tokens"] = {{"avg", st.tokens.avg}, {"max", st.tokens.max}, {"min", st.tokens.min}};
    run.write("stats.json", j.dump(2) + "\n");
    return run.finish(std::to_string(records.size()) + " records (" + fmt(st.fraction_single * 100, 1) +
                      "% single, " + fmt(st.fraction_multi * 100, 1) + "% multi)");
}

StageResult run_segment(const PipelineConfig &cfg) {
    StageRun run(Stage::segment, cfg);
    const fs::path src_manifest = records_path(cfg, Stage::ingest);
    std::vector<MemeRecord> records = stage_records(cfg, Stage::ingest);
    const SegmentConfig sc{cfg.segment_threshold, cfg.segment_min_thickness};
    int fallbacks = 0;
    double iou_sum = 0.0;
    int iou_count = 0;
    for (MemeRecord &r : records) {
        const Image img = read_ppm(resolve_image(src_manifest, r));
        std::vector<RoiBox> rois =
            cfg.segment_auto ? segment_subimages(img, SegmentMode::automatic, std::nullopt, sc)
                             : segment_subimages(img, SegmentMode::manual, r.rois, sc);
        if (!r.rois.empty()) {
            for (const RoiBox &planted : r.rois) {
                double best = 0.0;
                for (const RoiBox &found : rois) {
                    best = std::max(best, iou(planted, found));
                }
                iou_sum += best;
                ++iou_count;
            }
        }
        // Chain-of-humor entries are per ROI; keep the manifest geometry when the counts disagree.
        if (!r.humor.empty() && rois.size() != r.humor.size() && r.rois.size() == r.humor.size()) {
            ++fallbacks;
        } else {
            r.rois = std::move(rois);
        }
        r.image_path = (fs::path("..") / "ingest" / r.image_path).generic_string();
    }
    run.write("records.jsonl", manifest_text(records));
    json j;
    j["mode"] = cfg.segment_auto ? "auto" : "manual";
    j["mean_iou_vs_manifest"] = iou_count ? iou_sum / iou_count : 1.0;
    j["fallbacks"] = fallbacks;
    run.write("segment.json", j.dump(2) + "\n");
    return run.finish("segmented " + std::to_string(records.size()) + " records, mean IoU vs manifest " +
                      fmt(iou_count ? iou_sum / iou_count : 1.0) + ", " + std::to_string(fallbacks) + " fallbacks");
}

StageResult run_augment(const PipelineConfig &cfg) {
    StageRun run(Stage::augment, cfg);
    const std::vector<AugmentOp> ops = plan_augmentations(cfg.augment_variants, stage_seed(cfg, 3));
    json plan = json::array();
    for (const AugmentOp &op : ops) {
        plan.push_back(op.describe());
    }
    run.write("plan.json", plan.dump(2) + "\n");
    std::unique_ptr<Paraphraser> para = std::make_unique<IdentityParaphraser>();
    if (!cfg.paraphrase_table.empty()) {
        run.input_file("paraphrase_table", cfg.paraphrase_table);
        para = std::make_unique<SynonymTableParaphraser>(SynonymTableParaphraser::from_file(cfg.paraphrase_table));
    }
    std::vector<std::string> lines;
    int changed = 0;
    for (const MemeRecord &r : stage_records(cfg, Stage::segment)) {
        json j;
        j["id"] = r.id;
        j["caption"] = r.caption;
        j["augmented"] = augment_text(r.caption, *para);
        changed += j["augmented"] != j["caption"];
        lines.push_back(j.dump());
    }
    run.write("captions.jsonl", lines_of(lines));
    return run.finish(std::to_string(ops.size()) + " image variants per sub-image, " + std::to_string(changed) +
                      " paraphrased captions (" + para->name() + ")");
}

StageResult run_align(const PipelineConfig &cfg) {
    StageRun run(Stage::align, cfg);
    std::map<std::string, std::string> augmented;
    for (const std::string &line : read_lines(stage_dir(cfg, Stage::augment) / "captions.jsonl")) {
        const auto j = nlohmann::json::parse(line);
        augmented[j.at("id")] = j.at("augmented");
    }
    const std::vector<MemeRecord> records = stage_records(cfg, Stage::segment);
    std::vector<std::vector<std::string>> train_texts;
    for (const MemeRecord &r : records) {
        if (r.split == Split::train) {
            train_texts.push_back(caption_tokens(r));
            train_texts.push_back(basic_tokenize(augmented.at(r.id)));
        }
    }
    std::vector<std::string> vocab;
    std::set<std::string> seen;
    for (const auto &t : train_texts) {
        for (const std::string &tok : t) {
            if (seen.insert(tok).second) {
                vocab.push_back(tok);
            }
        }
    }
    EmbeddingTextEncoder::Options topt;
    topt.d = cfg.d;
    topt.seed = stage_seed(cfg, 4);
    AlignArtifacts a{PatchMeanEncoder(cfg.grid, cfg.d, stage_seed(cfg, 5)), EmbeddingTextEncoder(vocab, topt),
                     AlignParams::init(cfg.d, cfg.d_k, cfg.tau, stage_seed(cfg, 6)),
                     plan_augmentations(cfg.augment_variants, stage_seed(cfg, 3))};
    const std::vector<MemeInputs> memes = meme_inputs(cfg, a);

    std::vector<MemeFeatures> data;
    for (const MemeInputs &m : memes) {
        if (m.record.split != Split::train) {
            continue;
        }
        data.push_back({m.record.id, m.subs, a.text.encode(m.caption)});
        const std::vector<std::string> aug = basic_tokenize(augmented.at(m.record.id));
        if (aug != m.record.caption_tokens && !aug.empty()) {
            data.push_back({m.record.id + "#aug", m.subs, a.text.encode(aug)});
        }
    }
    if (data.size() < 2) {
        throw ValidationError("align: need at least two training memes");
    }
    AlignTrainConfig tc;
    tc.epochs = cfg.align_epochs;
    tc.batch_size = cfg.align_batch;
    tc.learning_rate = cfg.align_lr;
    tc.seed = stage_seed(cfg, 7);
    tc.loss.scope = cfg.align_caption_scope ? CandidateScope::captions : CandidateScope::tokens;
    const std::vector<double> losses = train_align(data, a.params, tc);

    std::vector<std::string> log;
    for (std::size_t e = 0; e < losses.size(); ++e) {
        json j;
        j["epoch"] = e + 1;
        j["L_I"] = losses[e];
        log.push_back(j.dump());
    }
    run.write("log.jsonl", lines_of(log));
    run.blob("align.bin", a.params.to_blob());
    run.blob("visual.bin", a.visual.to_blob());
    run.blob("text.bin", a.text.to_blob());
    std::vector<std::string> att;
    for (const MemeInputs &m : memes) {
        att.push_back(attention_line(m.record.id, meme_attention(m.subs, a.text.encode(m.caption), a.params), m.caption));
    }
    run.write("attention.jsonl", lines_of(att));
    auto id = [](double x) { return x; };
    return run.finish("L_I " + fmt(window_mean(losses, 3, false, id)) + " -> " + fmt(window_mean(losses, 3, true, id)) +
                      " (3-epoch means) over " + std::to_string(losses.size()) + " epochs");
}

StageResult run_sft(const PipelineConfig &cfg) {
    StageRun run(Stage::sft, cfg);
    AlignArtifacts a = load_align(cfg);
    const std::vector<MemeInputs> memes = meme_inputs(cfg, a);
    std::vector<std::vector<std::string>> lists;
    for (const MemeInputs &m : memes) {
        if (m.record.split == Split::train) {
            lists.push_back(m.caption);
        }
    }
    for (const MemeInputs &m : memes) {
        lists.push_back(m.prefix);
    }
    const Vocabulary vocab = Vocabulary::build(lists);
    DecoderConfig dc;
    dc.vocab_size = vocab.size();
    dc.width = cfg.decoder_width;
    dc.layers = cfg.decoder_layers;
    dc.image_dim = cfg.d;
    dc.max_prefix = kMaxPrefix;
    dc.max_caption = kMaxCaptionTokens;
    dc.seed = stage_seed(cfg, 8);
    CaptionDecoder dec(vocab, dc);

    std::vector<SftExample> data;
    for (const MemeInputs &m : memes) {
        if (m.record.split != Split::train || m.caption.empty()) {
            continue;
        }
        const AlignView view = align_view(m.subs, a.text.encode(m.caption), a.params);
        SftExample ex;
        ex.id = m.record.id;
        ex.cond = conditioning(m, vocab);
        ex.caption = vocab.encode(m.caption);
        ex.subimages = m.subs;
        ex.prior_global = view.global;
        ex.prior_tokens = view.map.token_level;
        ex.reference_pooled = mean_embedding(a.text, m.caption);
        data.push_back(std::move(ex));
    }
    if (data.empty()) {
        throw ValidationError("sft: no training captions");
    }
    SftContext ctx = make_sft_context(dec, a.text, a.params, cfg.train_align);
    SftTrainConfig tc;
    tc.epochs = cfg.sft_epochs;
    tc.batch_size = cfg.sft_batch;
    tc.optim = {cfg.sft_lr, 0.9, 1.0};
    tc.trainable_weights = cfg.trainable_weights;
    tc.seed = stage_seed(cfg, 9);
    const std::vector<SftLogEntry> log = train_sft(data, dec, ctx, cfg.lambda, tc,
                                                   [&](const SftLogEntry &e, const CaptionDecoder &d) {
                                                       std::ostringstream name;
                                                       name << "epoch_" << std::setw(2) << std::setfill('0')
                                                            << e.epoch << ".bin";
                                                       run.blob(name.str(), d.to_blob());
                                                   });
    std::vector<std::string> lines;
    for (const SftLogEntry &e : log) {
        lines.push_back(sft_log_line(e));
    }
    run.write("log.jsonl", lines_of(lines));
    run.blob("final.bin", dec.to_blob());
    if (cfg.train_align) {
        run.blob("align.bin", a.params.to_blob());
    }
    return run.finish("L_SFT " + fmt(log.front().l_sft) + " -> " + fmt(log.back().l_sft) + ", vocabulary " +
                      std::to_string(vocab.size()));
}

StageResult run_candidates(const PipelineConfig &cfg) {
    StageRun run(Stage::candidates, cfg);
    const AlignArtifacts a = load_align(cfg);
    const std::vector<MemeInputs> memes = meme_inputs(cfg, a);
    const fs::path final_path = stage_dir(cfg, Stage::sft) / "final.bin";
    const CaptionDecoder dec = load_decoder(final_path);
    const std::string provenance = "sft/final.bin@" + sha256_file(final_path).substr(0, 16);
    const int attempts = 4 * cfg.k;
    std::vector<StoredSet> sets(memes.size());
    parallel_for(memes.size(), cfg.workers, [&](std::size_t i) {
        const MemeInputs &m = memes[i];
        const Conditioning cond = conditioning(m, dec.vocab());
        StoredSet &s = sets[i];
        s.meme_id = m.record.id;
        s.split = std::string(to_string(m.record.split));
        s.provenance = provenance;
        std::set<std::vector<int>> seen;
        for (int t = 0; t < attempts && static_cast<int>(s.candidates.size()) < cfg.k; ++t) {
            const double temp = cfg.temperatures[static_cast<std::size_t>(t) % cfg.temperatures.size()];
            const std::uint64_t seed = stage_seed(cfg, 10) * 31ULL + i * 4099ULL + static_cast<std::uint64_t>(t);
            std::vector<int> ids = dec.generate(cond, {temp, seed});
            if (seen.insert(ids).second) {
                s.candidates.push_back({"c" + std::to_string(s.candidates.size() + 1), dec.vocab().decode(ids), temp});
            }
        }
    });
    std::vector<std::string> lines;
    std::size_t short_sets = 0;
    for (const StoredSet &s : sets) {
        short_sets += s.candidates.size() < static_cast<std::size_t>(cfg.k);
        lines.push_back(stored_set_line(s));
    }
    run.write("candidates.jsonl", lines_of(lines));
    return run.finish(std::to_string(sets.size()) + " candidate sets of up to " + std::to_string(cfg.k) + " (" +
                      std::to_string(short_sets) + " with fewer distinct captions)");
}

std::vector<QueueSet> queue_sets(const std::vector<StoredSet> &stored) {
    std::vector<QueueSet> out;
    for (const StoredSet &s : stored) {
        if (s.split != "train" || s.candidates.size() < 2) {
            continue;
        }
        QueueSet q{s.meme_id, {}, {}};
        for (const StoredCandidate &c : s.candidates) {
            q.candidate_ids.push_back(c.id);
            q.captions.push_back(join_tokens(c.tokens));
        }
        out.push_back(std::move(q));
    }
    return out;
}

QueueConfig queue_config(const PipelineConfig &cfg) {
    return {cfg.annotate_fraction, stage_seed(cfg, 11), cfg.rubric_tasks};
}

StageResult run_annotate(const PipelineConfig &cfg, bool serve) {
    StageRun run(Stage::annotate_serve, cfg, false); // the response log survives reruns
    const std::vector<QueueSet> sets = queue_sets(load_candidate_sets(cfg));
    AnnotationService service(run.dir() / "store", cfg.annotators, sets, queue_config(cfg), cfg.min_annotators);
    run.record("store/queue.json");
    if (serve) {
        std::map<std::string, fs::path> images;
        const fs::path manifest = records_path(cfg, Stage::segment);
        for (const MemeRecord &r : stage_records(cfg, Stage::segment)) {
            images[r.id] = resolve_image(manifest, r);
        }
        std::optional<fs::path> statics;
        if (!cfg.static_dir.empty()) {
            statics = cfg.static_dir;
        }
        AnnotateServer server(service, images, statics);
        std::fprintf(stderr, "annotation service on http://%s:%d (%zu tasks)\n", cfg.host.c_str(), cfg.port,
                     service.tasks().size());
        if (!server.listen(cfg.host, cfg.port)) {
            throw Error("annotation service could not bind " + cfg.host + ":" + std::to_string(cfg.port));
        }
    }
    const Progress p = service.progress();
    return run.finish(std::to_string(service.tasks().size()) + " tasks, " + std::to_string(p.completed) +
                      " responses, " + std::to_string(p.remaining) + " remaining, " +
                      std::to_string(p.pending_sets) + " sets pending");
}

StageResult run_train_reward(const PipelineConfig &cfg) {
    StageRun run(Stage::train_reward, cfg);
    const AlignArtifacts a = load_align(cfg);
    const std::vector<MemeInputs> memes = meme_inputs(cfg, a);
    const auto index = by_id(memes);
    const CaptionDecoder dec = load_decoder(stage_dir(cfg, Stage::sft) / "final.bin");
    const std::vector<StoredSet> stored = load_candidate_sets(cfg);

    std::map<std::string, PreferenceRecord> human;
    if (fs::exists(stage_dir(cfg, Stage::annotate_serve) / "run.json")) {
        AnnotationService service(stage_dir(cfg, Stage::annotate_serve) / "store", cfg.annotators,
                                  queue_sets(stored), queue_config(cfg), cfg.min_annotators);
        for (PreferenceRecord &r : service.export_preferences()) {
            human[r.meme_id] = std::move(r);
        }
    }

    std::vector<PreferenceRecord> records;
    std::map<std::string, const StoredSet *> set_of;
    for (const StoredSet &s : stored) {
        if (s.split != "train" || s.candidates.size() < 2) {
            continue;
        }
        const MemeInputs &m = *index.at(s.meme_id);
        CandidateSet cs;
        cs.meme_id = s.meme_id;
        cs.provenance = s.provenance;
        for (const StoredCandidate &c : s.candidates) {
            cs.candidates.push_back({c.id, c.tokens, meme_attention(m.subs, a.text.encode(c.tokens), a.params)});
        }
        const AttentionMap prior = meme_attention(m.subs, a.text.encode(m.caption), a.params);
        PreferenceRecord att = attention_rank(cs, prior);
        auto h = human.find(s.meme_id);
        records.push_back(h == human.end() ? att : fuse_rankings(h->second, att, cfg.human_weight));
        set_of[s.meme_id] = &s;
    }
    std::string pref_text;
    for (const PreferenceRecord &r : records) {
        pref_text += preference_line(r) + "\n";
    }
    run.write("preferences.jsonl", pref_text);

    std::vector<RankingExample> data;
    for (const PreferenceRecord &r : usable_preferences(records)) {
        const StoredSet &s = *set_of.at(r.meme_id);
        RankingExample ex{r.meme_id, conditioning(*index.at(r.meme_id), dec.vocab()), {}};
        for (const std::string &id : r.ordering) {
            for (const StoredCandidate &c : s.candidates) {
                if (c.id == id) {
                    ex.ordered.push_back(dec.vocab().encode(c.tokens));
                }
            }
        }
        data.push_back(std::move(ex));
    }
    RewardModel model(dec, stage_seed(cfg, 12));
    RewardTrainConfig tc;
    tc.steps = cfg.reward_steps;
    tc.batch_size = cfg.reward_batch;
    tc.optim = {cfg.reward_lr, 0.9, 1.0};
    tc.seed = stage_seed(cfg, 13);
    const std::vector<double> losses = train_reward(data, model, tc);
    std::vector<std::string> lines;
    for (std::size_t i = 0; i < losses.size(); ++i) {
        json j;
        j["step"] = i + 1;
        j["L_r"] = losses[i];
        lines.push_back(j.dump());
    }
    run.write("log.jsonl", lines_of(lines));
    run.blob("reward.bin", model.to_blob());
    const double acc = pairwise_accuracy(model, data);
    return run.finish(std::to_string(data.size()) + " preference records (" + std::to_string(human.size()) +
                      " human), L_r " + fmt(losses.front()) + " -> " + fmt(losses.back()) +
                      ", training pair accuracy " + fmt(acc, 3));
}

StageResult run_rl(const PipelineConfig &cfg) {
    StageRun run(Stage::rl, cfg);
    const AlignArtifacts a = load_align(cfg);
    const std::vector<MemeInputs> memes = meme_inputs(cfg, a);
    PolicyPair pair = PolicyPair::from_reference(load_decoder(stage_dir(cfg, Stage::sft) / "final.bin"));
    const RewardModel reward = RewardModel::from_blob(load_blob(stage_dir(cfg, Stage::train_reward) / "reward.bin"));
    std::vector<Conditioning> corpus;
    for (const MemeInputs &m : memes) {
        if (m.record.split == Split::train) {
            corpus.push_back(conditioning(m, pair.policy.vocab()));
        }
    }
    RlTrainConfig tc;
    tc.steps = cfg.rl_steps;
    tc.samples_per_step = cfg.rl_samples;
    tc.temperature = cfg.rl_temperature;
    tc.optim = {cfg.rl_lr, 0.9, 1.0};
    tc.objective.weights = cfg.w;
    tc.objective.divergence_bonus = cfg.divergence_bonus;
    tc.kl_ceiling = cfg.kl_ceiling;
    tc.seed = stage_seed(cfg, 14);
    const std::vector<RlLogEntry> log = rl_train(corpus, pair, reward, tc);
    std::vector<std::string> lines;
    for (const RlLogEntry &e : log) {
        lines.push_back(rl_log_line(e));
    }
    run.write("log.jsonl", lines_of(lines));
    run.blob("policy.bin", pair.policy.to_blob());
    if (log.empty()) {
        return run.finish("0 steps; policy equals the SFT decoder");
    }
    auto j = [](const RlLogEntry &e) { return e.j; };
    auto kl = [](const RlLogEntry &e) { return e.mean_kl; };
    return run.finish("J " + fmt(window_mean(log, 20, false, j)) + " -> " + fmt(window_mean(log, 20, true, j)) +
                      " (20-step means), mean KL " + fmt(window_mean(log, 20, true, kl)));
}

/// Rubric ratings: one JSON object per line, {"meme_id", "scores": [Info, Rele, Crea, Humo]} on the 1-5 scale.
std::map<std::string, std::array<double, 4>> load_rubric(const fs::path &p) {
    std::map<std::string, std::array<double, 4>> sum;
    std::map<std::string, int> count;
    for (const std::string &line : read_lines(p)) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception &e) {
            throw ValidationError("rubric file: " + std::string(e.what()));
        }
        const auto s = j.at("scores").get<std::vector<int>>();
        if (s.size() != 4) {
            throw ValidationError("rubric file: scores need four entries");
        }
        const ScaledRubric r = rubric_scale({s[0], s[1], s[2], s[3]});
        auto &acc = sum[j.at("meme_id").get<std::string>()];
        acc[0] += r.informativeness;
        acc[1] += r.relevance;
        acc[2] += r.creativity;
        acc[3] += r.humor;
        ++count[j.at("meme_id").get<std::string>()];
    }
    for (auto &[id, acc] : sum) {
        for (double &v : acc) {
            v /= count[id];
        }
    }
    return sum;
}

StageResult run_evaluate(const PipelineConfig &cfg) {
    const std::string hash = cfg.hash();
    for (Stage s : {Stage::ingest, Stage::segment, Stage::augment, Stage::align, Stage::sft, Stage::candidates,
                    Stage::train_reward, Stage::rl}) {
        const RunManifest m = read_run_manifest(cfg, s);
        if (m.config_hash != hash && !cfg.force) {
            throw ValidationError("stage '" + std::string(to_string(s)) + "' was produced under config " +
                                  m.config_hash.substr(0, 12) + " but the current config is " + hash.substr(0, 12) +
                                  "; rerun it or pass --force");
        }
    }
    StageRun run(Stage::evaluate, cfg);
    const AlignArtifacts a = load_align(cfg);
    const std::vector<MemeInputs> memes = meme_inputs(cfg, a);
    const CaptionDecoder policy = load_decoder(stage_dir(cfg, Stage::rl) / "policy.bin");
    std::vector<const MemeInputs *> test;
    for (const MemeInputs &m : memes) {
        if (m.record.split == Split::test) {
            test.push_back(&m);
        }
    }
    if (test.empty()) {
        throw ValidationError("evaluate: the corpus has no test records");
    }
    std::map<std::string, std::array<double, 4>> rubric;
    if (!cfg.rubric_file.empty()) {
        run.input_file("rubric", cfg.rubric_file);
        rubric = load_rubric(cfg.rubric_file);
    }
    std::vector<std::string> ids, structures;
    std::vector<Tokens> cands(test.size()), refs;
    std::vector<std::optional<std::array<double, 4>>> ratings;
    parallel_for(test.size(), cfg.workers, [&](std::size_t i) {
        cands[i] = policy.vocab().decode(policy.generate(conditioning(*test[i], policy.vocab()), {0.0, 0}));
    });
    for (const MemeInputs *m : test) {
        ids.push_back(m->record.id);
        structures.push_back(std::string(to_string(m->record.structure)));
        refs.push_back(m->caption);
        auto it = rubric.find(m->record.id);
        ratings.push_back(it == rubric.end() ? std::nullopt : std::optional(it->second));
    }
    const EvaluationReport report = evaluate_captions(ids, structures, cands, refs, ratings, hash);
    run.write("report.jsonl", report.to_lines());
    run.write("report.csv", report.to_csv());
    json summary = json::object();
    for (const ReportSummary &s : report.summaries) {
        summary[s.label] = summary_metrics(s);
    }
    run.write("summary.json", summary.dump(2) + "\n");
    const ReportSummary &all = report.summaries.front();
    std::string line = std::to_string(all.count) + " held-out memes, MAverage " + fmt(all.composite.maverage, 2);
    if (all.composite.average) {
        line += ", HAverage " + fmt(*all.composite.haverage, 2) + ", Average " + fmt(*all.composite.average, 2);
    }
    return run.finish(line);
}

StageResult run_heatmap(const PipelineConfig &cfg) {
    StageRun run(Stage::heatmap, cfg);
    const AlignArtifacts a = load_align(cfg);
    const std::vector<MemeInputs> memes = meme_inputs(cfg, a);
    HeatmapOptions opt;
    opt.grid = a.visual.grid();
    opt.opacity = cfg.heatmap_opacity;
    std::size_t written = 0;
    for (const MemeInputs &m : memes) {
        if (written == static_cast<std::size_t>(cfg.heatmap_limit)) {
            break;
        }
        if (m.caption.empty()) {
            continue;
        }
        const TokenFeatures tf = a.text.encode(m.caption);
        std::vector<AttentionMap> maps;
        for (const AreaFeatures &sub : m.subs) {
            auto [mp, tp] = project(sub, tf, a.params);
            maps.push_back(attention_similarity(mp, tp, a.params));
        }
        const std::size_t token = std::min<std::size_t>(static_cast<std::size_t>(cfg.heatmap_token), m.caption.size() - 1);
        const std::string rel = m.record.id + "_t" + std::to_string(token) + ".ppm";
        run.write(rel, encode_ppm(render_heatmap(maps, m.image, m.record.rois, token, opt)));
        ++written;
    }
    return run.finish(std::to_string(written) + " heatmaps for token " + std::to_string(cfg.heatmap_token));
}

} // namespace

std::map<std::string, double> summary_metrics(const ReportSummary &s) {
    std::map<std::string, double> m;
    const char *an[] = {"BLEU", "ROUGE", "CIDEr", "METEOR"};
    for (std::size_t i = 0; i < 4; ++i) {
        m[an[i]] = s.automatic[i];
    }
    m["MAverage"] = s.composite.maverage;
    if (s.human) {
        const char *hn[] = {"Info", "Rele", "Crea", "Humo"};
        for (std::size_t i = 0; i < 4; ++i) {
            m[hn[i]] = (*s.human)[i];
        }
    }
    if (s.composite.haverage) {
        m["HAverage"] = *s.composite.haverage;
    }
    if (s.composite.average) {
        m["Average"] = *s.composite.average;
    }
    return m;
}

StageResult run_stage(Stage s, const PipelineConfig &cfg) {
    cfg.validate();
    switch (s) {
    case Stage::ingest:
        return run_ingest(cfg);
    case Stage::segment:
        return run_segment(cfg);
    case Stage::augment:
        return run_augment(cfg);
    case Stage::align:
        return run_align(cfg);
    case Stage::sft:
        return run_sft(cfg);
    case Stage::candidates:
        return run_candidates(cfg);
    case Stage::annotate_serve:
        return run_annotate(cfg, cfg.serve);
    case Stage::train_reward:
        return run_train_reward(cfg);
    case Stage::rl:
        return run_rl(cfg);
    case Stage::evaluate:
        return run_evaluate(cfg);
    case Stage::heatmap:
        return run_heatmap(cfg);
    }
    throw Error("unknown stage");
}

std::vector<StageResult> run_all(const PipelineConfig &cfg) {
    PipelineConfig quiet = cfg;
    quiet.serve = false;
    std::vector<StageResult> out;
    for (Stage s : all_stages()) {
        out.push_back(run_stage(s, quiet));
    }
    return out;
}

std::string GridResult::table() const {
    std::string out;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const GridRow &r = rows[i];
        json j;
        j["row"] = i;
        j["lambda_ori"] = r.lambda.ori;
        j["lambda_t"] = r.lambda.t;
        j["lambda_g"] = r.lambda.g;
        j["w1"] = r.w.w1;
        j["w2"] = r.w.w2;
        j["objective"] = r.objective;
        j["metrics"] = r.metrics;
        j["best"] = i == best;
        out += j.dump() + "\n";
    }
    return out;
}

GridResult grid_search(const PipelineConfig &base, const std::vector<SftWeights> &lambdas,
                       const std::vector<RlWeights> &ws, const std::string &objective, GridRunner runner) {
    if (lambdas.empty() || ws.empty()) {
        throw ValidationError("grid: empty grid");
    }
    for (const SftWeights &l : lambdas) {
        l.validate();
    }
    for (const RlWeights &w : ws) {
        w.validate();
    }
    if (!runner) {
        runner = [](const PipelineConfig &cfg) {
            run_all(cfg);
            const auto j = nlohmann::json::parse(read_file(stage_dir(cfg, Stage::evaluate) / "summary.json"));
            return j.at("all").get<std::map<std::string, double>>();
        };
    }
    GridResult result;
    std::size_t n = 0;
    for (const SftWeights &l : lambdas) {
        for (const RlWeights &w : ws) {
            PipelineConfig cfg = base;
            cfg.lambda = l;
            cfg.w = w;
            std::ostringstream name;
            name << "run_" << std::setw(2) << std::setfill('0') << n++;
            cfg.data_dir = base.data_dir / "grid" / name.str();
            GridRow row{l, w, runner(cfg), 0.0};
            auto it = row.metrics.find(objective);
            if (it == row.metrics.end()) {
                throw ValidationError("grid: objective '" + objective +
                                      "' is not produced by evaluate for this configuration");
            }
            row.objective = it->second;
            if (result.rows.empty() || row.objective > result.rows[result.best].objective) {
                result.best = result.rows.size();
            }
            result.rows.push_back(std::move(row));
        }
    }
    return result;
}

} // namespace memecap
