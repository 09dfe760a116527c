#include "memecap/config.hpp"

#include "memecap/error.hpp"
#include "memecap/io.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cmath>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>

namespace memecap {

namespace {

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) {
        return "";
    }
    return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

std::vector<std::string> split(const std::string &s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) {
        cur = trim(cur);
        if (!cur.empty()) {
            out.push_back(cur);
        }
    }
    return out;
}

double to_double(const std::string &key, const std::string &v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) {
            throw std::invalid_argument(v);
        }
        return x;
    } catch (const std::exception &) {
        throw ValidationError("config: " + key + " expects a number, got '" + v + "'");
    }
}

int to_int(const std::string &key, const std::string &v) {
    const double x = to_double(key, v);
    if (x != std::floor(x) || std::abs(x) > 1e9) {
        throw ValidationError("config: " + key + " expects an integer, got '" + v + "'");
    }
    return static_cast<int>(x);
}

bool to_bool(const std::string &key, const std::string &v) {
    if (v == "true" || v == "1" || v == "yes") {
        return true;
    }
    if (v == "false" || v == "0" || v == "no") {
        return false;
    }
    throw ValidationError("config: " + key + " expects true/false, got '" + v + "'");
}

std::string fmt(double x) {
    std::ostringstream o;
    o << std::setprecision(17) << x;
    return o.str();
}

std::vector<std::vector<double>> tuples(const std::string &key, const std::string &v, std::size_t arity) {
    std::vector<std::vector<double>> out;
    for (const std::string &t : split(v, ';')) {
        std::vector<double> xs;
        for (const std::string &x : split(t, ',')) {
            xs.push_back(to_double(key, x));
        }
        if (xs.size() != arity) {
            throw ValidationError("config: " + key + " entries need " + std::to_string(arity) + " values");
        }
        out.push_back(xs);
    }
    return out;
}

struct Field {
    std::function<void(PipelineConfig &, const std::string &)> set;
    std::function<std::string(const PipelineConfig &)> get;
    bool hashed = true;
};

#define MC_INT(member)                                                                                                 \
    Field {                                                                                                            \
        [](PipelineConfig &c, const std::string &v) { c.member = to_int(#member, v); },                                \
            [](const PipelineConfig &c) { return std::to_string(c.member); }                                           \
    }
#define MC_DBL(member)                                                                                                 \
    Field {                                                                                                            \
        [](PipelineConfig &c, const std::string &v) { c.member = to_double(#member, v); },                             \
            [](const PipelineConfig &c) { return fmt(c.member); }                                                      \
    }
#define MC_BOOL(member)                                                                                                \
    Field {                                                                                                            \
        [](PipelineConfig &c, const std::string &v) { c.member = to_bool(#member, v); },                               \
            [](const PipelineConfig &c) { return std::string(c.member ? "true" : "false"); }                           \
    }
#define MC_STR(member)                                                                                                 \
    Field {                                                                                                            \
        [](PipelineConfig &c, const std::string &v) { c.member = v; }, [](const PipelineConfig &c) {                   \
            return std::string(c.member);                                                                              \
        }                                                                                                              \
    }

Field unhashed(Field f) {
    f.hashed = false;
    return f;
}

const std::map<std::string, Field> &fields() {
    static const std::map<std::string, Field> table = [] {
        std::map<std::string, Field> t;
        t["paths.data_dir"] = unhashed(MC_STR(data_dir));
        t["paths.manifest"] = unhashed(MC_STR(manifest));
        t["run.seed"] = {[](PipelineConfig &c, const std::string &v) {
                             const int s = to_int("seed", v);
                             if (s < 0) {
                                 throw ValidationError("config: seed must be non-negative");
                             }
                             c.seed = static_cast<std::uint64_t>(s);
                         },
                         [](const PipelineConfig &c) { return std::to_string(c.seed); }};
        t["run.synth_size"] = MC_INT(synth_size);
        t["run.workers"] = unhashed(MC_INT(workers));
        t["stage.segment.mode"] = {[](PipelineConfig &c, const std::string &v) {
                                       if (v != "auto" && v != "manual") {
                                           throw ValidationError("config: segment mode must be auto or manual");
                                       }
                                       c.segment_auto = v == "auto";
                                   },
                                   [](const PipelineConfig &c) { return std::string(c.segment_auto ? "auto" : "manual"); }};
        t["stage.segment.threshold"] = MC_DBL(segment_threshold);
        t["stage.segment.min_thickness"] = MC_INT(segment_min_thickness);
        t["stage.augment.variants"] = MC_INT(augment_variants);
        t["stage.augment.paraphrase_table"] = unhashed(MC_STR(paraphrase_table)); // contents are hashed per run
        t["stage.align.d"] = MC_INT(d);
        t["stage.align.d_k"] = MC_INT(d_k);
        t["stage.align.grid"] = MC_INT(grid);
        t["stage.align.tau"] = MC_DBL(tau);
        t["stage.align.epochs"] = MC_INT(align_epochs);
        t["stage.align.batch"] = MC_INT(align_batch);
        t["stage.align.learning_rate"] = MC_DBL(align_lr);
        t["stage.align.scope"] = {[](PipelineConfig &c, const std::string &v) {
                                      if (v != "tokens" && v != "captions") {
                                          throw ValidationError("config: align scope must be tokens or captions");
                                      }
                                      c.align_caption_scope = v == "captions";
                                  },
                                  [](const PipelineConfig &c) {
                                      return std::string(c.align_caption_scope ? "captions" : "tokens");
                                  }};
        t["stage.sft.lambda_ori"] = MC_DBL(lambda.ori);
        t["stage.sft.lambda_g"] = MC_DBL(lambda.g);
        t["stage.sft.lambda_t"] = MC_DBL(lambda.t);
        t["stage.sft.epochs"] = MC_INT(sft_epochs);
        t["stage.sft.batch"] = MC_INT(sft_batch);
        t["stage.sft.learning_rate"] = MC_DBL(sft_lr);
        t["stage.sft.max_length"] = MC_INT(max_length);
        t["stage.sft.width"] = MC_INT(decoder_width);
        t["stage.sft.layers"] = MC_INT(decoder_layers);
        t["stage.sft.trainable_weights"] = MC_BOOL(trainable_weights);
        t["stage.sft.train_align"] = MC_BOOL(train_align);
        t["stage.sft.baseline_prompt"] = MC_STR(baseline_prompt);
        t["stage.sft.baseline_mode"] = MC_BOOL(baseline_mode);
        t["stage.candidates.k"] = MC_INT(k);
        t["stage.candidates.temperatures"] = {[](PipelineConfig &c, const std::string &v) {
                                                  c.temperatures.clear();
                                                  for (const std::string &x : split(v, ',')) {
                                                      c.temperatures.push_back(to_double("temperatures", x));
                                                  }
                                              },
                                              [](const PipelineConfig &c) {
                                                  std::string s;
                                                  for (double x : c.temperatures) {
                                                      s += (s.empty() ? "" : ",") + fmt(x);
                                                  }
                                                  return s;
                                              }};
        t["stage.annotate.fraction"] = MC_DBL(annotate_fraction);
        t["stage.annotate.annotators"] = {[](PipelineConfig &c, const std::string &v) { c.annotators = split(v, ','); },
                                          [](const PipelineConfig &c) {
                                              std::string s;
                                              for (const std::string &a : c.annotators) {
                                                  s += (s.empty() ? "" : ",") + a;
                                              }
                                              return s;
                                          }};
        t["stage.annotate.min_annotators"] = MC_INT(min_annotators);
        t["stage.annotate.rubric_tasks"] = MC_BOOL(rubric_tasks);
        t["stage.annotate.serve"] = unhashed(MC_BOOL(serve));
        t["stage.annotate.host"] = unhashed(MC_STR(host));
        t["stage.annotate.port"] = unhashed(MC_INT(port));
        t["stage.annotate.static_dir"] = unhashed(MC_STR(static_dir));
        t["stage.annotate.human_weight"] = MC_DBL(human_weight);
        t["stage.reward.steps"] = MC_INT(reward_steps);
        t["stage.reward.batch"] = MC_INT(reward_batch);
        t["stage.reward.learning_rate"] = MC_DBL(reward_lr);
        t["stage.rl.w1"] = MC_DBL(w.w1);
        t["stage.rl.w2"] = MC_DBL(w.w2);
        t["stage.rl.steps"] = MC_INT(rl_steps);
        t["stage.rl.samples"] = MC_INT(rl_samples);
        t["stage.rl.temperature"] = MC_DBL(rl_temperature);
        t["stage.rl.learning_rate"] = MC_DBL(rl_lr);
        t["stage.rl.kl_ceiling"] = MC_DBL(kl_ceiling);
        t["stage.rl.divergence_bonus"] = MC_BOOL(divergence_bonus);
        t["stage.evaluate.rubric_file"] = unhashed(MC_STR(rubric_file));
        t["stage.evaluate.force"] = unhashed(MC_BOOL(force));
        t["stage.heatmap.limit"] = MC_INT(heatmap_limit);
        t["stage.heatmap.token"] = MC_INT(heatmap_token);
        t["stage.heatmap.opacity"] = MC_DBL(heatmap_opacity);
        t["grid.lambda"] = unhashed({[](PipelineConfig &c, const std::string &v) {
                                         c.grid_lambda.clear();
                                         for (const auto &x : tuples("grid.lambda", v, 3)) {
                                             c.grid_lambda.push_back({x[0], x[2], x[1]}); // written (ori, t, g)
                                         }
                                     },
                                     [](const PipelineConfig &) { return std::string(); }});
        t["grid.w"] = unhashed({[](PipelineConfig &c, const std::string &v) {
                                    c.grid_w.clear();
                                    for (const auto &x : tuples("grid.w", v, 2)) {
                                        c.grid_w.push_back({x[0], x[1]});
                                    }
                                },
                                [](const PipelineConfig &) { return std::string(); }});
        t["grid.objective"] = unhashed(MC_STR(grid_objective));
        return t;
    }();
    return table;
}

#undef MC_INT
#undef MC_DBL
#undef MC_BOOL
#undef MC_STR

} // namespace

std::vector<SftWeights> default_lambda_grid() { return {{0.4, 0.2, 0.4}, {0.5, 0.2, 0.3}, {0.6, 0.2, 0.2}}; }

std::vector<RlWeights> default_w_grid() { return {{0.5, 0.5}, {0.4, 0.6}, {0.6, 0.4}}; }

void PipelineConfig::validate() const {
    lambda.validate();
    w.validate();
    auto need = [](bool ok, const std::string &msg) {
        if (!ok) {
            throw ValidationError("config: " + msg);
        }
    };
    need(synth_size >= 2, "synth_size must be at least 2");
    need(workers >= 1, "workers must be at least 1");
    need(segment_threshold > 0.0 && segment_min_thickness >= 1, "invalid segmentation settings");
    need(augment_variants >= 0, "augment variants must be non-negative");
    need(d >= 1 && d_k >= 1 && grid >= 1, "d, d_k and grid must be positive");
    need(tau > 0.0, "tau must be positive");
    need(align_epochs >= 1 && sft_epochs >= 1, "epochs must be at least 1");
    need(align_batch >= 2, "align batch needs at least two memes");
    need(sft_batch >= 1 && reward_batch >= 1, "batch sizes must be positive");
    need(align_lr > 0.0 && sft_lr > 0.0 && reward_lr > 0.0 && rl_lr > 0.0, "learning rates must be positive");
    need(max_length >= kMaxCaptionTokens, "max_length must be at least " + std::to_string(kMaxCaptionTokens));
    need(decoder_width >= 1 && decoder_layers >= 1, "invalid decoder shape");
    need(k >= 2, "candidate count k must be at least 2");
    need(!temperatures.empty(), "at least one sampling temperature is required");
    for (double t : temperatures) {
        need(t >= 0.0, "temperatures must be non-negative");
    }
    need(annotate_fraction > 0.0 && annotate_fraction <= 1.0, "annotation fraction must lie in (0, 1]");
    need(!annotators.empty(), "at least one annotator is required");
    need(min_annotators >= 1, "min_annotators must be positive");
    need(human_weight >= 0.0 && human_weight <= 1.0, "human_weight must lie in [0, 1]");
    need(reward_steps >= 1 && rl_steps >= 0 && rl_samples >= 1, "invalid step counts");
    need(rl_temperature > 0.0, "RL sampling temperature must be positive");
    need(kl_ceiling > 0.0, "kl_ceiling must be positive");
    need(heatmap_limit >= 0 && heatmap_token >= 0, "invalid heatmap settings");
    need(heatmap_opacity >= 0.0 && heatmap_opacity <= 1.0, "heatmap opacity must lie in [0, 1]");
    for (const SftWeights &g : grid_lambda) {
        g.validate();
    }
    for (const RlWeights &g : grid_w) {
        g.validate();
    }
}

std::string PipelineConfig::canonical() const {
    std::string out;
    for (const auto &[key, f] : fields()) {
        if (f.hashed) {
            out += key + "=" + f.get(*this) + "\n";
        }
    }
    return out;
}

std::string PipelineConfig::hash() const { return sha256_hex(canonical()); }

PipelineConfig parse_config(std::string_view text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in{std::string(text)};
    try {
        pt::ini_parser::read_ini(in, tree);
    } catch (const pt::ini_parser_error &e) {
        throw ValidationError(std::string("config: ") + e.what());
    }
    PipelineConfig c;
    for (const auto &[section, body] : tree) {
        if (body.empty() && !body.data().empty()) {
            throw ValidationError("config: key '" + section + "' outside a section");
        }
        for (const auto &[key, value] : body) {
            const std::string full = section + "." + key;
            auto it = fields().find(full);
            if (it == fields().end()) {
                throw ValidationError("config: unknown setting [" + section + "] " + key);
            }
            std::string v = value.data();
            if (const auto hash = v.find_first_of("#"); hash != std::string::npos && hash > 0 &&
                                                        (v[hash - 1] == ' ' || v[hash - 1] == '\t')) {
                v.erase(hash); // trailing comment
            }
            it->second.set(c, trim(v));
        }
    }
    c.validate();
    return c;
}

PipelineConfig load_config(const std::filesystem::path &path) {
    PipelineConfig c;
    try {
        c = parse_config(read_file(path));
    } catch (const ValidationError &) {
        throw;
    } catch (const Error &e) {
        throw ValidationError("config: cannot read " + path.string() + ": " + e.what());
    }
    c.config_file = path;
    if (!c.data_dir.is_absolute()) {
        c.data_dir = path.parent_path() / c.data_dir;
    }
    if (!c.manifest.empty() && !c.manifest.is_absolute()) {
        c.manifest = path.parent_path() / c.manifest;
    }
    for (auto *p : {&c.rubric_file, &c.paraphrase_table, &c.static_dir}) {
        if (!p->empty() && !p->is_absolute()) {
            *p = path.parent_path() / *p;
        }
    }
    return c;
}

} // namespace memecap
