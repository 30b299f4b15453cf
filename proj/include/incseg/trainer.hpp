#pragma once

// Training pipeline: fully supervised base task, then per incremental step a
// two-phase procedure. Phase 1 fine-tunes an extended-head copy of the
// previous model on the few shots under cross-entropy plus distillation
// against the frozen previous model. Phase 2 retrieves scene neighbors from
// the unlabeled pool, pseudo-labels them with the phase-1 model, and retrains
// on the merged collection with all objective terms.
//
// Everything here is deterministic in (config, inputs): RNG streams are
// derived from the config seed per stage, data order is fixed by explicit
// shuffles, and no wall-clock value feeds any computation (it is reported,
// never consumed).

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "incseg/common.hpp"
#include "incseg/dataset.hpp"
#include "incseg/embedder.hpp"
#include "incseg/evaluation.hpp"
#include "incseg/losses.hpp"
#include "incseg/network.hpp"
#include "incseg/pseudolabel.hpp"
#include "incseg/retrieval.hpp"
#include "incseg/rng.hpp"
#include "incseg/schedule.hpp"

namespace incseg {

/// Where phase-2 retraining starts from: a fresh head extension of the
/// previous model (default), or the phase-1 model as-is.
enum class RetrainInit { previous, continue_phase1 };

struct TrainConfig {
    int base_epochs = 30;
    int phase1_epochs = 20;
    int phase2_epochs = 20;
    double lr = 1e-2;        // constant; no schedule
    double momentum = 0.9;
    int batch_size = 4;
    std::uint64_t seed = 1;
    bool hflip = true;       // the only augmentation
    double tau = 0.5;        // pseudo-label confidence gate
    int k_neighbors = 10;    // K per few-shot query
    LossWeights weights;
    RetrainInit retrain_init = RetrainInit::previous;
    PseudoMode pseudo_mode = PseudoMode::hard;

    // Epoch counts may be zero so ablations can switch a phase off wholesale;
    // everything else must be genuinely usable.
    void validate() const {
        if (base_epochs < 0 || phase1_epochs < 0 || phase2_epochs < 0) {
            throw ConfigError("epoch counts must be non-negative");
        }
        if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
        if (batch_size < 1) throw ConfigError("batch size must be at least 1");
        if (!(tau >= 0.0 && tau < 1.0)) throw ConfigError("confidence threshold must lie in [0, 1)");
        if (k_neighbors < 1) throw ConfigError("k-neighbors must be at least 1");
        if (weights.fewshot_ce < 0.0 || weights.pseudo_ce < 0.0 || weights.kd < 0.0) {
            throw ConfigError("loss multipliers must be non-negative");
        }
    }
};

struct EpochLoss {
    int epoch = 0;  // 1-based
    double value = 0.0;
};

struct PhaseReport {
    std::vector<EpochLoss> epochs;
};

struct TrainResult {
    SegmentationModel model;
    PhaseReport report;
};

namespace detail {

inline constexpr std::uint64_t kBaseTrainStream = 0xba5eULL;
inline constexpr std::uint64_t kHeadSeedStream = 0x0e07ULL;

inline std::uint64_t phase_stream(int t, int phase) {
    return 0x9a5e0000ULL + static_cast<std::uint64_t>(t) * 16 + static_cast<std::uint64_t>(phase);
}

inline Image hflip_image(const Image& in) {
    Image out(in.height, in.width);
    for (int y = 0; y < in.height; ++y) {
        for (int x = 0; x < in.width; ++x) {
            for (int ch = 0; ch < 3; ++ch) out.at(y, x, ch) = in.at(y, in.width - 1 - x, ch);
        }
    }
    return out;
}

inline LabelMap hflip_labels(const LabelMap& in) {
    LabelMap out(in.height, in.width);
    for (int y = 0; y < in.height; ++y) {
        for (int x = 0; x < in.width; ++x) {
            out.values[static_cast<std::size_t>(y) * in.width + x] =
                in.values[static_cast<std::size_t>(y) * in.width + (in.width - 1 - x)];
        }
    }
    return out;
}

/// Lightweight view onto a training element; sources route its CE term.
struct TrainView {
    const Image* image = nullptr;
    const LabelMap* labels = nullptr;
    SampleSource source = SampleSource::fewshot;
};

inline std::vector<TrainView> views_of(const std::vector<LabeledSample>& items) {
    std::vector<TrainView> v;
    v.reserve(items.size());
    for (const auto& s : items) v.push_back(TrainView{&s.image, &s.labels, SampleSource::fewshot});
    return v;
}

inline std::vector<TrainView> views_of(const std::vector<AugmentedItem>& items) {
    std::vector<TrainView> v;
    v.reserve(items.size());
    for (const auto& s : items) v.push_back(TrainView{&s.image, &s.labels, s.source});
    return v;
}

/// Teacher probabilities per (item, orientation), computed once. The teacher
/// never changes within a phase, so caching cannot alter any result.
class TeacherCache {
public:
    explicit TeacherCache(const SegmentationModel* teacher) : teacher_(teacher) {}

    const ProbMap& probs(std::size_t item, bool flipped, const Image& input) {
        const auto key = std::make_pair(item, flipped);
        auto it = cache_.find(key);
        if (it == cache_.end()) it = cache_.emplace(key, teacher_->forward(input)).first;
        return it->second;
    }

private:
    const SegmentationModel* teacher_;
    std::map<std::pair<std::size_t, bool>, ProbMap> cache_;
};

/// One phase of SGD with momentum. The logged per-epoch loss is the mean
/// objective over the unaugmented items under the post-epoch parameters, so
/// the last entry is recomputable offline from the returned model.
inline PhaseReport train_on_set(SegmentationModel& model, const SegmentationModel* teacher,
                                const std::vector<TrainView>& items, const TaskSchedule& schedule, int t,
                                const TrainConfig& cfg, int epochs, Rng& rng) {
    if (items.empty()) throw DataError("training needs at least one sample");
    PhaseReport report;
    const bool distill = teacher != nullptr && cfg.weights.kd != 0.0;
    TeacherCache teacher_probs(distill ? teacher : nullptr);

    std::vector<std::size_t> order(items.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<double> grads(model.param_count(), 0.0);
    std::vector<double> velocity(model.param_count(), 0.0);

    for (int epoch = 1; epoch <= epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::fill(grads.begin(), grads.end(), 0.0);
            for (std::size_t i = start; i < end; ++i) {
                const TrainView& item = items[order[i]];
                const bool flip = cfg.hflip && rng.bernoulli(0.5);
                Image flipped_image;
                LabelMap flipped_labels;
                if (flip) {
                    flipped_image = hflip_image(*item.image);
                    flipped_labels = hflip_labels(*item.labels);
                }
                const Image& input = flip ? flipped_image : *item.image;
                const LabelMap& labels = flip ? flipped_labels : *item.labels;

                ForwardTrace trace;
                const Tensor3 logits = model.forward_logits(input, trace);
                const ProbMap probs = softmax_probmap(logits);
                const ProbMap* tp = distill ? &teacher_probs.probs(order[i], flip, input) : nullptr;
                const LossResult r = total_objective(probs, tp, labels, item.source, schedule, t, cfg.weights);
                model.backward(trace, r.grad_logits, grads);
            }
            const double inv = 1.0 / static_cast<double>(end - start);
            for (std::size_t k = 0; k < velocity.size(); ++k) {
                velocity[k] = cfg.momentum * velocity[k] + grads[k] * inv;
            }
            model.add_scaled(velocity, -cfg.lr);
        }

        double sum = 0.0;
        for (std::size_t i = 0; i < items.size(); ++i) {
            const ProbMap probs = model.forward(*items[i].image);
            const ProbMap* tp = distill ? &teacher_probs.probs(i, false, *items[i].image) : nullptr;
            sum += total_objective(probs, tp, *items[i].labels, items[i].source, schedule, t, cfg.weights).value;
        }
        report.epochs.push_back(EpochLoss{epoch, sum / static_cast<double>(items.size())});
    }
    return report;
}

/// The extended-head student both phases start from. Derived from the config
/// seed and step only, so phase 2 under the default policy resumes from the
/// exact same initialization phase 1 saw.
inline SegmentationModel initial_student(const SegmentationModel& teacher, const TaskSchedule& schedule, int t,
                                         const TrainConfig& cfg) {
    if (t < 2 || t > schedule.task_count()) {
        throw UsageError("incremental step " + std::to_string(t) + " outside schedule of " +
                         std::to_string(schedule.task_count()) + " task(s)");
    }
    if (teacher.step() != t - 1) {
        throw UsageError("previous model is at step " + std::to_string(teacher.step()) + ", expected " +
                         std::to_string(t - 1));
    }
    const int expected = static_cast<int>(schedule.classes_up_to(t - 1).ids().size());
    if (teacher.class_count() != expected) {
        throw UsageError("previous model emits " + std::to_string(teacher.class_count()) + " classes, schedule has " +
                         std::to_string(expected) + " up to step " + std::to_string(t - 1));
    }
    const int added = static_cast<int>(schedule.task_classes(t).ids().size());
    return extend_head(teacher, added, mix_seed(cfg.seed, kHeadSeedStream + static_cast<std::uint64_t>(t)));
}

}  // namespace detail

/// Fully supervised training of the base task. Cross-entropy is masked to
/// the base classes, so ground truth may mention later classes harmlessly.
inline TrainResult train_base(const ArchConfig& arch, const TaskSchedule& schedule,
                              const std::vector<LabeledSample>& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.empty()) throw DataError("base training needs at least one labeled sample");
    SegmentationModel model(arch, static_cast<int>(schedule.task_classes(1).ids().size()), cfg.seed);
    Rng rng(mix_seed(cfg.seed, detail::kBaseTrainStream));
    PhaseReport report =
        detail::train_on_set(model, nullptr, detail::views_of(data), schedule, 1, cfg, cfg.base_epochs, rng);
    return TrainResult{std::move(model), std::move(report)};
}

/// Phase 1 of an incremental step: extend the previous model's head and
/// fine-tune on the few shots under CE plus distillation. The teacher is
/// taken by const reference and never modified.
inline TrainResult train_increment_initial(const SegmentationModel& teacher, const TaskSchedule& schedule, int t,
                                           const FewShotSet& fewshot, const TrainConfig& cfg) {
    cfg.validate();
    SegmentationModel student = detail::initial_student(teacher, schedule, t, cfg);
    if (fewshot.task_index != t) {
        throw UsageError("few-shot set belongs to step " + std::to_string(fewshot.task_index) + ", training step " +
                         std::to_string(t));
    }
    if (!(fewshot.classes == schedule.task_classes(t))) {
        throw UsageError("few-shot class set does not match the schedule at step " + std::to_string(t));
    }
    if (fewshot.items.empty()) throw DataError("incremental training needs at least one few-shot sample");

    Rng rng(mix_seed(cfg.seed, detail::phase_stream(t, 1)));
    const SegmentationModel* tp = cfg.weights.kd != 0.0 ? &teacher : nullptr;
    PhaseReport report =
        detail::train_on_set(student, tp, detail::views_of(fewshot.items), schedule, t, cfg, cfg.phase1_epochs, rng);
    return TrainResult{std::move(student), std::move(report)};
}

struct StepReport {
    int step = 0;
    PhaseReport phase1;
    PhaseReport phase2;
    bool degraded = false;   // empty pool: retrieval and pseudo-labeling skipped
    bool k_clamped = false;
    std::vector<int> neighbor_ids;  // union N^t, sorted
    int pseudo_items = 0;
    double pseudo_coverage = 0.0;
    std::string phase1_model_hash;
    std::string final_model_hash;
    double wall_seconds = 0.0;  // diagnostic only; never serialized into aggregates
};

struct IncrementResult {
    SegmentationModel model;         // final model of the step
    SegmentationModel phase1_model;  // after CE+KD fine-tuning, before retraining
    PseudoLabeledSet pseudo;         // empty in degraded mode
    StepReport report;
};

/// One full incremental step: phase-1 fine-tune, scene retrieval over the
/// pool, pseudo-labeling of the neighborhood with the phase-1 model, and the
/// phase-2 retrain on few shots plus pseudo-labeled neighbors. An empty pool
/// degrades to the phase-1 result with the flag set.
inline IncrementResult run_incremental_step(const SegmentationModel& prev, const TaskSchedule& schedule, int t,
                                            const FewShotSet& fewshot, const UnlabeledPool& pool,
                                            const TrainConfig& cfg, const SceneEmbedder& embedder) {
    const auto started = std::chrono::steady_clock::now();
    TrainResult phase1 = train_increment_initial(prev, schedule, t, fewshot, cfg);

    StepReport report;
    report.step = t;
    report.phase1 = phase1.report;
    report.phase1_model_hash = phase1.model.param_hash_hex();

    PseudoLabeledSet pseudo;
    const auto finish = [&](SegmentationModel final_model) {
        report.final_model_hash = final_model.param_hash_hex();
        report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        return IncrementResult{std::move(final_model), std::move(phase1.model), std::move(pseudo), std::move(report)};
    };

    if (pool.size() == 0) {
        report.degraded = true;
        SegmentationModel final_model = phase1.model;
        return finish(std::move(final_model));
    }

    std::vector<Image> query_images;
    std::vector<int> query_ids;
    for (const auto& s : fewshot.items) {
        query_images.push_back(s.image);
        query_ids.push_back(static_cast<int>(query_ids.size()) + 1);
    }
    const EmbeddingMatrix queries = embed_set(embedder, query_images, query_ids);
    const EmbeddingMatrix pool_embeddings = embed_set(embedder, pool.items, pool.ids);
    const Neighborhood neighborhood =
        knn_neighborhoods(pairwise_cosine_distance(queries, pool_embeddings), cfg.k_neighbors);
    report.k_clamped = neighborhood.k_clamped;
    report.neighbor_ids = neighborhood.union_ids;

    pseudo = infer_pseudo_labels(phase1.model, pool, neighborhood.union_ids, schedule.task_classes(t), cfg.tau,
                                 cfg.pseudo_mode);
    report.pseudo_items = static_cast<int>(pseudo.items.size());
    report.pseudo_coverage = pseudo_coverage(pseudo);

    const std::vector<AugmentedItem> merged = assemble_augmented_set(fewshot, pseudo);
    SegmentationModel retrained = cfg.retrain_init == RetrainInit::previous
                                      ? detail::initial_student(prev, schedule, t, cfg)
                                      : phase1.model;
    Rng rng(mix_seed(cfg.seed, detail::phase_stream(t, 2)));
    const SegmentationModel* tp = cfg.weights.kd != 0.0 ? &prev : nullptr;
    report.phase2 =
        detail::train_on_set(retrained, tp, detail::views_of(merged), schedule, t, cfg, cfg.phase2_epochs, rng);
    return finish(std::move(retrained));
}

struct EvalResult {
    std::vector<std::pair<std::string, double>> columns;  // stage order, mIoU fractions
    MiouResult full;                                      // over every class up to the stage
};

/// Joint evaluation after training stage `stage`: one confusion matrix over
/// all classes seen so far, reported as the mean IoU of each task-set column.
inline EvalResult evaluate_model(const SegmentationModel& model, const std::vector<LabeledSample>& data,
                                 const TaskSchedule& schedule, int stage) {
    const auto columns = stage_columns(schedule, stage);
    if (data.empty()) throw DataError("evaluation needs at least one labeled sample");
    const ClassSet eval_set = schedule.classes_up_to(stage);

    ConfusionMatrix cm(eval_set);
    for (const auto& s : data) {
        const LabelMap pred = argmax_labels(model.forward(s.image), eval_set);
        accumulate(cm, pred, s.labels);
    }

    EvalResult r;
    r.full = miou(cm, eval_set);
    for (const auto& [name, subset] : columns) {
        r.columns.emplace_back(name, miou(cm, subset).miou);
    }
    return r;
}

struct MethodSpec {
    std::string name;
    bool use_kd = true;
    bool use_pl = true;
};

/// The ablation points the pipeline exposes: plain fine-tuning, fine-tuning
/// with distillation, and the full pipeline with pseudo-labeled neighbors.
inline const std::vector<MethodSpec>& known_methods() {
    static const std::vector<MethodSpec> methods{
        {"ft", false, false},
        {"ft+kd", true, false},
        {"ft+kd+pl", true, true},
    };
    return methods;
}

struct ExperimentConfig {
    ArchConfig arch;
    TrainConfig train;
    int runs = 5;
    int shots = 5;
    std::vector<std::string> methods{"ft+kd", "ft+kd+pl"};
    double confidence = 0.95;
    CiMethod ci = CiMethod::student_t;

    void validate() const {
        train.validate();
        if (runs < 1) throw ConfigError("an experiment needs at least one run");
        if (shots < 1) throw ConfigError("shots must be at least 1");
        if (methods.empty()) throw ConfigError("an experiment needs at least one method");
        for (const auto& name : methods) {
            const auto& known = known_methods();
            const bool ok = std::any_of(known.begin(), known.end(),
                                        [&](const MethodSpec& m) { return m.name == name; });
            if (!ok) throw ConfigError("unknown method \"" + name + "\" (expected ft, ft+kd, or ft+kd+pl)");
        }
        for (std::size_t i = 0; i < methods.size(); ++i) {
            for (std::size_t j = i + 1; j < methods.size(); ++j) {
                if (methods[i] == methods[j]) throw ConfigError("duplicate method \"" + methods[i] + "\"");
            }
        }
        if (!(confidence > 0.0 && confidence < 1.0)) throw ConfigError("confidence level must lie in (0, 1)");
    }
};

struct ExperimentResult {
    MetricsReport report;
    nlohmann::json aggregate;
};

namespace detail {

inline nlohmann::json stats_json(const RunStats& s) {
    return nlohmann::json{{"n", s.n},
                          {"mean", s.mean},
                          {"sd", s.sd},
                          {"half_width", s.half_width.has_value() ? nlohmann::json(*s.half_width) : nlohmann::json()},
                          {"text", format_measure(s)}};
}

inline nlohmann::json config_echo(const ExperimentConfig& cfg) {
    return nlohmann::json{
        {"arch_widths", cfg.arch.widths},
        {"base_epochs", cfg.train.base_epochs},
        {"phase1_epochs", cfg.train.phase1_epochs},
        {"phase2_epochs", cfg.train.phase2_epochs},
        {"lr", cfg.train.lr},
        {"momentum", cfg.train.momentum},
        {"batch_size", cfg.train.batch_size},
        {"seed", cfg.train.seed},
        {"hflip", cfg.train.hflip},
        {"tau", cfg.train.tau},
        {"k_neighbors", cfg.train.k_neighbors},
        {"weights",
         {{"fewshot_ce", cfg.train.weights.fewshot_ce},
          {"pseudo_ce", cfg.train.weights.pseudo_ce},
          {"kd", cfg.train.weights.kd}}},
        {"retrain_init", cfg.train.retrain_init == RetrainInit::previous ? "previous" : "continue"},
        {"pseudo_mode", cfg.train.pseudo_mode == PseudoMode::hard ? "hard" : "soft"},
        {"runs", cfg.runs},
        {"shots", cfg.shots},
        {"methods", cfg.methods},
        {"confidence", cfg.confidence},
        {"ci", cfg.ci == CiMethod::student_t ? "student_t" : "normal"},
    };
}

}  // namespace detail

/// Repeated paired runs of the configured methods. The base model is trained
/// once; each run resamples the few-shot sets from its own seed and every
/// method within a run shares them, so per-run differences are attributable
/// to the method. Failures are recorded per seed without aborting the rest.
/// The aggregate JSON is a pure function of (config, data), byte-identical
/// across reruns; mIoU values are reported as percentages.
inline ExperimentResult run_experiment(const TaskSchedule& schedule, const DatasetSplits& data,
                                       const ExperimentConfig& cfg, const SceneEmbedder& embedder) {
    cfg.validate();
    const int last_stage = schedule.task_count();
    const auto columns = stage_columns(schedule, last_stage);
    std::vector<std::string> column_names;
    for (const auto& [name, set] : columns) column_names.push_back(name);

    const TrainResult base = train_base(cfg.arch, schedule, data.labeled, cfg.train);

    std::map<std::string, std::map<std::string, std::vector<double>>> values;  // method -> column -> per-run
    std::map<std::string, nlohmann::json> per_run;
    for (const auto& name : cfg.methods) per_run[name] = nlohmann::json::array();
    nlohmann::json runs_json = nlohmann::json::array();
    nlohmann::json errors = nlohmann::json::array();

    for (int r = 0; r < cfg.runs; ++r) {
        const std::uint64_t run_seed = cfg.train.seed + static_cast<std::uint64_t>(r);
        nlohmann::json run_obj{{"run", r}, {"seed", run_seed}};
        try {
            std::map<int, FewShotSet> fewshot;
            nlohmann::json fewshot_json = nlohmann::json::object();
            for (int t = 2; t <= last_stage; ++t) {
                fewshot.emplace(t, sample_few_shot(data.labeled, schedule.task_classes(t), cfg.shots,
                                                   mix_seed(run_seed, static_cast<std::uint64_t>(t)), t));
                nlohmann::json stems = nlohmann::json::array();
                for (const auto& item : fewshot.at(t).items) stems.push_back(item.stem);
                fewshot_json[std::to_string(t)] = std::move(stems);
            }
            run_obj["fewshot"] = fewshot_json;

            // staged locally and committed only when the whole run succeeds,
            // keeping value arrays aligned by run for paired comparisons
            std::map<std::string, std::map<std::string, double>> run_values;
            std::map<std::string, nlohmann::json> run_entries;

            for (const auto& name : cfg.methods) {
                const auto& spec = *std::find_if(known_methods().begin(), known_methods().end(),
                                                 [&](const MethodSpec& m) { return m.name == name; });
                TrainConfig mcfg = cfg.train;
                mcfg.seed = run_seed;
                if (!spec.use_kd) mcfg.weights.kd = 0.0;

                SegmentationModel model = base.model;
                nlohmann::json steps = nlohmann::json::array();
                for (int t = 2; t <= last_stage; ++t) {
                    if (spec.use_pl) {
                        IncrementResult res =
                            run_incremental_step(model, schedule, t, fewshot.at(t), data.unlabeled, mcfg, embedder);
                        steps.push_back({{"step", t},
                                         {"degraded", res.report.degraded},
                                         {"neighbors", res.report.neighbor_ids.size()},
                                         {"pl_coverage", res.report.pseudo_coverage}});
                        model = std::move(res.model);
                    } else {
                        TrainResult res = train_increment_initial(model, schedule, t, fewshot.at(t), mcfg);
                        steps.push_back({{"step", t}});
                        model = std::move(res.model);
                    }
                }
                const EvalResult eval = evaluate_model(model, data.validation, schedule, last_stage);
                nlohmann::json miou_json = nlohmann::json::object();
                for (const auto& [col, value] : eval.columns) {
                    run_values[name][col] = 100.0 * value;
                    miou_json[col] = 100.0 * value;
                }
                run_entries[name] =
                    nlohmann::json{{"run", r}, {"seed", run_seed}, {"miou", miou_json}, {"steps", steps}};
            }

            for (const auto& name : cfg.methods) {
                for (const auto& [col, v] : run_values.at(name)) values[name][col].push_back(v);
                per_run[name].push_back(run_entries.at(name));
            }
        } catch (const std::exception& e) {
            errors.push_back({{"run", r}, {"seed", run_seed}, {"error", e.what()}});
        }
        runs_json.push_back(std::move(run_obj));
    }

    MetricsReport report;
    report.columns = column_names;
    nlohmann::json methods_json = nlohmann::json::object();
    for (const auto& name : cfg.methods) {
        MetricsReport::Row row;
        row.label = name;
        nlohmann::json stats = nlohmann::json::object();
        for (const auto& col : column_names) {
            const auto mit = values.find(name);
            const bool have = mit != values.end() && mit->second.count(col) && !mit->second.at(col).empty();
            if (have) {
                const RunStats s = aggregate_runs(mit->second.at(col), cfg.confidence, cfg.ci);
                row.cells.push_back(s);
                stats[col] = detail::stats_json(s);
            } else {
                row.cells.push_back(std::nullopt);
                stats[col] = nlohmann::json();
            }
        }
        report.rows.push_back(std::move(row));
        methods_json[name] = nlohmann::json{{"per_run", per_run.at(name)}, {"stats", stats}};
    }

    nlohmann::json aggregate{{"config", detail::config_echo(cfg)},
                             {"columns", column_names},
                             {"methods", methods_json},
                             {"runs", runs_json},
                             {"errors", errors},
                             {"table", render_report_table(report)}};
    return ExperimentResult{std::move(report), std::move(aggregate)};
}

}  // namespace incseg
