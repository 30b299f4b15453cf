#pragma once

// Command-line surface: synth / train-base / increment / evaluate /
// experiment. Each command is a plain function over a validated option
// struct so tests can drive it directly; run_cli adds flag parsing and the
// exit-code mapping (0 ok, 2 config, 3 data or snapshot, 4 anything else).
//
// Artifacts are deterministic in (config, inputs): reports carry no wall
// clock, so rerunning a command overwrites its outputs with identical bytes.

#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "incseg/common.hpp"
#include "incseg/dataset.hpp"
#include "incseg/embedder.hpp"
#include "incseg/network.hpp"
#include "incseg/pseudolabel.hpp"
#include "incseg/schedule.hpp"
#include "incseg/synthetic.hpp"
#include "incseg/trainer.hpp"

namespace incseg {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitRuntime = 4;

inline constexpr const char* kOutRootEnv = "INCSEG_OUT_ROOT";

inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
    if (dynamic_cast<const DataError*>(&e)) return kExitData;
    if (dynamic_cast<const SnapshotError*>(&e)) return kExitData;
    return kExitRuntime;
}

namespace cli_detail {

/// Relative output paths land under the directory named by the environment
/// override, when set.
inline std::filesystem::path resolve_out(const std::filesystem::path& p) {
    if (p.is_relative()) {
        if (const char* root = std::getenv(kOutRootEnv); root != nullptr && *root != '\0') {
            return std::filesystem::path(root) / p;
        }
    }
    return p;
}

inline TaskSchedule load_schedule_or_default(const std::filesystem::path& file) {
    return file.empty() ? default_task_schedule() : load_task_schedule(file);
}

inline std::vector<int> parse_widths(const std::string& text) {
    std::vector<int> widths;
    std::string token;
    std::istringstream in(text);
    while (std::getline(in, token, ',')) {
        try {
            widths.push_back(std::stoi(token));
        } catch (const std::exception&) {
            throw ConfigError("bad width \"" + token + "\" in --widths");
        }
    }
    if (widths.size() != 4) throw ConfigError("--widths needs exactly 4 comma-separated values");
    return widths;
}

inline std::vector<std::string> split_csv(const std::string& text) {
    std::vector<std::string> out;
    std::string token;
    std::istringstream in(text);
    while (std::getline(in, token, ',')) out.push_back(token);
    return out;
}

/// Throws the architecture's own validation errors before any data loads.
inline void check_arch(const ArchConfig& arch) { SegmentationModel probe(arch, 1, 0); }

inline DatasetSplits load_splits(const std::filesystem::path& data_root, const TaskSchedule& schedule) {
    return load_dataset(data_root, data_root / "manifest.json", schedule);
}

inline std::filesystem::path snap_path(const std::filesystem::path& out, int step) {
    return out / (step == 1 ? std::string("base_model.iseg") : "model_step" + std::to_string(step) + ".iseg");
}

inline SegmentationModel load_model_for_step(const std::filesystem::path& out, int step) {
    const auto path = snap_path(out, step);
    if (!std::filesystem::exists(path)) {
        const std::string hint =
            step == 1 ? "run train-base first" : "run increment --step " + std::to_string(step) + " first";
        throw SnapshotError("no snapshot for step " + std::to_string(step) + " at " + path.string() + "; " + hint);
    }
    SegmentationModel model = restore(load_snapshot(path));
    if (model.step() != step) {
        throw SnapshotError("snapshot " + path.string() + " is from step " + std::to_string(model.step()) +
                            ", expected step " + std::to_string(step));
    }
    return model;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& doc) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << doc.dump(2) << '\n';
}

inline nlohmann::json phase_json(const PhaseReport& report) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : report.epochs) arr.push_back({{"epoch", e.epoch}, {"loss", e.value}});
    return arr;
}

inline nlohmann::json train_config_echo(const TrainConfig& cfg) {
    return nlohmann::json{{"base_epochs", cfg.base_epochs},
                          {"phase1_epochs", cfg.phase1_epochs},
                          {"phase2_epochs", cfg.phase2_epochs},
                          {"lr", cfg.lr},
                          {"momentum", cfg.momentum},
                          {"batch_size", cfg.batch_size},
                          {"seed", cfg.seed},
                          {"hflip", cfg.hflip},
                          {"tau", cfg.tau},
                          {"k_neighbors", cfg.k_neighbors},
                          {"weights",
                           {{"fewshot_ce", cfg.weights.fewshot_ce},
                            {"pseudo_ce", cfg.weights.pseudo_ce},
                            {"kd", cfg.weights.kd}}},
                          {"retrain_init", cfg.retrain_init == RetrainInit::previous ? "previous" : "continue"},
                          {"pseudo_mode", cfg.pseudo_mode == PseudoMode::hard ? "hard" : "soft"}};
}

inline nlohmann::json model_json(const SegmentationModel& model, const std::string& file) {
    return nlohmann::json{{"file", file},
                          {"hash", model.param_hash_hex()},
                          {"classes", model.class_count()},
                          {"step", model.step()},
                          {"params", model.param_count()}};
}

}  // namespace cli_detail

struct SynthOptions {
    std::filesystem::path out;
    std::filesystem::path schedule_file;  // empty: built-in three-task split
    std::filesystem::path world_file;     // empty: built-in world
    int labeled = 40;
    int unlabeled = 200;
    int validation = 24;
    std::uint64_t seed = 1;
};

inline void cmd_synth(const SynthOptions& o, std::ostream& log) {
    const TaskSchedule schedule = cli_detail::load_schedule_or_default(o.schedule_file);
    SyntheticWorldSpec spec;
    if (o.world_file.empty()) {
        spec = default_world_spec(schedule);
    } else {
        std::ifstream in(o.world_file);
        if (!in) throw DataError("cannot open world spec: " + o.world_file.string());
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("world spec is not valid JSON: " + std::string(e.what()));
        }
        spec = world_spec_from_json(j, schedule);
    }
    const auto out = cli_detail::resolve_out(o.out);
    write_synthetic_dataset(out, spec, SplitCounts{o.labeled, o.unlabeled, o.validation}, o.seed);
    log << "dataset: " << out.string() << " (" << o.labeled << " labeled, " << o.unlabeled << " unlabeled, "
        << o.validation << " validation)\n";
}

struct TrainBaseOptions {
    std::filesystem::path data_root;
    std::filesystem::path schedule_file;
    std::filesystem::path out;
    ArchConfig arch;
    TrainConfig train;
};

inline void cmd_train_base(const TrainBaseOptions& o, std::ostream& log) {
    o.train.validate();
    cli_detail::check_arch(o.arch);
    const TaskSchedule schedule = cli_detail::load_schedule_or_default(o.schedule_file);
    const DatasetSplits data = cli_detail::load_splits(o.data_root, schedule);
    const auto out = cli_detail::resolve_out(o.out);
    std::filesystem::create_directories(out);

    const TrainResult res = train_base(o.arch, schedule, data.labeled, o.train);
    const auto snap = cli_detail::snap_path(out, 1);
    save_snapshot(snap, make_snapshot(res.model));

    nlohmann::json config = cli_detail::train_config_echo(o.train);
    config["data_root"] = o.data_root.string();
    config["schedule_file"] = o.schedule_file.string();
    config["widths"] = o.arch.widths;
    const nlohmann::json report{{"command", "train-base"},
                                {"config", config},
                                {"epochs", cli_detail::phase_json(res.report)},
                                {"model", cli_detail::model_json(res.model, snap.filename().string())}};
    cli_detail::write_json(out / "base_report.json", report);
    log << "base model: " << snap.string() << " (" << res.model.class_count() << " classes, final loss "
        << (res.report.epochs.empty() ? 0.0 : res.report.epochs.back().value) << ")\n";
}

struct IncrementOptions {
    std::filesystem::path data_root;
    std::filesystem::path schedule_file;
    std::filesystem::path out;
    int step = 2;
    int shots = 5;
    bool no_pl = false;
    bool no_kd = false;
    std::vector<int> expect_widths;  // non-empty: must match the loaded snapshot
    TrainConfig train;
};

inline void cmd_increment(const IncrementOptions& o, std::ostream& log) {
    o.train.validate();
    if (o.shots < 1) throw ConfigError("shots must be at least 1");
    const TaskSchedule schedule = cli_detail::load_schedule_or_default(o.schedule_file);
    if (o.step < 2 || o.step > schedule.task_count()) {
        throw ConfigError("step " + std::to_string(o.step) + " outside schedule of " +
                          std::to_string(schedule.task_count()) + " task(s)");
    }
    const DatasetSplits data = cli_detail::load_splits(o.data_root, schedule);
    const auto out = cli_detail::resolve_out(o.out);
    std::filesystem::create_directories(out);

    const SegmentationModel prev = cli_detail::load_model_for_step(out, o.step - 1);
    if (!o.expect_widths.empty() && o.expect_widths != prev.arch().widths) {
        throw ConfigError("--widths disagrees with the snapshot architecture; the model keeps its widths");
    }
    const FewShotSet fewshot =
        sample_few_shot(data.labeled, schedule.task_classes(o.step), o.shots,
                        mix_seed(o.train.seed, static_cast<std::uint64_t>(o.step)), o.step);

    TrainConfig cfg = o.train;
    if (o.no_kd) cfg.weights.kd = 0.0;
    const std::string mode = o.no_pl ? (o.no_kd ? "ft" : "ft+kd") : (o.no_kd ? "ft+pl" : "ft+kd+pl");

    nlohmann::json config = cli_detail::train_config_echo(cfg);
    config["data_root"] = o.data_root.string();
    config["schedule_file"] = o.schedule_file.string();
    config["step"] = o.step;
    config["shots"] = o.shots;
    config["no_pl"] = o.no_pl;
    config["no_kd"] = o.no_kd;
    nlohmann::json stems = nlohmann::json::array();
    for (const auto& item : fewshot.items) stems.push_back(item.stem);
    nlohmann::json report{{"command", "increment"}, {"config", config}, {"mode", mode}, {"fewshot", stems}};

    const auto snap = cli_detail::snap_path(out, o.step);
    if (o.no_pl) {
        const TrainResult res = train_increment_initial(prev, schedule, o.step, fewshot, cfg);
        save_snapshot(snap, make_snapshot(res.model));
        report["phase1"] = cli_detail::phase_json(res.report);
        report["model"] = cli_detail::model_json(res.model, snap.filename().string());
        log << "model: " << snap.string() << " (" << mode << ")\n";
        cli_detail::write_json(out / ("step" + std::to_string(o.step) + "_report.json"), report);
        return;
    }

    const GridStatsEmbedder embedder;
    const IncrementResult res = run_incremental_step(prev, schedule, o.step, fewshot, data.unlabeled, cfg, embedder);
    save_snapshot(snap, make_snapshot(res.model));
    report["phase1"] = cli_detail::phase_json(res.report.phase1);
    report["degraded"] = res.report.degraded;
    if (!res.report.degraded) {
        report["phase2"] = cli_detail::phase_json(res.report.phase2);
        report["k_clamped"] = res.report.k_clamped;
        report["neighbors"] = res.report.neighbor_ids;
        const std::string dump_dir = "pseudo_step" + std::to_string(o.step);
        dump_pseudo_labels(res.pseudo, out / dump_dir);
        report["pseudo"] = {{"items", res.report.pseudo_items},
                            {"coverage", res.report.pseudo_coverage},
                            {"dump", dump_dir}};
    }
    report["phase1_hash"] = res.report.phase1_model_hash;
    report["model"] = cli_detail::model_json(res.model, snap.filename().string());
    cli_detail::write_json(out / ("step" + std::to_string(o.step) + "_report.json"), report);
    log << "model: " << snap.string() << " (" << mode << (res.report.degraded ? ", degraded: empty pool" : "")
        << ")\n";
}

struct EvaluateOptions {
    std::filesystem::path data_root;
    std::filesystem::path schedule_file;
    std::filesystem::path out;
    int step = 1;
    std::string tasks;  // comma list of task indices and/or "union"; empty: all
};

inline void cmd_evaluate(const EvaluateOptions& o, std::ostream& log) {
    const TaskSchedule schedule = cli_detail::load_schedule_or_default(o.schedule_file);
    if (o.step < 1 || o.step > schedule.task_count()) {
        throw ConfigError("step " + std::to_string(o.step) + " outside schedule of " +
                          std::to_string(schedule.task_count()) + " task(s)");
    }
    const DatasetSplits data = cli_detail::load_splits(o.data_root, schedule);
    const auto out = cli_detail::resolve_out(o.out);
    std::filesystem::create_directories(out);
    const SegmentationModel model = cli_detail::load_model_for_step(out, o.step);

    const EvalResult eval = evaluate_model(model, data.validation, schedule, o.step);
    std::vector<std::pair<std::string, double>> selected;
    if (o.tasks.empty()) {
        selected = eval.columns;
    } else {
        for (const std::string& token : cli_detail::split_csv(o.tasks)) {
            std::string name;
            if (token == "union") {
                name = eval.columns.back().first;  // running union over everything seen
            } else if (!token.empty() && std::all_of(token.begin(), token.end(),
                                                     [](unsigned char c) { return std::isdigit(c); })) {
                const int idx = std::stoi(token);
                if (idx < 1 || idx > o.step) {
                    throw ConfigError("task " + token + " outside the evaluated range 1.." + std::to_string(o.step));
                }
                name = "T_" + token;
            } else {
                throw ConfigError("bad task token \"" + token + "\" (expected a task index or \"union\")");
            }
            for (const auto& col : eval.columns) {
                if (col.first == name) selected.push_back(col);
            }
        }
    }

    nlohmann::json columns = nlohmann::json::array();
    for (const auto& [name, value] : selected) {
        columns.push_back({{"task_set", name}, {"miou", 100.0 * value}});
        log << name << "  " << 100.0 * value << "\n";
    }
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [c, iou] : eval.full.per_class) per_class[std::to_string(c)] = 100.0 * iou;
    const nlohmann::json report{{"command", "evaluate"},
                                {"config",
                                 {{"data_root", o.data_root.string()},
                                  {"schedule_file", o.schedule_file.string()},
                                  {"step", o.step},
                                  {"tasks", o.tasks}}},
                                {"columns", columns},
                                {"per_class", per_class},
                                {"excluded", eval.full.excluded}};
    cli_detail::write_json(out / ("eval_step" + std::to_string(o.step) + ".json"), report);
}

struct ExperimentOptions {
    std::filesystem::path data_root;
    std::filesystem::path schedule_file;
    std::filesystem::path out;
    ExperimentConfig config;
};

inline void cmd_experiment(const ExperimentOptions& o, std::ostream& log) {
    o.config.validate();
    cli_detail::check_arch(o.config.arch);
    const TaskSchedule schedule = cli_detail::load_schedule_or_default(o.schedule_file);
    const DatasetSplits data = cli_detail::load_splits(o.data_root, schedule);
    const auto out = cli_detail::resolve_out(o.out);
    std::filesystem::create_directories(out);

    const GridStatsEmbedder embedder;
    const ExperimentResult res = run_experiment(schedule, data, o.config, embedder);

    nlohmann::json doc = res.aggregate;
    doc["inputs"] = {{"data_root", o.data_root.string()}, {"schedule_file", o.schedule_file.string()}};
    cli_detail::write_json(out / "experiment.json", doc);
    log << res.aggregate.at("table").get<std::string>();
    if (!res.aggregate.at("errors").empty()) {
        log << "failed runs: " << res.aggregate.at("errors").size() << " (see experiment.json)\n";
    }
}

/// Flag parsing plus the exit-code contract. `args` is the full argv list.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"few-shot class-incremental segmentation workbench"};
    app.require_subcommand(1);

    SynthOptions synth;
    std::string synth_schedule, synth_world;
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
    synth_cmd->add_option("--out", synth.out, "dataset directory")->required();
    synth_cmd->add_option("--schedule", synth_schedule, "task schedule JSON");
    synth_cmd->add_option("--world", synth_world, "world spec JSON");
    synth_cmd->add_option("--labeled", synth.labeled, "labeled split size");
    synth_cmd->add_option("--unlabeled", synth.unlabeled, "unlabeled split size");
    synth_cmd->add_option("--validation", synth.validation, "validation split size");
    synth_cmd->add_option("--seed", synth.seed, "generation seed");

    // shared training flags, registered per subcommand onto its own struct;
    // --epochs is the blanket knob, --phase1/2-epochs are specific overrides
    struct TrainFlags {
        std::string widths;
        std::string retrain_init;
        int epochs = -1;
        int phase1 = -1;
        int phase2 = -1;
        bool no_hflip = false;
        bool soft_pl = false;
    };
    const auto add_train_flags = [](CLI::App* cmd, TrainConfig& cfg, TrainFlags& flags, const char* widths_help) {
        cmd->add_option("--widths", flags.widths, widths_help);
        cmd->add_option("--epochs", flags.epochs, "epochs for every phase")->check(CLI::NonNegativeNumber);
        cmd->add_option("--phase1-epochs", flags.phase1, "initial fine-tune epochs")->check(CLI::NonNegativeNumber);
        cmd->add_option("--phase2-epochs", flags.phase2, "retraining epochs")->check(CLI::NonNegativeNumber);
        cmd->add_option("--lr", cfg.lr, "learning rate");
        cmd->add_option("--momentum", cfg.momentum, "SGD momentum");
        cmd->add_option("--batch", cfg.batch_size, "batch size");
        cmd->add_option("--seed", cfg.seed, "training seed");
        cmd->add_option("--tau", cfg.tau, "pseudo-label confidence threshold");
        cmd->add_option("--k-neighbors", cfg.k_neighbors, "neighbors per few-shot image");
        cmd->add_flag("--no-hflip", flags.no_hflip, "disable horizontal flips");
        cmd->add_flag("--soft-pl", flags.soft_pl, "keep soft distributions on gated pixels");
        cmd->add_option("--retrain-init", flags.retrain_init, "previous | continue");
    };
    const auto apply_train_flags = [](TrainConfig& cfg, const TrainFlags& flags) {
        if (flags.epochs >= 0) {
            cfg.base_epochs = flags.epochs;
            cfg.phase1_epochs = flags.epochs;
            cfg.phase2_epochs = flags.epochs;
        }
        if (flags.phase1 >= 0) cfg.phase1_epochs = flags.phase1;
        if (flags.phase2 >= 0) cfg.phase2_epochs = flags.phase2;
        cfg.hflip = !flags.no_hflip;
        if (flags.soft_pl) cfg.pseudo_mode = PseudoMode::soft;
        if (!flags.retrain_init.empty()) {
            if (flags.retrain_init == "previous") {
                cfg.retrain_init = RetrainInit::previous;
            } else if (flags.retrain_init == "continue") {
                cfg.retrain_init = RetrainInit::continue_phase1;
            } else {
                throw ConfigError("--retrain-init must be \"previous\" or \"continue\"");
            }
        }
    };

    TrainBaseOptions tb;
    TrainFlags tb_flags;
    std::string tb_schedule;
    auto* tb_cmd = app.add_subcommand("train-base", "train the base-task model");
    tb_cmd->add_option("--data", tb.data_root, "dataset directory")->required();
    tb_cmd->add_option("--out", tb.out, "artifact directory")->required();
    tb_cmd->add_option("--schedule", tb_schedule, "task schedule JSON");
    add_train_flags(tb_cmd, tb.train, tb_flags, "stage widths, e.g. 16,24,32,48");

    IncrementOptions inc;
    TrainFlags inc_flags;
    std::string inc_schedule;
    auto* inc_cmd = app.add_subcommand("increment", "run one incremental step");
    inc_cmd->add_option("--data", inc.data_root, "dataset directory")->required();
    inc_cmd->add_option("--out", inc.out, "artifact directory")->required();
    inc_cmd->add_option("--schedule", inc_schedule, "task schedule JSON");
    inc_cmd->add_option("--step", inc.step, "incremental step index");
    inc_cmd->add_option("--shots", inc.shots, "few-shot images for the step");
    inc_cmd->add_flag("--no-pl", inc.no_pl, "skip retrieval and pseudo-labeling");
    inc_cmd->add_flag("--no-kd", inc.no_kd, "disable the distillation term");
    add_train_flags(inc_cmd, inc.train, inc_flags, "expected widths; checked against the snapshot");

    EvaluateOptions ev;
    std::string ev_schedule;
    auto* ev_cmd = app.add_subcommand("evaluate", "evaluate a snapshot on the validation split");
    ev_cmd->add_option("--data", ev.data_root, "dataset directory")->required();
    ev_cmd->add_option("--out", ev.out, "artifact directory holding the snapshot")->required();
    ev_cmd->add_option("--schedule", ev_schedule, "task schedule JSON");
    ev_cmd->add_option("--step", ev.step, "snapshot step to evaluate");
    ev_cmd->add_option("--tasks", ev.tasks, "columns to report, e.g. 1,2,union");

    ExperimentOptions ex;
    TrainFlags ex_flags;
    std::string ex_schedule, ex_methods;
    auto* ex_cmd = app.add_subcommand("experiment", "repeated paired runs with aggregation");
    ex_cmd->add_option("--data", ex.data_root, "dataset directory")->required();
    ex_cmd->add_option("--out", ex.out, "artifact directory")->required();
    ex_cmd->add_option("--schedule", ex_schedule, "task schedule JSON");
    ex_cmd->add_option("--runs", ex.config.runs, "independent seeded runs");
    ex_cmd->add_option("--shots", ex.config.shots, "few-shot images per step");
    ex_cmd->add_option("--methods", ex_methods, "comma list of ft, ft+kd, ft+kd+pl");
    ex_cmd->add_option("--confidence", ex.config.confidence, "confidence level for intervals");
    add_train_flags(ex_cmd, ex.config.train, ex_flags, "stage widths, e.g. 16,24,32,48");

    std::vector<const char*> argv;
    argv.reserve(args.size());
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e, out, err);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (synth_cmd->parsed()) {
            synth.schedule_file = synth_schedule;
            synth.world_file = synth_world;
            cmd_synth(synth, out);
        } else if (tb_cmd->parsed()) {
            tb.schedule_file = tb_schedule;
            if (!tb_flags.widths.empty()) tb.arch.widths = cli_detail::parse_widths(tb_flags.widths);
            apply_train_flags(tb.train, tb_flags);
            cmd_train_base(tb, out);
        } else if (inc_cmd->parsed()) {
            inc.schedule_file = inc_schedule;
            if (!inc_flags.widths.empty()) inc.expect_widths = cli_detail::parse_widths(inc_flags.widths);
            apply_train_flags(inc.train, inc_flags);
            cmd_increment(inc, out);
        } else if (ev_cmd->parsed()) {
            ev.schedule_file = ev_schedule;
            cmd_evaluate(ev, out);
        } else if (ex_cmd->parsed()) {
            ex.schedule_file = ex_schedule;
            if (!ex_flags.widths.empty()) ex.config.arch.widths = cli_detail::parse_widths(ex_flags.widths);
            if (!ex_methods.empty()) ex.config.methods = cli_detail::split_csv(ex_methods);
            apply_train_flags(ex.config.train, ex_flags);
            cmd_experiment(ex, out);
        }
        return kExitOk;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
}

}  // namespace incseg
