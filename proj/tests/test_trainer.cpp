#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "helpers.hpp"
#include "incseg/trainer.hpp"

using namespace incseg;

namespace {

constexpr int kSide = 16;

ArchConfig tiny_arch() {
    ArchConfig a;
    a.widths = {3, 4, 5, 6};
    return a;
}

TaskSchedule two_task_schedule() {
    return build_task_schedule(nlohmann::json::parse(R"({"tasks": [["sky", "ground"], ["thing"]]})"));
}

/// Easy color world: two base classes split at a horizon row, plus an
/// optional red box of the novel class below it. Box position varies in x so
/// horizontal flips genuinely change the input.
LabeledSample color_world(Rng& rng, const std::string& stem, bool with_novel) {
    LabeledSample s;
    s.stem = stem;
    s.image = Image(kSide, kSide);
    s.labels = LabelMap(kSide, kSide);
    const int horizon = rng.uniform_int(5, 10);
    for (int y = 0; y < kSide; ++y) {
        for (int x = 0; x < kSide; ++x) {
            const bool top = y < horizon;
            const int base_color[3] = {top ? 70 : 90, top ? 100 : 170, top ? 200 : 80};
            for (int ch = 0; ch < 3; ++ch) {
                const int v = base_color[ch] + rng.uniform_int(-12, 12);
                s.image.at(y, x, ch) = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
            }
            s.labels.values[static_cast<std::size_t>(y) * kSide + x] = top ? 0 : 1;
        }
    }
    if (with_novel) {
        const int side = 5;
        const int y0 = rng.uniform_int(horizon, kSide - side);
        const int x0 = rng.uniform_int(0, kSide - side);
        for (int y = y0; y < y0 + side; ++y) {
            for (int x = x0; x < x0 + side; ++x) {
                const int box_color[3] = {210, 60, 50};
                for (int ch = 0; ch < 3; ++ch) {
                    const int v = box_color[ch] + rng.uniform_int(-10, 10);
                    s.image.at(y, x, ch) = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
                }
                s.labels.values[static_cast<std::size_t>(y) * kSide + x] = 2;
            }
        }
    }
    return s;
}

std::vector<LabeledSample> world_set(int n, std::uint64_t seed, bool with_novel, const std::string& prefix) {
    Rng rng(seed);
    std::vector<LabeledSample> out;
    for (int i = 0; i < n; ++i) out.push_back(color_world(rng, prefix + std::to_string(i), with_novel));
    return out;
}

UnlabeledPool world_pool(int n, std::uint64_t seed) {
    Rng rng(seed);
    UnlabeledPool pool;
    for (int i = 1; i <= n; ++i) {
        pool.stems.push_back("p" + std::to_string(i));
        pool.items.push_back(color_world(rng, "", true).image);
        pool.ids.push_back(i);
    }
    return pool;
}

TrainConfig fast_config(std::uint64_t seed = 11) {
    TrainConfig cfg;
    cfg.base_epochs = 5;
    cfg.phase1_epochs = 3;
    cfg.phase2_epochs = 3;
    cfg.batch_size = 2;
    cfg.seed = seed;
    cfg.tau = 0.25;
    cfg.k_neighbors = 3;
    return cfg;
}

FewShotSet novel_shots(int shots, std::uint64_t seed) {
    Rng rng(seed);
    FewShotSet fs;
    fs.task_index = 2;
    fs.shots = shots;
    fs.classes = ClassSet({2});
    for (int i = 0; i < shots; ++i) {
        LabeledSample s = color_world(rng, "shot" + std::to_string(i), true);
        s.labels = mask_to_classes(s.labels, fs.classes);
        fs.items.push_back(std::move(s));
    }
    return fs;
}

double mean_objective(const SegmentationModel& model, const SegmentationModel* teacher,
                      const std::vector<LabeledSample>& items, const TaskSchedule& schedule, int t,
                      const LossWeights& weights) {
    double sum = 0.0;
    for (const auto& s : items) {
        const ProbMap probs = model.forward(s.image);
        if (teacher != nullptr) {
            const ProbMap tp = teacher->forward(s.image);
            sum += total_objective(probs, &tp, s.labels, SampleSource::fewshot, schedule, t, weights).value;
        } else {
            sum += total_objective(probs, nullptr, s.labels, SampleSource::fewshot, schedule, t, weights).value;
        }
    }
    return sum / static_cast<double>(items.size());
}

}  // namespace

TEST_CASE("training config: pinned defaults", "[trainer]") {
    const TrainConfig cfg;
    CHECK(cfg.base_epochs == 30);
    CHECK(cfg.phase1_epochs == 20);
    CHECK(cfg.phase2_epochs == 20);
    CHECK(cfg.lr == 1e-2);
    CHECK(cfg.momentum == 0.9);
    CHECK(cfg.batch_size == 4);
    CHECK(cfg.hflip);
    CHECK(cfg.tau == 0.5);
    CHECK(cfg.k_neighbors == 10);
    CHECK(cfg.weights.fewshot_ce == 1.0);
    CHECK(cfg.weights.pseudo_ce == 1.0);
    CHECK(cfg.weights.kd == 1.0);
    CHECK(cfg.retrain_init == RetrainInit::previous);
    CHECK(cfg.pseudo_mode == PseudoMode::hard);
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("training config: invalid values are rejected before any compute", "[trainer]") {
    auto broken = [](auto mutate) {
        TrainConfig cfg;
        mutate(cfg);
        return cfg;
    };
    CHECK_THROWS_AS(broken([](TrainConfig& c) { c.base_epochs = -1; }).validate(), ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& c) { c.phase1_epochs = -2; }).validate(), ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& c) { c.lr = 0.0; }).validate(), ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& c) { c.lr = -1.0; }).validate(), ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& c) { c.momentum = 1.0; }).validate(), ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& c) { c.momentum = -0.1; }).validate(), ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& c) { c.batch_size = 0; }).validate(), ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& c) { c.tau = 1.0; }).validate(), ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& c) { c.k_neighbors = 0; }).validate(), ConfigError);
    CHECK_THROWS_AS(broken([](TrainConfig& c) { c.weights.kd = -0.5; }).validate(), ConfigError);
    CHECK_NOTHROW(broken([](TrainConfig& c) { c.base_epochs = 0; }).validate());
}

TEST_CASE("base training: loss strictly decreases over the first five epochs", "[trainer]") {
    const auto schedule = two_task_schedule();
    const auto data = world_set(6, 301, false, "b");
    const auto res = train_base(tiny_arch(), schedule, data, fast_config());

    REQUIRE(res.report.epochs.size() == 5);
    for (std::size_t i = 0; i + 1 < res.report.epochs.size(); ++i) {
        INFO("epoch " << i + 1 << " -> " << i + 2);
        CHECK(res.report.epochs[i + 1].value < res.report.epochs[i].value);
    }
    CHECK(res.model.step() == 1);
    CHECK(res.model.class_count() == 2);
}

TEST_CASE("base training is deterministic in the seed", "[trainer]") {
    const auto schedule = two_task_schedule();
    const auto data = world_set(4, 302, false, "b");
    TrainConfig cfg = fast_config(21);
    cfg.base_epochs = 3;

    const auto a = train_base(tiny_arch(), schedule, data, cfg);
    const auto b = train_base(tiny_arch(), schedule, data, cfg);
    CHECK(a.model.params() == b.model.params());
    REQUIRE(a.report.epochs.size() == b.report.epochs.size());
    for (std::size_t i = 0; i < a.report.epochs.size(); ++i) {
        CHECK(a.report.epochs[i].value == b.report.epochs[i].value);
    }

    cfg.seed = 22;
    const auto c = train_base(tiny_arch(), schedule, data, cfg);
    CHECK(a.model.params() != c.model.params());
}

TEST_CASE("base training rejects an empty dataset", "[trainer]") {
    CHECK_THROWS_AS(train_base(tiny_arch(), two_task_schedule(), {}, fast_config()), DataError);
}

TEST_CASE("logged epoch loss is the post-epoch mean objective, recomputable offline", "[trainer]") {
    const auto schedule = two_task_schedule();
    const auto data = world_set(5, 303, false, "b");
    TrainConfig cfg = fast_config(31);
    cfg.base_epochs = 3;
    const auto res = train_base(tiny_arch(), schedule, data, cfg);

    const double offline = mean_objective(res.model, nullptr, data, schedule, 1, cfg.weights);
    CHECK_THAT(res.report.epochs.back().value, Catch::Matchers::WithinAbs(offline, 1e-6));
    for (std::size_t i = 0; i < res.report.epochs.size(); ++i) {
        CHECK(res.report.epochs[i].epoch == static_cast<int>(i) + 1);
    }
}

TEST_CASE("initial increment: teacher frozen, head grown, loss recomputable", "[trainer]") {
    const auto schedule = two_task_schedule();
    const auto base = train_base(tiny_arch(), schedule, world_set(5, 304, false, "b"), fast_config(41));
    const auto fs = novel_shots(3, 401);
    TrainConfig cfg = fast_config(41);

    const std::vector<double> teacher_before = base.model.params();
    const auto inc = train_increment_initial(base.model, schedule, 2, fs, cfg);

    CHECK(base.model.params() == teacher_before);
    CHECK(inc.model.class_count() == 3);
    CHECK(inc.model.step() == 2);
    REQUIRE(inc.report.epochs.size() == 3);

    std::vector<LabeledSample> items(fs.items.begin(), fs.items.end());
    const double offline = mean_objective(inc.model, &base.model, items, schedule, 2, cfg.weights);
    CHECK_THAT(inc.report.epochs.back().value, Catch::Matchers::WithinAbs(offline, 1e-6));
}

TEST_CASE("initial increment: schedule position and inputs are checked", "[trainer]") {
    const auto schedule = two_task_schedule();
    const auto base = train_base(tiny_arch(), schedule, world_set(4, 305, false, "b"), fast_config(42));
    const auto fs = novel_shots(2, 402);

    CHECK_THROWS_AS(train_increment_initial(base.model, schedule, 1, fs, fast_config()), UsageError);
    CHECK_THROWS_AS(train_increment_initial(base.model, schedule, 3, fs, fast_config()), UsageError);

    FewShotSet wrong_step = fs;
    wrong_step.task_index = 3;
    CHECK_THROWS_AS(train_increment_initial(base.model, schedule, 2, wrong_step, fast_config()), UsageError);

    FewShotSet empty = fs;
    empty.items.clear();
    CHECK_THROWS_AS(train_increment_initial(base.model, schedule, 2, empty, fast_config()), DataError);
}

TEST_CASE("initial increment: disabling distillation changes the outcome", "[trainer]") {
    const auto schedule = two_task_schedule();
    const auto base = train_base(tiny_arch(), schedule, world_set(4, 306, false, "b"), fast_config(43));
    const auto fs = novel_shots(2, 403);

    TrainConfig with_kd = fast_config(43);
    TrainConfig without_kd = fast_config(43);
    without_kd.weights.kd = 0.0;
    const auto a = train_increment_initial(base.model, schedule, 2, fs, with_kd);
    const auto b = train_increment_initial(base.model, schedule, 2, fs, without_kd);
    CHECK(a.model.params() != b.model.params());
}

TEST_CASE("horizontal flips are seed-deterministic and alter the trajectory", "[trainer]") {
    const auto schedule = two_task_schedule();
    const auto data = world_set(4, 307, false, "b");
    TrainConfig flip_on = fast_config(44);
    flip_on.base_epochs = 3;
    TrainConfig flip_off = flip_on;
    flip_off.hflip = false;

    const auto a = train_base(tiny_arch(), schedule, data, flip_on);
    const auto b = train_base(tiny_arch(), schedule, data, flip_on);
    const auto c = train_base(tiny_arch(), schedule, data, flip_off);
    CHECK(a.model.params() == b.model.params());
    CHECK(a.model.params() != c.model.params());
}

TEST_CASE("incremental step: retrieval, pseudo-labels, and retraining compose", "[trainer]") {
    const auto schedule = two_task_schedule();
    const auto base = train_base(tiny_arch(), schedule, world_set(6, 308, false, "b"), fast_config(45));
    const auto fs = novel_shots(3, 405);
    const auto pool = world_pool(12, 406);
    const GridStatsEmbedder embedder;
    TrainConfig cfg = fast_config(45);

    const auto res = run_incremental_step(base.model, schedule, 2, fs, pool, cfg, embedder);
    const auto& rep = res.report;

    CHECK(rep.step == 2);
    CHECK_FALSE(rep.degraded);
    CHECK_FALSE(rep.k_clamped);
    CHECK(rep.phase1.epochs.size() == 3);
    CHECK(rep.phase2.epochs.size() == 3);
    REQUIRE_FALSE(rep.neighbor_ids.empty());
    CHECK(rep.neighbor_ids.size() <= static_cast<std::size_t>(cfg.k_neighbors) * fs.items.size());
    CHECK(std::is_sorted(rep.neighbor_ids.begin(), rep.neighbor_ids.end()));
    for (int id : rep.neighbor_ids) {
        CHECK(std::find(pool.ids.begin(), pool.ids.end(), id) != pool.ids.end());
    }
    CHECK(rep.pseudo_items == static_cast<int>(rep.neighbor_ids.size()));
    CHECK(rep.pseudo_coverage >= 0.0);
    CHECK(rep.pseudo_coverage <= 1.0);
    CHECK(rep.wall_seconds >= 0.0);

    CHECK(res.model.class_count() == 3);
    CHECK(res.model.step() == 2);
    CHECK(rep.phase1_model_hash == res.phase1_model.param_hash_hex());
    CHECK(rep.final_model_hash == res.model.param_hash_hex());
    CHECK(res.model.params() != res.phase1_model.params());

    const auto rerun = run_incremental_step(base.model, schedule, 2, fs, pool, cfg, embedder);
    CHECK(rerun.model.params() == res.model.params());
    CHECK(rerun.report.final_model_hash == rep.final_model_hash);
}

TEST_CASE("incremental step: an empty pool degrades to the initial fine-tune", "[trainer]") {
    const auto schedule = two_task_schedule();
    const auto base = train_base(tiny_arch(), schedule, world_set(4, 309, false, "b"), fast_config(46));
    const auto fs = novel_shots(2, 407);
    const GridStatsEmbedder embedder;

    const auto res = run_incremental_step(base.model, schedule, 2, fs, UnlabeledPool{}, fast_config(46), embedder);
    CHECK(res.report.degraded);
    CHECK(res.report.neighbor_ids.empty());
    CHECK(res.report.pseudo_items == 0);
    CHECK(res.report.pseudo_coverage == 0.0);
    CHECK(res.report.phase2.epochs.empty());
    CHECK(res.model.params() == res.phase1_model.params());

    const auto direct = train_increment_initial(base.model, schedule, 2, fs, fast_config(46));
    CHECK(res.model.params() == direct.model.params());
}

TEST_CASE("incremental step: a tiny pool clamps K and stays within bounds", "[trainer]") {
    const auto schedule = two_task_schedule();
    const auto base = train_base(tiny_arch(), schedule, world_set(4, 310, false, "b"), fast_config(47));
    const auto fs = novel_shots(2, 408);
    const auto pool = world_pool(2, 409);
    const GridStatsEmbedder embedder;
    TrainConfig cfg = fast_config(47);
    cfg.k_neighbors = 5;

    const auto res = run_incremental_step(base.model, schedule, 2, fs, pool, cfg, embedder);
    CHECK(res.report.k_clamped);
    CHECK(res.report.neighbor_ids.size() <= 2);
}

TEST_CASE("term routing algebra: mute pseudo term, zero retrain epochs, resume init", "[trainer]") {
    const auto schedule = two_task_schedule();
    const auto base = train_base(tiny_arch(), schedule, world_set(4, 311, false, "b"), fast_config(48));
    const auto fs = novel_shots(2, 410);
    const auto pool = world_pool(6, 411);
    const GridStatsEmbedder embedder;

    TrainConfig cfg = fast_config(48);
    cfg.weights.pseudo_ce = 0.0;
    cfg.phase2_epochs = 0;
    cfg.retrain_init = RetrainInit::continue_phase1;

    const auto res = run_incremental_step(base.model, schedule, 2, fs, pool, cfg, embedder);
    CHECK_FALSE(res.report.degraded);
    CHECK(res.model.params() == res.phase1_model.params());
    CHECK(res.report.final_model_hash == res.report.phase1_model_hash);
}

TEST_CASE("retrain initialization policies both start from the same extension", "[trainer]") {
    const auto schedule = two_task_schedule();
    const auto base = train_base(tiny_arch(), schedule, world_set(4, 312, false, "b"), fast_config(49));
    const auto fs = novel_shots(2, 412);
    const auto pool = world_pool(6, 413);
    const GridStatsEmbedder embedder;

    // with zero epochs in both phases the two policies coincide exactly
    TrainConfig frozen = fast_config(49);
    frozen.phase1_epochs = 0;
    frozen.phase2_epochs = 0;
    TrainConfig frozen_resume = frozen;
    frozen_resume.retrain_init = RetrainInit::continue_phase1;
    const auto a = run_incremental_step(base.model, schedule, 2, fs, pool, frozen, embedder);
    const auto b = run_incremental_step(base.model, schedule, 2, fs, pool, frozen_resume, embedder);
    CHECK(a.model.params() == b.model.params());

    // with real training they diverge
    TrainConfig fresh = fast_config(49);
    TrainConfig resume = fast_config(49);
    resume.retrain_init = RetrainInit::continue_phase1;
    const auto c = run_incremental_step(base.model, schedule, 2, fs, pool, fresh, embedder);
    const auto d = run_incremental_step(base.model, schedule, 2, fs, pool, resume, embedder);
    CHECK(c.model.params() != d.model.params());
}

TEST_CASE("distillation preserves base classes where plain fine-tuning forgets them", "[trainer]") {
    const auto schedule = two_task_schedule();
    TrainConfig cfg = fast_config(50);
    cfg.base_epochs = 8;
    cfg.phase1_epochs = 6;
    const auto base = train_base(tiny_arch(), schedule, world_set(8, 313, false, "b"), cfg);
    const auto fs = novel_shots(3, 414);
    const auto validation = world_set(6, 415, true, "v");

    TrainConfig no_kd = cfg;
    no_kd.weights.kd = 0.0;
    const auto with_kd = train_increment_initial(base.model, schedule, 2, fs, cfg);
    const auto without_kd = train_increment_initial(base.model, schedule, 2, fs, no_kd);

    const auto eval_kd = evaluate_model(with_kd.model, validation, schedule, 2);
    const auto eval_no_kd = evaluate_model(without_kd.model, validation, schedule, 2);
    REQUIRE(eval_kd.columns.size() == 3);
    CHECK(eval_kd.columns[0].first == "T_1");
    INFO("base-task mIoU with KD " << eval_kd.columns[0].second << " vs without " << eval_no_kd.columns[0].second);
    CHECK(eval_kd.columns[0].second > eval_no_kd.columns[0].second);
}

TEST_CASE("evaluation: stage columns over a trained model", "[trainer]") {
    const auto schedule = two_task_schedule();
    const auto base = train_base(tiny_arch(), schedule, world_set(4, 314, false, "b"), fast_config(51));
    const auto validation = world_set(4, 416, false, "v");

    const auto eval = evaluate_model(base.model, validation, schedule, 1);
    REQUIRE(eval.columns.size() == 1);
    CHECK(eval.columns[0].first == "T_1");
    CHECK(eval.columns[0].second >= 0.0);
    CHECK(eval.columns[0].second <= 1.0);
    CHECK(eval.columns[0].second == eval.full.miou);

    CHECK_THROWS_AS(evaluate_model(base.model, {}, schedule, 1), DataError);
    CHECK_THROWS_AS(evaluate_model(base.model, validation, schedule, 2), ShapeError);
}

TEST_CASE("experiment: aggregate JSON is byte-identical across reruns", "[trainer]") {
    const auto schedule = two_task_schedule();
    DatasetSplits data;
    data.labeled = world_set(8, 315, true, "l");
    data.unlabeled = world_pool(6, 417);
    data.validation = world_set(4, 418, true, "v");
    const GridStatsEmbedder embedder;

    ExperimentConfig cfg;
    cfg.arch = tiny_arch();
    cfg.train = fast_config(60);
    cfg.train.base_epochs = 2;
    cfg.train.phase1_epochs = 2;
    cfg.train.phase2_epochs = 2;
    cfg.runs = 2;
    cfg.shots = 2;
    cfg.methods = {"ft+kd", "ft+kd+pl"};

    const auto a = run_experiment(schedule, data, cfg, embedder);
    const auto b = run_experiment(schedule, data, cfg, embedder);
    CHECK(a.aggregate.dump(2) == b.aggregate.dump(2));

    const std::vector<std::string> want_columns{"T_1", "T_2", "T_1u2"};
    CHECK(a.report.columns == want_columns);
    REQUIRE(a.report.rows.size() == 2);
    CHECK(a.report.rows[0].label == "ft+kd");
    CHECK(a.report.rows[1].label == "ft+kd+pl");
    for (const auto& row : a.report.rows) {
        REQUIRE(row.cells.size() == 3);
        for (const auto& cell : row.cells) {
            REQUIRE(cell.has_value());
            CHECK(cell->n == 2);
        }
    }

    REQUIRE(a.aggregate.contains("methods"));
    for (const auto& name : cfg.methods) {
        const auto& m = a.aggregate.at("methods").at(name);
        REQUIRE(m.at("per_run").size() == 2);
        for (const auto& run : m.at("per_run")) {
            for (const auto& col : want_columns) {
                CHECK(run.at("miou").contains(col));
            }
        }
        CHECK(m.at("stats").at("T_1u2").contains("text"));
    }
    REQUIRE(a.aggregate.at("runs").size() == 2);
    CHECK(a.aggregate.at("runs")[0].at("seed").get<std::uint64_t>() == 60);
    CHECK(a.aggregate.at("runs")[1].at("seed").get<std::uint64_t>() == 61);
    CHECK(a.aggregate.at("errors").empty());
    CHECK(a.aggregate.contains("table"));
}

TEST_CASE("experiment: few-shot sets are resampled per run from the run seed", "[trainer]") {
    const auto schedule = two_task_schedule();
    DatasetSplits data;
    data.labeled = world_set(10, 316, true, "l");
    data.unlabeled = world_pool(4, 419);
    data.validation = world_set(3, 420, true, "v");
    const GridStatsEmbedder embedder;

    ExperimentConfig cfg;
    cfg.arch = tiny_arch();
    cfg.train = fast_config(70);
    cfg.train.base_epochs = 1;
    cfg.train.phase1_epochs = 1;
    cfg.train.phase2_epochs = 1;
    cfg.runs = 2;
    cfg.shots = 2;
    cfg.methods = {"ft+kd"};

    const auto res = run_experiment(schedule, data, cfg, embedder);
    for (int r = 0; r < 2; ++r) {
        const auto want = sample_few_shot(data.labeled, schedule.task_classes(2), cfg.shots,
                                          mix_seed(cfg.train.seed + static_cast<std::uint64_t>(r), 2), 2);
        const auto& got = res.aggregate.at("runs")[r].at("fewshot").at("2");
        REQUIRE(got.size() == want.items.size());
        for (std::size_t i = 0; i < want.items.size(); ++i) {
            CHECK(got[i].get<std::string>() == want.items[i].stem);
        }
    }
}

TEST_CASE("experiment: config validation", "[trainer]") {
    ExperimentConfig cfg;
    cfg.runs = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.runs = 1;
    cfg.shots = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.shots = 1;
    cfg.methods = {};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.methods = {"bogus"};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.methods = {"ft", "ft"};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.methods = {"ft", "ft+kd", "ft+kd+pl"};
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("experiment: per-seed failures are reported without aborting the rest", "[trainer]") {
    const auto schedule = two_task_schedule();
    DatasetSplits data;
    data.labeled = world_set(4, 317, true, "l");
    data.validation = world_set(2, 421, true, "v");
    const GridStatsEmbedder embedder;

    ExperimentConfig cfg;
    cfg.arch = tiny_arch();
    cfg.train = fast_config(80);
    cfg.train.base_epochs = 1;
    cfg.runs = 2;
    cfg.shots = 999;  // sampling cannot satisfy this
    cfg.methods = {"ft+kd"};

    ExperimentResult res = run_experiment(schedule, data, cfg, embedder);
    REQUIRE(res.aggregate.at("errors").size() == 2);
    for (const auto& err : res.aggregate.at("errors")) {
        CHECK(err.contains("seed"));
        CHECK_FALSE(err.at("error").get<std::string>().empty());
    }
    REQUIRE(res.report.rows.size() == 1);
    for (const auto& cell : res.report.rows[0].cells) {
        CHECK_FALSE(cell.has_value());
    }
}
