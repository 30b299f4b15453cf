#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <vector>

#include <json.hpp>

#include "helpers.hpp"
#include "incseg/pseudolabel.hpp"

using namespace incseg;
using testutil::random_logits;
using testutil::softmax;

namespace {

ProbMap pixel_probs(int h, int w, int c, std::vector<double> flat) {
    ProbMap p(h, w, c);
    p.v = std::move(flat);
    return p;
}

ArchConfig tiny_arch() {
    ArchConfig a;
    a.widths = {3, 4, 5, 6};
    return a;
}

Image random_image(int h, int w, Rng& rng) {
    Image img(h, w);
    for (auto& b : img.rgb) b = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    return img;
}

UnlabeledPool make_pool(int n, int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    UnlabeledPool pool;
    for (int i = 1; i <= n; ++i) {
        pool.stems.push_back("u" + std::to_string(1000 + i));
        pool.items.push_back(random_image(h, w, rng));
        pool.ids.push_back(i);
    }
    return pool;
}

std::filesystem::path fresh_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() / ("incseg_pl_" + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Gate oracle at tau = 0: full-space argmax with lowest-index tie-break,
/// kept only when a novel class wins.
LabelMap argmax_gate_oracle(const ProbMap& probs, const ClassSet& novel) {
    LabelMap out(probs.height, probs.width);
    for (std::size_t l = 0; l < probs.pixel_count(); ++l) {
        int best = 0;
        for (int c = 1; c < probs.channels; ++c) {
            if (probs.at(l, c) > probs.at(l, best)) best = c;
        }
        out.values[l] = novel.contains(best) ? static_cast<std::uint8_t>(best) : kIgnoreValue;
    }
    return out;
}

}  // namespace

TEST_CASE("gate hand case: confident novel argmax passes, timid one does not", "[pseudolabel]") {
    const ProbMap p = pixel_probs(1, 1, 3, {0.1, 0.7, 0.2});
    const ClassSet novel({1, 2});
    CHECK(pseudo_label_map(p, novel, 0.5).at(0) == 1);
    CHECK(pseudo_label_map(p, novel, 0.75).at(0) == kIgnoreValue);
}

TEST_CASE("gate: old-class argmax is ignored regardless of confidence", "[pseudolabel]") {
    const ProbMap p = pixel_probs(1, 1, 3, {0.8, 0.1, 0.1});
    const ClassSet novel({1, 2});
    CHECK(pseudo_label_map(p, novel, 0.0).at(0) == kIgnoreValue);
    CHECK(pseudo_label_map(p, novel, 0.5).at(0) == kIgnoreValue);
}

TEST_CASE("gate: argmax ties go to the lowest class index", "[pseudolabel]") {
    const ClassSet novel({1, 2});
    const ProbMap among_novel = pixel_probs(1, 1, 3, {0.2, 0.4, 0.4});
    CHECK(pseudo_label_map(among_novel, novel, 0.3).at(0) == 1);

    // the old class wins the tie, so the pixel is ignored
    const ProbMap old_vs_novel = pixel_probs(1, 1, 3, {0.4, 0.4, 0.2});
    CHECK(pseudo_label_map(old_vs_novel, novel, 0.0).at(0) == kIgnoreValue);
}

TEST_CASE("gate: threshold outside [0, 1) is rejected", "[pseudolabel]") {
    const ProbMap p = pixel_probs(1, 1, 2, {0.5, 0.5});
    const ClassSet novel({1});
    CHECK_THROWS_AS(pseudo_label_map(p, novel, 1.0), ConfigError);
    CHECK_THROWS_AS(pseudo_label_map(p, novel, 1.5), ConfigError);
    CHECK_THROWS_AS(pseudo_label_map(p, novel, -0.01), ConfigError);
    CHECK_NOTHROW(pseudo_label_map(p, novel, 0.0));
}

TEST_CASE("gate: class set must fit the probability field", "[pseudolabel]") {
    const ProbMap p = pixel_probs(1, 1, 3, {0.2, 0.5, 0.3});
    CHECK_THROWS_AS(pseudo_label_map(p, ClassSet({3}), 0.5), ShapeError);
    CHECK_THROWS_AS(pseudo_label_map(p, ClassSet(), 0.5), UsageError);
}

TEST_CASE("tau = 0 reduces to argmax restricted to winning novel classes", "[pseudolabel]") {
    Rng rng(411);
    for (int trial = 0; trial < 50; ++trial) {
        const int c = rng.uniform_int(2, 6);
        const int h = rng.uniform_int(1, 7);
        const int w = rng.uniform_int(1, 7);
        const ProbMap probs = softmax(random_logits(h, w, c, rng));
        std::vector<int> novel_ids;
        const int split = rng.uniform_int(1, c - 1);
        for (int id = split; id < c; ++id) novel_ids.push_back(id);
        const ClassSet novel(novel_ids);

        const LabelMap got = pseudo_label_map(probs, novel, 0.0);
        const LabelMap want = argmax_gate_oracle(probs, novel);
        REQUIRE(got.values == want.values);
    }
}

TEST_CASE("raising tau never increases coverage and never flips a kept label", "[pseudolabel]") {
    Rng rng(877);
    const ProbMap probs = softmax(random_logits(12, 12, 5, rng));
    const ClassSet novel({3, 4});

    LabelMap prev = pseudo_label_map(probs, novel, 0.0);
    std::size_t prev_cover = prev.pixel_count() - [&] {
        std::size_t n = 0;
        for (auto v : prev.values) n += v == kIgnoreValue;
        return n;
    }();
    for (double tau : {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}) {
        const LabelMap cur = pseudo_label_map(probs, novel, tau);
        std::size_t cover = 0;
        for (std::size_t l = 0; l < cur.pixel_count(); ++l) {
            if (cur.values[l] == kIgnoreValue) continue;
            ++cover;
            // a pixel surviving the stricter gate keeps its label
            REQUIRE(cur.values[l] == prev.values[l]);
        }
        REQUIRE(cover <= prev_cover);
        prev = cur;
        prev_cover = cover;
    }
}

TEST_CASE("monotone per-pixel rescaling preserves the tau = 0 selection only", "[pseudolabel]") {
    Rng rng(9313);
    const ProbMap probs = softmax(random_logits(9, 9, 4, rng));
    ProbMap cubed = probs;
    for (auto& v : cubed.v) v = v * v * v;
    const ClassSet novel({2, 3});

    CHECK(pseudo_label_map(probs, novel, 0.0).values == pseudo_label_map(cubed, novel, 0.0).values);

    // the magnitude gate is not transform-invariant
    const ProbMap edge = pixel_probs(1, 1, 2, {0.45, 0.55});
    CHECK(pseudo_label_map(edge, ClassSet({1}), 0.5).at(0) == 1);
    ProbMap edge_cubed = edge;
    for (auto& v : edge_cubed.v) v = v * v * v;
    CHECK(pseudo_label_map(edge_cubed, ClassSet({1}), 0.5).at(0) == kIgnoreValue);
}

TEST_CASE("pool inference: ascending ids, recorded provenance, per-image maps", "[pseudolabel]") {
    SegmentationModel model(tiny_arch(), 5, 20240u);
    model.set_step(2);
    const UnlabeledPool pool = make_pool(6, 16, 16, 51);
    const ClassSet novel({3, 4});

    const auto set = infer_pseudo_labels(model, pool, {5, 2, 6}, novel, 0.4);
    REQUIRE(set.items.size() == 3);
    CHECK(set.items[0].id == 2);
    CHECK(set.items[1].id == 5);
    CHECK(set.items[2].id == 6);
    CHECK(set.items[0].stem == pool.stems[1]);
    CHECK(set.tau == 0.4);
    CHECK(set.step == 2);
    CHECK(set.mode == PseudoMode::hard);
    CHECK(set.model_hash == model.param_hash_hex());

    const LabelMap direct = pseudo_label_map(model.forward(pool.items[4]), novel, 0.4);
    CHECK(set.items[1].labels.values == direct.values);
    CHECK_FALSE(set.items[1].soft.has_value());
}

TEST_CASE("pool inference rejects unknown and duplicate ids", "[pseudolabel]") {
    SegmentationModel model(tiny_arch(), 5, 20240u);
    const UnlabeledPool pool = make_pool(4, 8, 8, 52);
    const ClassSet novel({3, 4});

    CHECK_THROWS_MATCHES(infer_pseudo_labels(model, pool, {1, 99}, novel, 0.5), UsageError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("99")));
    CHECK_THROWS_AS(infer_pseudo_labels(model, pool, {2, 2}, novel, 0.5), UsageError);
    CHECK(infer_pseudo_labels(model, pool, {}, novel, 0.5).items.empty());
}

TEST_CASE("near-uniform model at tau = 0.99 yields valid empty supervision", "[pseudolabel]") {
    // a freshly initialized head emits close-to-uniform probabilities
    SegmentationModel model(tiny_arch(), 5, 7u);
    model.set_step(2);
    const UnlabeledPool pool = make_pool(3, 16, 16, 53);

    const auto set = infer_pseudo_labels(model, pool, {1, 2, 3}, ClassSet({3, 4}), 0.99);
    REQUIRE(set.items.size() == 3);
    for (const auto& item : set.items) {
        for (auto v : item.labels.values) CHECK(v == kIgnoreValue);
    }
    CHECK(pseudo_coverage(set) == 0.0);
}

TEST_CASE("soft mode stores distributions only for gated pixels", "[pseudolabel]") {
    SegmentationModel model(tiny_arch(), 5, 99u);
    model.set_step(2);
    const UnlabeledPool pool = make_pool(2, 16, 16, 54);
    const ClassSet novel({3, 4});

    const auto hard = infer_pseudo_labels(model, pool, {1, 2}, novel, 0.25, PseudoMode::hard);
    const auto soft = infer_pseudo_labels(model, pool, {1, 2}, novel, 0.25, PseudoMode::soft);
    REQUIRE(soft.items.size() == 2);
    CHECK(soft.mode == PseudoMode::soft);

    for (std::size_t i = 0; i < soft.items.size(); ++i) {
        const auto& item = soft.items[i];
        CHECK(item.labels.values == hard.items[i].labels.values);
        REQUIRE(item.soft.has_value());
        const ProbMap full = model.forward(pool.items[item.id - 1]);
        for (std::size_t l = 0; l < item.labels.pixel_count(); ++l) {
            if (item.labels.values[l] == kIgnoreValue) {
                for (int c = 0; c < item.soft->channels; ++c) CHECK(item.soft->at(l, c) == 0.0);
            } else {
                double sum = 0.0;
                for (int c = 0; c < item.soft->channels; ++c) {
                    CHECK(item.soft->at(l, c) == full.at(l, c));
                    sum += item.soft->at(l, c);
                }
                CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-9));
            }
        }
    }
}

TEST_CASE("assembly: few-shot first, then pseudo by ascending id", "[pseudolabel]") {
    FewShotSet fs;
    fs.task_index = 2;
    fs.shots = 2;
    fs.classes = ClassSet({3, 4});
    for (const char* stem : {"fsA", "fsB"}) {
        LabeledSample s;
        s.stem = stem;
        s.image = Image(4, 4);
        s.labels = LabelMap(4, 4, 3);
        fs.items.push_back(std::move(s));
    }

    PseudoLabeledSet pl;
    pl.tau = 0.5;
    pl.step = 2;
    for (int id : {7, 3}) {
        PseudoLabeledItem item;
        item.id = id;
        item.stem = "u" + std::to_string(id);
        item.image = Image(4, 4);
        item.labels = LabelMap(4, 4, 4);
        pl.items.push_back(std::move(item));
    }

    const auto merged = assemble_augmented_set(fs, pl);
    REQUIRE(merged.size() == 4);
    CHECK(merged[0].stem == "fsA");
    CHECK(merged[1].stem == "fsB");
    CHECK(merged[2].stem == "u3");
    CHECK(merged[3].stem == "u7");
    CHECK(merged[0].source == SampleSource::fewshot);
    CHECK(merged[1].source == SampleSource::fewshot);
    CHECK(merged[2].source == SampleSource::pseudo);
    CHECK(merged[3].source == SampleSource::pseudo);
}

TEST_CASE("assembly rejects step mismatch and duplicate pseudo ids", "[pseudolabel]") {
    FewShotSet fs;
    fs.task_index = 2;
    LabeledSample s;
    s.stem = "fs";
    s.image = Image(2, 2);
    s.labels = LabelMap(2, 2, 3);
    fs.items.push_back(std::move(s));

    PseudoLabeledSet pl;
    pl.step = 3;
    CHECK_THROWS_AS(assemble_augmented_set(fs, pl), UsageError);

    pl.step = 2;
    for (int i = 0; i < 2; ++i) {
        PseudoLabeledItem item;
        item.id = 5;
        item.stem = "u5";
        item.image = Image(2, 2);
        item.labels = LabelMap(2, 2);
        pl.items.push_back(std::move(item));
    }
    CHECK_THROWS_AS(assemble_augmented_set(fs, pl), UsageError);
}

TEST_CASE("assembly with an empty pseudo set degrades to the few-shot set", "[pseudolabel]") {
    FewShotSet fs;
    fs.task_index = 2;
    for (const char* stem : {"a", "b", "c"}) {
        LabeledSample s;
        s.stem = stem;
        s.image = Image(2, 2);
        s.labels = LabelMap(2, 2, 3);
        fs.items.push_back(std::move(s));
    }
    PseudoLabeledSet pl;
    pl.step = 2;

    const auto merged = assemble_augmented_set(fs, pl);
    REQUIRE(merged.size() == 3);
    for (std::size_t i = 0; i < merged.size(); ++i) {
        CHECK(merged[i].stem == fs.items[i].stem);
        CHECK(merged[i].source == SampleSource::fewshot);
    }
}

TEST_CASE("quality: pseudo labels equal to ground truth score unit precision and recall", "[pseudolabel]") {
    Rng rng(606);
    const ClassSet novel({3, 4});
    PseudoLabeledSet set;
    set.classes = novel;
    set.tau = 0.5;
    set.step = 2;
    std::map<int, LabelMap> gt;
    std::size_t novel_pixels = 0;
    for (int id : {1, 2}) {
        LabelMap truth = testutil::random_labels(8, 8, 5, rng, 0.2);
        PseudoLabeledItem item;
        item.id = id;
        item.stem = "u" + std::to_string(id);
        item.image = Image(8, 8);
        item.labels = mask_to_classes(truth, novel);
        for (auto v : item.labels.values) novel_pixels += v != kIgnoreValue;
        set.items.push_back(std::move(item));
        gt.emplace(id, std::move(truth));
    }

    const auto report = pseudo_label_quality_report(set, gt);
    for (int c : novel.ids()) {
        REQUIRE(report.per_class.count(c) == 1);
        const auto& q = report.per_class.at(c);
        REQUIRE(q.precision.has_value());
        REQUIRE(q.recall.has_value());
        CHECK(*q.precision == 1.0);
        CHECK(*q.recall == 1.0);
    }
    CHECK(report.labeled_pixels == novel_pixels);
    CHECK_THAT(report.coverage, Catch::Matchers::WithinAbs(static_cast<double>(novel_pixels) / (2 * 64), 1e-12));
}

TEST_CASE("quality: fully ignored pseudo set reports zero coverage and absent precision", "[pseudolabel]") {
    const ClassSet novel({3, 4});
    PseudoLabeledSet set;
    set.classes = novel;
    set.step = 2;
    PseudoLabeledItem item;
    item.id = 1;
    item.stem = "u1";
    item.image = Image(6, 6);
    item.labels = LabelMap(6, 6, kIgnoreValue);
    set.items.push_back(std::move(item));

    std::map<int, LabelMap> gt;
    gt.emplace(1, LabelMap(6, 6, 3));  // class 3 everywhere

    const auto report = pseudo_label_quality_report(set, gt);
    CHECK(report.coverage == 0.0);
    REQUIRE(report.per_class.count(3) == 1);
    CHECK_FALSE(report.per_class.at(3).precision.has_value());
    REQUIRE(report.per_class.at(3).recall.has_value());
    CHECK(*report.per_class.at(3).recall == 0.0);
    // class 4 never occurs in the truth, so recall is undefined for it
    CHECK_FALSE(report.per_class.at(4).recall.has_value());
}

TEST_CASE("quality report matches a counting oracle on random data", "[pseudolabel]") {
    Rng rng(7337);
    const ClassSet novel({3, 4});
    for (int trial = 0; trial < 20; ++trial) {
        PseudoLabeledSet set;
        set.classes = novel;
        set.step = 2;
        std::map<int, LabelMap> gt;
        const int n = rng.uniform_int(1, 3);
        for (int id = 1; id <= n; ++id) {
            PseudoLabeledItem item;
            item.id = id;
            item.stem = "u" + std::to_string(id);
            item.image = Image(7, 7);
            LabelMap pl(7, 7);
            for (auto& v : pl.values) {
                const int roll = rng.uniform_int(0, 2);
                v = roll == 0 ? 3 : roll == 1 ? 4 : kIgnoreValue;
            }
            item.labels = std::move(pl);
            set.items.push_back(std::move(item));
            gt.emplace(id, testutil::random_labels(7, 7, 5, rng, 0.15));
        }

        std::map<int, std::uint64_t> predicted, correct, actual;
        std::uint64_t labeled = 0, total = 0;
        for (const auto& item : set.items) {
            const auto& truth = gt.at(item.id);
            for (std::size_t l = 0; l < truth.pixel_count(); ++l) {
                ++total;
                const int pv = item.labels.values[l];
                if (pv != kIgnoreValue) ++labeled;
                const int tv = truth.values[l];
                if (tv == kIgnoreValue) continue;  // unjudgeable pixels stay out of the tallies
                for (int c : novel.ids()) {
                    if (pv == c) ++predicted[c];
                    if (pv == c && tv == c) ++correct[c];
                    if (tv == c) ++actual[c];
                }
            }
        }

        const auto report = pseudo_label_quality_report(set, gt);
        REQUIRE(report.labeled_pixels == labeled);
        REQUIRE(report.total_pixels == total);
        for (int c : novel.ids()) {
            const auto& q = report.per_class.at(c);
            REQUIRE(q.predicted == predicted[c]);
            REQUIRE(q.correct == correct[c]);
            REQUIRE(q.actual == actual[c]);
            if (predicted[c] == 0) {
                REQUIRE_FALSE(q.precision.has_value());
            } else {
                REQUIRE(*q.precision == static_cast<double>(correct[c]) / predicted[c]);
            }
            if (actual[c] == 0) {
                REQUIRE_FALSE(q.recall.has_value());
            } else {
                REQUIRE(*q.recall == static_cast<double>(correct[c]) / actual[c]);
            }
        }
    }
}

TEST_CASE("quality: ground truth must cover every item id", "[pseudolabel]") {
    PseudoLabeledSet set;
    set.classes = ClassSet({3});
    set.step = 2;
    PseudoLabeledItem item;
    item.id = 42;
    item.stem = "u42";
    item.image = Image(2, 2);
    item.labels = LabelMap(2, 2, 3);
    set.items.push_back(std::move(item));

    CHECK_THROWS_MATCHES(pseudo_label_quality_report(set, {}), DataError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("42")));

    // without ground truth only coverage is reported
    const auto report = pseudo_label_quality_report(set);
    CHECK(report.per_class.empty());
    CHECK(report.coverage == 1.0);
}

TEST_CASE("dumps: label PNGs with a provenance sidecar, byte-stable", "[pseudolabel]") {
    SegmentationModel model(tiny_arch(), 5, 31u);
    model.set_step(2);
    const UnlabeledPool pool = make_pool(3, 8, 8, 55);
    const auto set = infer_pseudo_labels(model, pool, {1, 3}, ClassSet({3, 4}), 0.3);

    const auto dir_a = fresh_dir("dump_a");
    const auto sidecar = dump_pseudo_labels(set, dir_a);
    REQUIRE(std::filesystem::exists(sidecar));

    for (const auto& item : set.items) {
        const auto png = dir_a / (item.stem + ".png");
        REQUIRE(std::filesystem::exists(png));
        CHECK(decode_labelmap(png).values == item.labels.values);
    }

    const auto meta = nlohmann::json::parse(slurp(sidecar));
    CHECK(meta.at("tau").get<double>() == 0.3);
    CHECK(meta.at("step").get<int>() == 2);
    CHECK(meta.at("mode").get<std::string>() == "hard");
    CHECK(meta.at("model_hash").get<std::string>() == model.param_hash_hex());
    REQUIRE(meta.at("items").size() == 2);
    CHECK(meta.at("items")[0].at("id").get<int>() == 1);
    CHECK(meta.at("items")[1].at("id").get<int>() == 3);

    const auto dir_b = fresh_dir("dump_b");
    dump_pseudo_labels(set, dir_b);
    for (const auto& item : set.items) {
        CHECK(slurp(dir_a / (item.stem + ".png")) == slurp(dir_b / (item.stem + ".png")));
    }
    CHECK(slurp(dir_a / "pseudo_meta.json") == slurp(dir_b / "pseudo_meta.json"));
}
