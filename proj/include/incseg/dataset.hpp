#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "incseg/common.hpp"
#include "incseg/image.hpp"
#include "incseg/labelmap.hpp"
#include "incseg/rng.hpp"
#include "incseg/schedule.hpp"

namespace incseg {

struct LabeledSample {
    std::string stem;
    Image image;
    LabelMap labels;
};

/// Images without ground truth. Ids are 1-based, unique, and stable for the
/// lifetime of a run; retrieval results refer to these ids.
struct UnlabeledPool {
    std::vector<std::string> stems;
    std::vector<Image> items;
    std::vector<int> ids;

    int size() const { return static_cast<int>(items.size()); }
};

struct DatasetSplits {
    std::vector<LabeledSample> labeled;
    UnlabeledPool unlabeled;
    std::vector<LabeledSample> validation;
};

/// Replaces every label outside `keep` with the ignore value.
inline LabelMap mask_to_classes(const LabelMap& labels, const ClassSet& keep) {
    LabelMap out = labels;
    for (auto& v : out.values) {
        if (!keep.contains(v)) v = kIgnoreValue;
    }
    return out;
}

namespace detail {

inline LabeledSample load_labeled_sample(const std::filesystem::path& root, const std::string& stem,
                                         const ClassSet& declared) {
    LabeledSample sample;
    sample.stem = stem;
    const auto image_path = root / "images" / (stem + ".png");
    const auto label_path = root / "labels" / (stem + ".png");
    if (!std::filesystem::exists(image_path)) throw DataError("missing image for stem \"" + stem + "\"");
    if (!std::filesystem::exists(label_path)) throw DataError("missing labels for stem \"" + stem + "\"");
    sample.image = read_png_rgb(image_path);
    sample.labels = decode_labelmap(label_path);
    if (sample.image.height != sample.labels.height || sample.image.width != sample.labels.width) {
        throw DataError("image/label size mismatch for stem \"" + stem + "\"");
    }
    for (auto v : sample.labels.values) {
        if (v != kIgnoreValue && !declared.contains(v)) {
            throw DataError("label value " + std::to_string(static_cast<int>(v)) + " in stem \"" + stem +
                            "\" is outside the declared classes");
        }
    }
    return sample;
}

}  // namespace detail

/// Reads the three splits listed by the manifest. Labeled and validation
/// stems need both an image and a label map; unlabeled stems an image only.
/// Label values are validated against the union of all scheduled classes.
inline DatasetSplits load_dataset(const std::filesystem::path& root, const std::filesystem::path& manifest_path,
                                  const TaskSchedule& schedule) {
    std::ifstream in(manifest_path);
    if (!in) throw DataError("cannot open manifest: " + manifest_path.string());
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("invalid manifest JSON in " + manifest_path.string() + ": " + e.what());
    }
    if (!manifest.contains("splits")) throw DataError("manifest lacks a \"splits\" object");

    const auto stems_of = [&](const char* split) {
        std::vector<std::string> stems;
        for (const auto& s : manifest["splits"].value(split, nlohmann::json::array())) {
            stems.push_back(s.get<std::string>());
        }
        return stems;
    };

    const ClassSet declared = schedule.classes_up_to(schedule.task_count());
    DatasetSplits splits;
    for (const auto& stem : stems_of("labeled")) {
        splits.labeled.push_back(detail::load_labeled_sample(root, stem, declared));
    }
    for (const auto& stem : stems_of("validation")) {
        splits.validation.push_back(detail::load_labeled_sample(root, stem, declared));
    }
    for (const auto& stem : stems_of("unlabeled")) {
        const auto image_path = root / "images" / (stem + ".png");
        if (!std::filesystem::exists(image_path)) throw DataError("missing image for stem \"" + stem + "\"");
        splits.unlabeled.stems.push_back(stem);
        splits.unlabeled.items.push_back(read_png_rgb(image_path));
        splits.unlabeled.ids.push_back(splits.unlabeled.size());
    }
    return splits;
}

/// The few labeled images for one incremental task. Ground truth keeps only
/// pixels of the task's classes; everything else is the ignore value.
struct FewShotSet {
    std::vector<LabeledSample> items;
    int task_index = 0;
    int shots = 0;
    ClassSet classes;
};

inline constexpr std::uint64_t kFewShotStream = 0xf357ULL;

/// Draws `shots` images containing at least one pixel of `classes`, without
/// replacement, deterministically under (seed). Selected ground truth is
/// re-masked so only task classes remain labeled.
inline FewShotSet sample_few_shot(const std::vector<LabeledSample>& split, const ClassSet& classes, int shots,
                                  std::uint64_t seed, int task_index = 0) {
    if (shots < 1) throw ConfigError("few-shot sampling needs shots >= 1");
    if (classes.empty()) throw ConfigError("few-shot sampling needs a non-empty class set");

    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < split.size(); ++i) {
        for (auto v : split[i].labels.values) {
            if (classes.contains(v)) {
                eligible.push_back(i);
                break;
            }
        }
    }
    if (static_cast<int>(eligible.size()) < shots) {
        throw DataError("few-shot sampling needs " + std::to_string(shots) + " image(s) with task classes, found " +
                        std::to_string(eligible.size()));
    }

    Rng rng(mix_seed(seed, kFewShotStream));
    rng.shuffle(eligible);

    FewShotSet out;
    out.task_index = task_index;
    out.shots = shots;
    out.classes = classes;
    for (int i = 0; i < shots; ++i) {
        const auto& src = split[eligible[static_cast<std::size_t>(i)]];
        LabeledSample item;
        item.stem = src.stem;
        item.image = src.image;
        item.labels = mask_to_classes(src.labels, classes);
        out.items.push_back(std::move(item));
    }
    return out;
}

}  // namespace incseg
