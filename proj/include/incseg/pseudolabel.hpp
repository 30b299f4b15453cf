#pragma once

// Pseudo-label inference on retrieved neighborhood images, assembly of the
// augmented training collection, and quality diagnostics when ground truth
// happens to be available (synthetic data).
//
// The gate is deliberately narrow: a pixel is supervised only when the
// model's full-space argmax lands on a novel class with probability at least
// tau. Pixels whose argmax is an old class stay ignored; their supervision
// arrives through the distillation term instead, so the old-class signal is
// never counted twice.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "incseg/common.hpp"
#include "incseg/dataset.hpp"
#include "incseg/labelmap.hpp"
#include "incseg/losses.hpp"
#include "incseg/network.hpp"
#include "incseg/schedule.hpp"

namespace incseg {

enum class PseudoMode { hard, soft };

/// Hard pseudo-labels for one probability field. Argmax runs over every
/// channel with ties broken toward the lowest index; the winner is kept iff
/// it is a novel class and its probability clears `tau`.
inline LabelMap pseudo_label_map(const ProbMap& probs, const ClassSet& novel, double tau) {
    if (novel.empty()) throw UsageError("pseudo-labeling needs a non-empty novel class set");
    if (!(tau >= 0.0 && tau < 1.0)) throw ConfigError("confidence threshold must lie in [0, 1)");
    for (int c : novel.ids()) {
        if (c >= probs.channels) {
            throw ShapeError("novel class " + std::to_string(c) + " exceeds the " +
                             std::to_string(probs.channels) + "-channel probability field");
        }
    }

    LabelMap out(probs.height, probs.width);
    for (std::size_t l = 0; l < probs.pixel_count(); ++l) {
        int best = 0;
        for (int c = 1; c < probs.channels; ++c) {
            if (probs.at(l, c) > probs.at(l, best)) best = c;
        }
        const bool keep = novel.contains(best) && probs.at(l, best) >= tau;
        out.values[l] = keep ? static_cast<std::uint8_t>(best) : kIgnoreValue;
    }
    return out;
}

struct PseudoLabeledItem {
    int id = 0;  // pool id, unique within a set
    std::string stem;
    Image image;
    LabelMap labels;               // novel classes or the ignore value
    std::optional<ProbMap> soft;   // soft mode: full distribution on gated pixels, zero elsewhere
};

struct PseudoLabeledSet {
    std::vector<PseudoLabeledItem> items;  // ascending id
    ClassSet classes;                      // novel classes the labels draw from
    double tau = 0.0;
    int step = 0;                          // schedule step of the source model
    PseudoMode mode = PseudoMode::hard;
    std::string model_hash;                // parameter hash of the source model
};

/// Fraction of pixels carrying a pseudo-label. Zero for an empty set.
inline double pseudo_coverage(const PseudoLabeledSet& set) {
    std::uint64_t labeled = 0, total = 0;
    for (const auto& item : set.items) {
        total += item.labels.pixel_count();
        for (auto v : item.labels.values) labeled += v != kIgnoreValue;
    }
    return total == 0 ? 0.0 : static_cast<double>(labeled) / static_cast<double>(total);
}

/// Runs the model over the pool images named by `ids` and gates each pixel.
/// Items come back in ascending id order whatever the request order.
inline PseudoLabeledSet infer_pseudo_labels(const SegmentationModel& model, const UnlabeledPool& pool,
                                            const std::vector<int>& ids, const ClassSet& novel, double tau,
                                            PseudoMode mode = PseudoMode::hard) {
    std::unordered_map<int, std::size_t> index;
    for (std::size_t i = 0; i < pool.ids.size(); ++i) index.emplace(pool.ids[i], i);

    std::vector<int> sorted = ids;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        if (i > 0 && sorted[i] == sorted[i - 1]) {
            throw UsageError("duplicate image id " + std::to_string(sorted[i]) + " in pseudo-label request");
        }
        if (!index.count(sorted[i])) {
            throw UsageError("image id " + std::to_string(sorted[i]) + " not in the unlabeled pool");
        }
    }

    PseudoLabeledSet set;
    set.classes = novel;
    set.tau = tau;
    set.step = model.step();
    set.mode = mode;
    set.model_hash = model.param_hash_hex();
    for (int id : sorted) {
        const std::size_t i = index.at(id);
        PseudoLabeledItem item;
        item.id = id;
        item.stem = pool.stems[i];
        item.image = pool.items[i];
        const ProbMap probs = model.forward(item.image);
        item.labels = pseudo_label_map(probs, novel, tau);
        if (mode == PseudoMode::soft) {
            ProbMap gated(probs.height, probs.width, probs.channels);
            for (std::size_t l = 0; l < probs.pixel_count(); ++l) {
                if (item.labels.values[l] == kIgnoreValue) continue;
                for (int c = 0; c < probs.channels; ++c) gated.at(l, c) = probs.at(l, c);
            }
            item.soft = std::move(gated);
        }
        set.items.push_back(std::move(item));
    }
    return set;
}

/// One element of the retraining collection, tagged with the objective term
/// its cross-entropy feeds.
struct AugmentedItem {
    std::string stem;
    Image image;
    LabelMap labels;
    SampleSource source = SampleSource::fewshot;
};

/// Deterministic merge for retraining: few-shot items in their given order,
/// then pseudo-labeled items by ascending id.
inline std::vector<AugmentedItem> assemble_augmented_set(const FewShotSet& fewshot, const PseudoLabeledSet& pseudo) {
    if (fewshot.task_index != pseudo.step) {
        throw UsageError("few-shot set from step " + std::to_string(fewshot.task_index) +
                         " cannot merge with pseudo-labels from step " + std::to_string(pseudo.step));
    }
    std::unordered_set<int> seen;
    for (const auto& item : pseudo.items) {
        if (!seen.insert(item.id).second) {
            throw UsageError("duplicate pseudo-label id " + std::to_string(item.id));
        }
    }

    std::vector<AugmentedItem> out;
    out.reserve(fewshot.items.size() + pseudo.items.size());
    for (const auto& s : fewshot.items) {
        out.push_back(AugmentedItem{s.stem, s.image, s.labels, SampleSource::fewshot});
    }
    std::vector<const PseudoLabeledItem*> ordered;
    ordered.reserve(pseudo.items.size());
    for (const auto& item : pseudo.items) ordered.push_back(&item);
    std::sort(ordered.begin(), ordered.end(), [](const auto* a, const auto* b) { return a->id < b->id; });
    for (const auto* item : ordered) {
        out.push_back(AugmentedItem{item->stem, item->image, item->labels, SampleSource::pseudo});
    }
    return out;
}

struct ClassQuality {
    std::uint64_t predicted = 0;  // pixels pseudo-labeled with the class (judgeable ones)
    std::uint64_t correct = 0;    // of those, pixels whose ground truth agrees
    std::uint64_t actual = 0;     // ground-truth pixels of the class
    std::optional<double> precision;  // absent when nothing was predicted
    std::optional<double> recall;     // absent when the class is missing from the truth
};

struct PseudoQualityReport {
    std::map<int, ClassQuality> per_class;  // one entry per declared novel class; empty without ground truth
    std::uint64_t labeled_pixels = 0;
    std::uint64_t total_pixels = 0;
    double coverage = 0.0;
};

/// Coverage-only report for the usual case of truly unlabeled data.
inline PseudoQualityReport pseudo_label_quality_report(const PseudoLabeledSet& set) {
    PseudoQualityReport r;
    for (const auto& item : set.items) {
        r.total_pixels += item.labels.pixel_count();
        for (auto v : item.labels.values) r.labeled_pixels += v != kIgnoreValue;
    }
    r.coverage = r.total_pixels == 0 ? 0.0 : static_cast<double>(r.labeled_pixels) / static_cast<double>(r.total_pixels);
    return r;
}

/// Full report against ground truth keyed by pool id. Pixels whose truth is
/// the ignore value cannot be judged and stay out of the per-class tallies;
/// coverage still counts every pixel.
inline PseudoQualityReport pseudo_label_quality_report(const PseudoLabeledSet& set,
                                                       const std::map<int, LabelMap>& gt_by_id) {
    PseudoQualityReport r = pseudo_label_quality_report(set);
    for (int c : set.classes.ids()) r.per_class.emplace(c, ClassQuality{});

    for (const auto& item : set.items) {
        const auto it = gt_by_id.find(item.id);
        if (it == gt_by_id.end()) {
            throw DataError("no ground truth for image id " + std::to_string(item.id));
        }
        const LabelMap& truth = it->second;
        if (truth.height != item.labels.height || truth.width != item.labels.width) {
            throw ShapeError("ground truth shape differs for image id " + std::to_string(item.id));
        }
        for (std::size_t l = 0; l < truth.pixel_count(); ++l) {
            const int pv = item.labels.values[l];
            if (pv != kIgnoreValue && !set.classes.contains(pv)) {
                throw DataError("pseudo label " + std::to_string(pv) + " outside the declared class set");
            }
            const int tv = truth.values[l];
            if (tv == kIgnoreValue) continue;
            if (pv != kIgnoreValue) {
                auto& q = r.per_class.at(pv);
                q.predicted += 1;
                q.correct += pv == tv;
            }
            if (set.classes.contains(tv)) r.per_class.at(tv).actual += 1;
        }
    }
    for (auto& [c, q] : r.per_class) {
        if (q.predicted > 0) q.precision = static_cast<double>(q.correct) / static_cast<double>(q.predicted);
        if (q.actual > 0) q.recall = static_cast<double>(q.correct) / static_cast<double>(q.actual);
    }
    return r;
}

/// Writes one label PNG per item (same format as ground truth) plus a
/// pseudo_meta.json sidecar recording tau, step, and the source model hash.
/// Returns the sidecar path. Output bytes depend only on the set.
inline std::filesystem::path dump_pseudo_labels(const PseudoLabeledSet& set, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json items = nlohmann::json::array();
    for (const auto& item : set.items) {
        const std::string file = item.stem + ".png";
        encode_labelmap(dir / file, item.labels);
        std::uint64_t labeled = 0;
        for (auto v : item.labels.values) labeled += v != kIgnoreValue;
        items.push_back({{"id", item.id}, {"stem", item.stem}, {"file", file}, {"labeled_pixels", labeled}});
    }
    nlohmann::json meta{{"tau", set.tau},
                        {"step", set.step},
                        {"mode", set.mode == PseudoMode::hard ? "hard" : "soft"},
                        {"model_hash", set.model_hash},
                        {"classes", set.classes.ids()},
                        {"coverage", pseudo_coverage(set)},
                        {"items", items}};
    const auto sidecar = dir / "pseudo_meta.json";
    std::ofstream out(sidecar, std::ios::binary);
    if (!out) throw DataError("cannot write " + sidecar.string());
    out << meta.dump(2) << '\n';
    return sidecar;
}

}  // namespace incseg
