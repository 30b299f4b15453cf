#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "incseg/common.hpp"
#include "incseg/labelmap.hpp"
#include "incseg/schedule.hpp"

namespace incseg {

/// Boolean pixel grid; true marks pixels that belong to the masked set.
struct PixelMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> bits;
    std::size_t count = 0;

    PixelMask() = default;
    PixelMask(int h, int w) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, 0) {}

    bool at(std::size_t pixel) const { return bits[pixel] != 0; }
};

/// Pixels whose ground-truth value is a member of `classes`. Ignore-valued
/// pixels are never members.
inline PixelMask labeled_pixels(const LabelMap& labels, const ClassSet& classes) {
    PixelMask mask(labels.height, labels.width);
    for (std::size_t l = 0; l < labels.pixel_count(); ++l) {
        const int v = labels.at(l);
        if (v != kIgnoreValue && classes.contains(v)) {
            mask.bits[l] = 1;
            ++mask.count;
        }
    }
    return mask;
}

struct LossResult {
    double value = 0.0;
    Tensor3 grad_logits;  // same shape as the student probability map
};

namespace detail {

constexpr double kLogFloor = 1e-12;  // keeps log() finite; far below test tolerances

inline void check_same_shape(const Tensor3& probs, const LabelMap& labels) {
    if (probs.height != labels.height || probs.width != labels.width) {
        throw ShapeError("probability map and label map dimensions differ");
    }
}

}  // namespace detail

/// Mean negative log-likelihood over the pixels labeled with `classes`.
/// Returns 0 with a zero gradient when no pixel is masked. The gradient is
/// taken w.r.t. the logits that produced `pred` through a softmax.
inline LossResult masked_cross_entropy(const ProbMap& pred, const LabelMap& labels, const ClassSet& classes) {
    detail::check_same_shape(pred, labels);
    LossResult r;
    r.grad_logits = Tensor3(pred.height, pred.width, pred.channels);
    const PixelMask mask = labeled_pixels(labels, classes);
    if (mask.count == 0) return r;

    const double inv_count = 1.0 / static_cast<double>(mask.count);
    double sum = 0.0;
    for (std::size_t l = 0; l < labels.pixel_count(); ++l) {
        if (!mask.at(l)) continue;
        const int y = labels.at(l);
        if (y >= pred.channels) {
            throw DataError("label class " + std::to_string(y) + " not covered by the prediction's " +
                            std::to_string(pred.channels) + " channels");
        }
        sum -= std::log(std::max(pred.at(l, y), detail::kLogFloor));
        // d/dz_c of -log softmax(z)_y is p_c - [c == y]
        for (int c = 0; c < pred.channels; ++c) {
            r.grad_logits.at(l, c) = (pred.at(l, c) - (c == y ? 1.0 : 0.0)) * inv_count;
        }
    }
    r.value = sum * inv_count;
    return r;
}

/// Knowledge-distillation term: teacher/student cross-entropy over the old
/// classes, averaged over the pixels NOT labeled with a novel class. That
/// complement includes ignore-valued pixels. Returns 0 when it is empty.
inline LossResult distillation_loss(const ProbMap& student, const ProbMap& teacher, const LabelMap& labels,
                                    const ClassSet& novel_classes, const ClassSet& old_classes) {
    detail::check_same_shape(student, labels);
    if (teacher.height != student.height || teacher.width != student.width) {
        throw ShapeError("teacher and student probability map dimensions differ");
    }
    for (int c : old_classes.ids()) {
        if (c >= teacher.channels || c >= student.channels) {
            throw ShapeError("old class " + std::to_string(c) + " not covered by teacher/student channels");
        }
    }

    LossResult r;
    r.grad_logits = Tensor3(student.height, student.width, student.channels);
    const PixelMask novel_mask = labeled_pixels(labels, novel_classes);
    const std::size_t complement = labels.pixel_count() - novel_mask.count;
    if (complement == 0) return r;

    const double inv_count = 1.0 / static_cast<double>(complement);
    double sum = 0.0;
    for (std::size_t l = 0; l < labels.pixel_count(); ++l) {
        if (novel_mask.at(l)) continue;
        // teacher mass on the old classes; 1 for a normalized teacher, but
        // the gradient stays exact for any input
        double teacher_mass = 0.0;
        for (int c : old_classes.ids()) {
            const double t = teacher.at(l, c);
            teacher_mass += t;
            sum -= t * std::log(std::max(student.at(l, c), detail::kLogFloor));
        }
        for (int c = 0; c < student.channels; ++c) {
            const double t = old_classes.contains(c) ? teacher.at(l, c) : 0.0;
            r.grad_logits.at(l, c) = (teacher_mass * student.at(l, c) - t) * inv_count;
        }
    }
    r.value = sum * inv_count;
    return r;
}

/// Which objective term a training sample feeds: the few-shot CE term or the
/// pseudo-label CE term.
enum class SampleSource { fewshot, pseudo };

/// Per-term multipliers for the unified objective. All default to 1.
struct LossWeights {
    double fewshot_ce = 1.0;
    double pseudo_ce = 1.0;
    double kd = 1.0;
};

/// Unified objective for one sample: the applicable CE term plus the KD term
/// for t > 1, plain CE over C_1 for the base task. `teacher` may be null only
/// when no KD applies (t == 1, or a zero KD weight).
inline LossResult total_objective(const ProbMap& student, const ProbMap* teacher, const LabelMap& labels,
                                  SampleSource source, const TaskSchedule& schedule, int t,
                                  const LossWeights& weights = {}) {
    if (t == 1) {
        if (teacher != nullptr) throw UsageError("base task has no knowledge distillation; teacher must be absent");
        return masked_cross_entropy(student, labels, schedule.task_classes(1));
    }

    const ClassSet& novel = schedule.task_classes(t);
    const double ce_weight = source == SampleSource::fewshot ? weights.fewshot_ce : weights.pseudo_ce;

    LossResult total;
    total.grad_logits = Tensor3(student.height, student.width, student.channels);
    if (ce_weight != 0.0) {
        LossResult ce = masked_cross_entropy(student, labels, novel);
        total.value += ce_weight * ce.value;
        for (std::size_t i = 0; i < total.grad_logits.v.size(); ++i) {
            total.grad_logits.v[i] += ce_weight * ce.grad_logits.v[i];
        }
    }
    if (weights.kd != 0.0) {
        if (teacher == nullptr) throw UsageError("KD term requires a teacher probability map");
        LossResult kd = distillation_loss(student, *teacher, labels, novel, schedule.previous_classes(t));
        total.value += weights.kd * kd.value;
        for (std::size_t i = 0; i < total.grad_logits.v.size(); ++i) {
            total.grad_logits.v[i] += weights.kd * kd.grad_logits.v[i];
        }
    }
    return total;
}

}  // namespace incseg
