#pragma once

// Shared test utilities. The oracle functions here recompute the loss and
// metric definitions with plain per-pixel loops; they intentionally share no
// code with the library implementations they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "incseg/common.hpp"
#include "incseg/labelmap.hpp"
#include "incseg/rng.hpp"
#include "incseg/schedule.hpp"

namespace testutil {

using incseg::ClassSet;
using incseg::LabelMap;
using incseg::ProbMap;
using incseg::Tensor3;

inline ProbMap softmax(const Tensor3& logits) {
    ProbMap p(logits.height, logits.width, logits.channels);
    const std::size_t pixels = logits.pixel_count();
    for (std::size_t l = 0; l < pixels; ++l) {
        double mx = logits.at(l, 0);
        for (int c = 1; c < logits.channels; ++c) mx = std::max(mx, logits.at(l, c));
        double z = 0.0;
        for (int c = 0; c < logits.channels; ++c) z += std::exp(logits.at(l, c) - mx);
        for (int c = 0; c < logits.channels; ++c) p.at(l, c) = std::exp(logits.at(l, c) - mx) / z;
    }
    return p;
}

inline Tensor3 random_logits(int h, int w, int c, incseg::Rng& rng, double lo = -3.0, double hi = 3.0) {
    Tensor3 t(h, w, c);
    for (auto& v : t.v) v = rng.uniform(lo, hi);
    return t;
}

/// Random label map over [0, classes) with roughly `ignore_frac` ignores.
inline LabelMap random_labels(int h, int w, int classes, incseg::Rng& rng, double ignore_frac = 0.3) {
    LabelMap y(h, w);
    for (auto& v : y.values) {
        if (rng.uniform() < ignore_frac) {
            v = incseg::kIgnoreValue;
        } else {
            v = static_cast<std::uint8_t>(rng.uniform_int(0, classes - 1));
        }
    }
    return y;
}

// --- Loss oracles: direct transcriptions of the masked mean definitions ---

inline double ce_oracle(const ProbMap& pred, const LabelMap& gt, const ClassSet& classes) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t l = 0; l < gt.pixel_count(); ++l) {
        const int label = gt.at(l);
        if (label == incseg::kIgnoreValue || !classes.contains(label)) continue;
        ++count;
        sum -= std::log(std::max(pred.at(l, label), 1e-12));
    }
    return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

inline double kd_oracle(const ProbMap& student, const ProbMap& teacher, const LabelMap& gt,
                        const ClassSet& novel, const ClassSet& old_classes) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t l = 0; l < gt.pixel_count(); ++l) {
        const int label = gt.at(l);
        const bool in_novel_mask = label != incseg::kIgnoreValue && novel.contains(label);
        if (in_novel_mask) continue;
        ++count;
        for (int c : old_classes.ids()) {
            sum -= teacher.at(l, c) * std::log(std::max(student.at(l, c), 1e-12));
        }
    }
    return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

/// Central finite differences of `loss_of_logits` at `logits`.
template <typename LossFn>
inline Tensor3 fd_gradient(const Tensor3& logits, LossFn loss_of_logits, double step = 1e-4) {
    Tensor3 grad(logits.height, logits.width, logits.channels);
    Tensor3 z = logits;
    for (std::size_t i = 0; i < z.v.size(); ++i) {
        const double saved = z.v[i];
        z.v[i] = saved + step;
        const double up = loss_of_logits(z);
        z.v[i] = saved - step;
        const double down = loss_of_logits(z);
        z.v[i] = saved;
        grad.v[i] = (up - down) / (2.0 * step);
    }
    return grad;
}

/// Norm-wise relative error between analytic and reference gradients.
inline double gradient_rel_error(const Tensor3& analytic, const Tensor3& reference) {
    double max_diff = 0.0;
    double max_ref = 0.0;
    for (std::size_t i = 0; i < analytic.v.size(); ++i) {
        max_diff = std::max(max_diff, std::abs(analytic.v[i] - reference.v[i]));
        max_ref = std::max(max_ref, std::abs(reference.v[i]));
    }
    return max_diff / std::max(max_ref, 1e-12);
}

}  // namespace testutil
