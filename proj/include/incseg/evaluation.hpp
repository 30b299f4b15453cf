#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <json.hpp>

#include "incseg/common.hpp"
#include "incseg/labelmap.hpp"
#include "incseg/schedule.hpp"

namespace incseg {

/// C x C pixel counts over a declared class set, indexed [gt][pred].
/// Ground-truth pixels outside the set (including ignore) contribute nothing,
/// which realizes union-set evaluation: non-member classes act as ignore.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(ClassSet classes) : classes_(std::move(classes)) {
        index_.fill(-1);
        int next = 0;
        for (int id : classes_.ids()) index_[static_cast<std::size_t>(id)] = next++;
        side_ = next;
        counts_.assign(static_cast<std::size_t>(side_) * side_, 0);
    }

    const ClassSet& classes() const { return classes_; }

    std::uint64_t count(int gt, int pred) const {
        return counts_[static_cast<std::size_t>(index_checked(gt)) * side_ + index_checked(pred)];
    }

    std::uint64_t total() const { return total_; }

    void add(int gt, int pred, std::uint64_t n = 1) {
        counts_[static_cast<std::size_t>(index_checked(gt)) * side_ + index_checked(pred)] += n;
        total_ += n;
    }

    bool operator==(const ConfusionMatrix& other) const {
        return classes_ == other.classes_ && counts_ == other.counts_ && total_ == other.total_;
    }

private:
    int index_checked(int id) const {
        const int i = id >= 0 && id < 255 ? index_[static_cast<std::size_t>(id)] : -1;
        if (i < 0) throw UsageError("class " + std::to_string(id) + " is not in the evaluated set");
        return i;
    }

    ClassSet classes_;
    std::array<int, 255> index_{};
    int side_ = 0;
    std::vector<std::uint64_t> counts_;
    std::uint64_t total_ = 0;
};

inline void accumulate(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& gt) {
    if (pred.height != gt.height || pred.width != gt.width) {
        throw ShapeError("prediction and ground truth differ in size");
    }
    for (std::size_t i = 0; i < gt.values.size(); ++i) {
        const int g = gt.values[i];
        if (!cm.classes().contains(g)) continue;  // ignore value and out-of-set classes
        const int p = pred.values[i];
        if (!cm.classes().contains(p)) {
            throw DataError("prediction contains class " + std::to_string(p) + " outside the evaluated set");
        }
        cm.add(g, p);
    }
}

inline ConfusionMatrix merge(const ConfusionMatrix& a, const ConfusionMatrix& b) {
    if (!(a.classes() == b.classes())) {
        throw UsageError("cannot merge confusion matrices over different class sets");
    }
    ConfusionMatrix out = a;
    for (int g : b.classes().ids()) {
        for (int p : b.classes().ids()) {
            const auto n = b.count(g, p);
            if (n > 0) out.add(g, p, n);
        }
    }
    return out;
}

/// Mean intersection-over-union over a class subset. Classes whose TP+FP+FN
/// union is zero (never seen in gt or prediction) are excluded from the mean
/// and listed so reports can flag them.
struct MiouResult {
    double miou = 0.0;
    std::map<int, double> per_class;  // counted classes only
    std::vector<int> excluded;        // zero-union class ids
    int counted = 0;
};

inline MiouResult miou(const ConfusionMatrix& cm, const ClassSet& subset) {
    if (subset.empty()) throw UsageError("mIoU over an empty class set");
    for (int c : subset.ids()) {
        if (!cm.classes().contains(c)) {
            throw UsageError("mIoU subset contains class " + std::to_string(c) + " outside the matrix");
        }
    }
    MiouResult r;
    double sum = 0.0;
    for (int c : subset.ids()) {
        const std::uint64_t tp = cm.count(c, c);
        std::uint64_t fp = 0, fn = 0;
        for (int o : cm.classes().ids()) {
            if (o == c) continue;
            fp += cm.count(o, c);
            fn += cm.count(c, o);
        }
        const std::uint64_t uni = tp + fp + fn;
        if (uni == 0) {
            r.excluded.push_back(c);
            continue;
        }
        const double iou = static_cast<double>(tp) / static_cast<double>(uni);
        r.per_class[c] = iou;
        sum += iou;
        r.counted += 1;
    }
    r.miou = r.counted > 0 ? sum / r.counted : 0.0;
    return r;
}

/// Mean and 95% confidence half-width over repeated runs.
struct RunStats {
    int n = 0;
    double mean = 0.0;
    double sd = 0.0;  // sample standard deviation; 0 when n = 1
    std::optional<double> half_width;  // absent when n = 1
};

enum class CiMethod { student_t, normal };

inline RunStats aggregate_runs(std::span<const double> values, double confidence = 0.95,
                               CiMethod method = CiMethod::student_t) {
    if (values.empty()) throw UsageError("run statistics need at least one value");
    if (!(confidence > 0.0 && confidence < 1.0)) {
        throw ConfigError("confidence level must lie in (0, 1)");
    }
    RunStats s;
    s.n = static_cast<int>(values.size());
    for (double v : values) s.mean += v;
    s.mean /= s.n;
    if (s.n == 1) return s;

    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / (s.n - 1));

    const double p = 0.5 + confidence / 2.0;
    double q;
    if (method == CiMethod::student_t) {
        q = boost::math::quantile(boost::math::students_t(s.n - 1.0), p);
    } else {
        q = boost::math::quantile(boost::math::normal(), p);
    }
    s.half_width = q * s.sd / std::sqrt(static_cast<double>(s.n));
    return s;
}

/// Renders "47.4±0.66": mean to one decimal, half-width to two. A lone run
/// renders the mean alone.
inline std::string format_measure(const RunStats& s) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f", s.mean);
    std::string out = buf;
    if (s.half_width.has_value()) {
        std::snprintf(buf, sizeof buf, "%.2f", *s.half_width);
        out += "±";
        out += buf;
    }
    return out;
}

/// Hard labels by argmax over the evaluated classes of the joint softmax.
/// Ties go to the lowest class index.
inline LabelMap argmax_labels(const ProbMap& probs, const ClassSet& eval_set) {
    if (eval_set.empty()) throw UsageError("argmax over an empty class set");
    for (int c : eval_set.ids()) {
        if (c >= probs.channels) {
            throw ShapeError("evaluated class " + std::to_string(c) + " exceeds the " +
                             std::to_string(probs.channels) + "-channel probability field");
        }
    }
    LabelMap out(probs.height, probs.width);
    for (std::size_t i = 0; i < probs.pixel_count(); ++i) {
        int best = -1;
        double best_p = -1.0;
        for (int c : eval_set.ids()) {
            const double p = probs.at(i, c);
            if (p > best_p) {
                best_p = p;
                best = c;
            }
        }
        out.values[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

/// Task-set columns reported after training stage `stage`, in table order:
/// each task seen so far, with the running union inserted after every
/// incremental task (T_1, T_2, T_1u2, T_3, T_1u2u3, ...).
inline std::vector<std::pair<std::string, ClassSet>> stage_columns(const TaskSchedule& schedule, int stage) {
    if (stage < 1 || stage > schedule.task_count()) {
        throw UsageError("stage " + std::to_string(stage) + " outside schedule of " +
                         std::to_string(schedule.task_count()) + " task(s)");
    }
    std::vector<std::pair<std::string, ClassSet>> cols;
    std::string union_name = "T_1";
    for (int t = 1; t <= stage; ++t) {
        cols.emplace_back("T_" + std::to_string(t), schedule.task_classes(t));
        if (t > 1) {
            union_name += "u" + std::to_string(t);
            cols.emplace_back(union_name, schedule.classes_up_to(t));
        }
    }
    return cols;
}

/// Rectangular method x task-set grid of run statistics, the shape of the
/// usual incremental-segmentation results table.
struct MetricsReport {
    struct Row {
        std::string label;
        std::vector<std::optional<RunStats>> cells;  // aligned with columns
    };
    std::vector<std::string> columns;
    std::vector<Row> rows;
    std::map<std::string, std::vector<int>> excluded_classes;  // column -> zero-union ids
    std::map<int, RunStats> per_class_iou;                     // optional per-class detail
};

inline nlohmann::json report_to_json(const MetricsReport& report) {
    nlohmann::json rows = nlohmann::json::array();
    const auto stats_json = [](const RunStats& s) {
        nlohmann::json j{{"n", s.n}, {"mean", s.mean}, {"sd", s.sd}, {"text", format_measure(s)}};
        if (s.half_width.has_value()) {
            j["half_width"] = *s.half_width;
        } else {
            j["half_width"] = nullptr;
        }
        return j;
    };
    for (const auto& row : report.rows) {
        nlohmann::json cells = nlohmann::json::array();
        for (const auto& cell : row.cells) {
            if (cell.has_value()) {
                cells.push_back(stats_json(*cell));
            } else {
                cells.push_back(nullptr);
            }
        }
        rows.push_back({{"label", row.label}, {"cells", cells}});
    }
    nlohmann::json excluded = nlohmann::json::object();
    for (const auto& [col, ids] : report.excluded_classes) excluded[col] = ids;
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [id, s] : report.per_class_iou) per_class[std::to_string(id)] = stats_json(s);
    return nlohmann::json{{"columns", report.columns},
                          {"rows", rows},
                          {"excluded_classes", excluded},
                          {"per_class_iou", per_class}};
}

inline std::string render_report_table(const MetricsReport& report) {
    const std::size_t ncols = report.columns.size();
    std::vector<std::vector<std::string>> grid;
    std::vector<std::string> header{"method"};
    header.insert(header.end(), report.columns.begin(), report.columns.end());
    grid.push_back(header);
    for (const auto& row : report.rows) {
        std::vector<std::string> line{row.label};
        for (std::size_t i = 0; i < ncols; ++i) {
            const bool present = i < row.cells.size() && row.cells[i].has_value();
            line.push_back(present ? format_measure(*row.cells[i]) : "-");
        }
        grid.push_back(line);
    }

    // Pad to per-column display width. The ± sign is two bytes but one column.
    const auto display_width = [](const std::string& s) {
        std::size_t w = 0;
        for (char ch : s) {
            if ((static_cast<unsigned char>(ch) & 0xc0) != 0x80) ++w;
        }
        return w;
    };
    std::vector<std::size_t> widths(ncols + 1, 0);
    for (const auto& line : grid) {
        for (std::size_t i = 0; i < line.size(); ++i) widths[i] = std::max(widths[i], display_width(line[i]));
    }
    std::string out;
    for (const auto& line : grid) {
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (i > 0) out += "  ";
            out += line[i];
            out.append(widths[i] - display_width(line[i]), ' ');
        }
        out += '\n';
    }
    for (const auto& [col, ids] : report.excluded_classes) {
        if (ids.empty()) continue;
        out += "note: " + col + " excludes zero-union classes:";
        for (int id : ids) out += " " + std::to_string(id);
        out += '\n';
    }
    return out;
}

}  // namespace incseg
