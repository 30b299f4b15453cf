#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "incseg/common.hpp"

namespace incseg {

/// An unordered set of class indices with O(1) membership. Class indices
/// live in [0, 254]; 255 is the reserved ignore value.
class ClassSet {
public:
    ClassSet() = default;

    explicit ClassSet(std::vector<int> ids) {
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
        for (int id : ids) {
            if (id < 0 || id >= static_cast<int>(kIgnoreValue)) {
                throw ConfigError("class index out of range [0, 254]: " + std::to_string(id));
            }
            member_[static_cast<std::size_t>(id)] = true;
        }
        ids_ = std::move(ids);
    }

    bool contains(int id) const { return id >= 0 && id < 255 && member_[static_cast<std::size_t>(id)]; }
    const std::vector<int>& ids() const { return ids_; }
    std::size_t size() const { return ids_.size(); }
    bool empty() const { return ids_.empty(); }

    bool intersects(const ClassSet& other) const {
        for (int id : ids_) {
            if (other.contains(id)) return true;
        }
        return false;
    }

    static ClassSet union_of(const std::vector<ClassSet>& sets) {
        std::vector<int> all;
        for (const auto& s : sets) all.insert(all.end(), s.ids().begin(), s.ids().end());
        return ClassSet(std::move(all));
    }

    bool operator==(const ClassSet& other) const { return ids_ == other.ids_; }

private:
    std::vector<int> ids_;
    std::array<bool, 255> member_{};
};

/// Ordered, pairwise-disjoint class sets C_1 ... C_T. Task indices are
/// 1-based: task 1 is the base task, later tasks are incremental.
struct TaskSchedule {
    std::vector<ClassSet> tasks;
    std::vector<std::string> class_names;  // class index -> name

    int task_count() const { return static_cast<int>(tasks.size()); }
    int total_class_count() const { return static_cast<int>(class_names.size()); }

    const ClassSet& task_classes(int t) const {
        check_task(t);
        return tasks[static_cast<std::size_t>(t - 1)];
    }

    /// Union C_1 ... C_t.
    ClassSet classes_up_to(int t) const {
        check_task(t);
        std::vector<ClassSet> upto(tasks.begin(), tasks.begin() + t);
        return ClassSet::union_of(upto);
    }

    /// Union of all earlier sets C_{1:t-1}; empty for the base task.
    ClassSet previous_classes(int t) const {
        check_task(t);
        if (t == 1) return ClassSet();
        return classes_up_to(t - 1);
    }

    int class_id(const std::string& name) const {
        for (std::size_t i = 0; i < class_names.size(); ++i) {
            if (class_names[i] == name) return static_cast<int>(i);
        }
        return -1;
    }

private:
    void check_task(int t) const {
        if (t < 1 || t > task_count()) {
            throw UsageError("task index " + std::to_string(t) + " outside schedule of " +
                             std::to_string(task_count()) + " task(s)");
        }
    }
};

/// Builds a schedule from per-task class-name lists. Class indices are
/// assigned in declaration order and are stable across runs.
///
/// Accepted config: {"tasks": [["road", "sidewalk"], ["building", ...]]}
inline TaskSchedule build_task_schedule(const nlohmann::json& config) {
    if (!config.contains("tasks") || !config["tasks"].is_array() || config["tasks"].empty()) {
        throw ConfigError("schedule config needs a non-empty \"tasks\" array");
    }
    TaskSchedule schedule;
    for (const auto& task : config["tasks"]) {
        if (!task.is_array() || task.empty()) {
            throw ConfigError("each schedule task must be a non-empty array of class names");
        }
        std::vector<int> ids;
        for (const auto& name_json : task) {
            const std::string name = name_json.get<std::string>();
            if (schedule.class_id(name) != -1) {
                throw ConfigError("class \"" + name + "\" appears in more than one task");
            }
            ids.push_back(static_cast<int>(schedule.class_names.size()));
            schedule.class_names.push_back(name);
        }
        schedule.tasks.emplace_back(std::move(ids));
    }
    return schedule;
}

inline TaskSchedule load_task_schedule(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open schedule file: " + path.string());
    nlohmann::json config;
    try {
        in >> config;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("invalid schedule JSON in " + path.string() + ": " + e.what());
    }
    return build_task_schedule(config);
}

inline nlohmann::json schedule_to_json(const TaskSchedule& schedule) {
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& task : schedule.tasks) {
        nlohmann::json names = nlohmann::json::array();
        for (int id : task.ids()) names.push_back(schedule.class_names[static_cast<std::size_t>(id)]);
        tasks.push_back(names);
    }
    return nlohmann::json{{"tasks", tasks}};
}

}  // namespace incseg
