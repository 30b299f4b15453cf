#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "incseg/common.hpp"
#include "incseg/image.hpp"
#include "incseg/labelmap.hpp"
#include "incseg/rng.hpp"
#include "incseg/schedule.hpp"

namespace incseg {

/// One of the flat background layers (sky, ground, road).
struct BackgroundSpec {
    std::string class_name;
    int class_id = -1;
    std::array<int, 3> color{};
    int jitter = 10;  // per-scene uniform color jitter, 8-bit units
};

/// A paintable foreground class. `kind` picks the geometry: "box" sits on the
/// road, "disc" on the ground, "tower" rises from the horizon, "pole" is a
/// thin post with a square head.
struct ShapeSpec {
    std::string class_name;
    int class_id = -1;
    std::string kind = "box";
    std::array<int, 3> color{};
    int jitter = 18;  // per-instance color jitter
    double min_frac = 0.10;
    double max_frac = 0.20;  // size as a fraction of canvas height
    double rate = 1.0;       // expected instances at layout density 1
};

/// Scene layout family. Scenes from the same archetype share horizon height,
/// road placement and clutter density, which is what makes scene-level
/// retrieval informative.
struct LayoutArchetype {
    double horizon = 0.40;
    double road_center = 0.50;
    double road_halfwidth = 0.15;
    double density = 1.0;
};

struct SyntheticWorldSpec {
    int height = 64;
    int width = 64;
    double noise_sigma = 6.0;  // per-pixel Gaussian noise, 8-bit units
    BackgroundSpec sky, ground, road;
    std::vector<ShapeSpec> shapes;
    std::vector<LayoutArchetype> archetypes;
};

struct SyntheticScene {
    Image image;
    LabelMap labels;
    int archetype = -1;
};

/// Three-task split of the built-in world: backgrounds first, then two
/// increments of foreground classes.
inline TaskSchedule default_task_schedule() {
    return build_task_schedule(nlohmann::json::parse(
        R"({"tasks": [["sky", "ground", "road"], ["car", "tree"], ["building", "sign"]]})"));
}

inline SyntheticWorldSpec default_world_spec(const TaskSchedule& schedule) {
    const auto id_of = [&](const std::string& name) {
        const int id = schedule.class_id(name);
        if (id < 0) throw ConfigError("schedule lacks class \"" + name + "\" required by the world spec");
        return id;
    };
    SyntheticWorldSpec spec;
    spec.sky = {"sky", id_of("sky"), {70, 130, 200}, 12};
    spec.ground = {"ground", id_of("ground"), {110, 160, 90}, 12};
    spec.road = {"road", id_of("road"), {90, 90, 95}, 10};
    spec.shapes = {
        {"building", id_of("building"), "tower", {150, 120, 90}, 20, 0.20, 0.36, 1.3},
        {"tree", id_of("tree"), "disc", {30, 110, 40}, 20, 0.15, 0.28, 1.6},
        {"car", id_of("car"), "box", {200, 40, 40}, 25, 0.12, 0.20, 1.3},
        {"sign", id_of("sign"), "pole", {230, 210, 60}, 15, 0.10, 0.16, 1.1},
    };
    spec.archetypes = {
        {0.30, 0.50, 0.16, 1.0},
        {0.45, 0.30, 0.10, 1.8},
        {0.55, 0.70, 0.22, 0.8},
        {0.38, 0.55, 0.08, 2.4},
    };
    return spec;
}

namespace detail {

inline std::uint8_t clamp_byte(int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); }

inline std::array<std::uint8_t, 3> jittered_color(const std::array<int, 3>& base, int jitter, Rng& rng) {
    std::array<std::uint8_t, 3> out{};
    for (int ch = 0; ch < 3; ++ch) {
        out[static_cast<std::size_t>(ch)] =
            clamp_byte(base[static_cast<std::size_t>(ch)] + rng.uniform_int(-jitter, jitter));
    }
    return out;
}

struct ScenePainter {
    Image& image;
    LabelMap& labels;

    void pixel(int y, int x, const std::array<std::uint8_t, 3>& color, int class_id) {
        if (y < 0 || y >= image.height || x < 0 || x >= image.width) return;
        for (int ch = 0; ch < 3; ++ch) image.at(y, x, ch) = color[static_cast<std::size_t>(ch)];
        labels.at(y, x) = static_cast<std::uint8_t>(class_id);
    }

    void rect(int y0, int y1, int x0, int x1, const std::array<std::uint8_t, 3>& color, int class_id) {
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) pixel(y, x, color, class_id);
        }
    }

    void disc(int cy, int cx, int radius, const std::array<std::uint8_t, 3>& color, int class_id) {
        for (int y = cy - radius; y <= cy + radius; ++y) {
            for (int x = cx - radius; x <= cx + radius; ++x) {
                const int dy = y - cy, dx = x - cx;
                if (dy * dy + dx * dx <= radius * radius) pixel(y, x, color, class_id);
            }
        }
    }
};

}  // namespace detail

/// Renders one scene. A pure function of (spec, seed): identical arguments
/// produce bit-identical image and label bytes.
inline SyntheticScene generate_synthetic_scene(const SyntheticWorldSpec& spec, std::uint64_t seed) {
    if (spec.height < 4 || spec.width < 4) {
        throw ConfigError("synthetic canvas must be at least 4x4");
    }
    if (spec.archetypes.empty()) throw ConfigError("world spec declares no layout archetypes");
    for (const BackgroundSpec* bg : {&spec.sky, &spec.ground, &spec.road}) {
        if (bg->class_id < 0 || bg->class_id >= static_cast<int>(kIgnoreValue)) {
            throw ConfigError("background class id out of range for \"" + bg->class_name + "\"");
        }
    }
    for (const auto& shape : spec.shapes) {
        if (shape.class_id < 0 || shape.class_id >= static_cast<int>(kIgnoreValue)) {
            throw ConfigError("shape class id out of range for \"" + shape.class_name + "\"");
        }
    }

    const int h = spec.height, w = spec.width;
    Rng rng(mix_seed(seed, 0x5ce11eULL));
    SyntheticScene scene;
    scene.image = Image(h, w);
    scene.labels = LabelMap(h, w);
    scene.archetype = rng.uniform_int(0, static_cast<int>(spec.archetypes.size()) - 1);
    const auto& arch = spec.archetypes[static_cast<std::size_t>(scene.archetype)];
    detail::ScenePainter paint{scene.image, scene.labels};

    const int horizon_y = std::clamp(
        static_cast<int>(std::lround((arch.horizon + rng.uniform(-0.04, 0.04)) * h)), 1, h - 2);
    const double road_c = (arch.road_center + rng.uniform(-0.05, 0.05)) * w;
    const int road_x0 = std::clamp(static_cast<int>(std::lround(road_c - arch.road_halfwidth * w)), 0, w - 1);
    const int road_x1 = std::clamp(static_cast<int>(std::lround(road_c + arch.road_halfwidth * w)), 0, w - 1);

    const auto sky_color = detail::jittered_color(spec.sky.color, spec.sky.jitter, rng);
    const auto ground_color = detail::jittered_color(spec.ground.color, spec.ground.jitter, rng);
    const auto road_color = detail::jittered_color(spec.road.color, spec.road.jitter, rng);
    paint.rect(0, horizon_y - 1, 0, w - 1, sky_color, spec.sky.class_id);
    paint.rect(horizon_y, h - 1, 0, w - 1, ground_color, spec.ground.class_id);
    paint.rect(horizon_y, h - 1, road_x0, road_x1, road_color, spec.road.class_id);

    for (const auto& shape : spec.shapes) {
        const double expected = shape.rate * arch.density;
        int count = static_cast<int>(std::floor(expected));
        if (rng.uniform() < expected - std::floor(expected)) count += 1;
        for (int i = 0; i < count; ++i) {
            const int size = std::max(2, static_cast<int>(std::lround(rng.uniform(shape.min_frac, shape.max_frac) * h)));
            const auto color = detail::jittered_color(shape.color, shape.jitter, rng);
            if (shape.kind == "box") {
                const int bw = std::max(2, static_cast<int>(std::lround(size * 1.6)));
                const int cx = rng.uniform_int(road_x0, road_x1);
                const int bottom = rng.uniform_int(std::min(horizon_y + 2, h - 1), h - 1);
                paint.rect(bottom - size + 1, bottom, cx - bw / 2, cx - bw / 2 + bw - 1, color, shape.class_id);
            } else if (shape.kind == "disc") {
                const int r = std::max(1, size / 2);
                const int cy = rng.uniform_int(std::min(horizon_y, h - 1), h - 1);
                const int cx = rng.uniform_int(0, w - 1);
                paint.disc(cy, cx, r, color, shape.class_id);
            } else if (shape.kind == "tower") {
                const int bw = std::max(2, static_cast<int>(std::lround(size * 0.8)));
                const int bh = std::max(3, static_cast<int>(std::lround(size * 1.8)));
                const int cx = rng.uniform_int(0, w - 1);
                paint.rect(horizon_y - bh, horizon_y - 1, cx - bw / 2, cx - bw / 2 + bw - 1, color,
                           shape.class_id);
            } else if (shape.kind == "pole") {
                const int cx = rng.uniform_int(0, w - 1);
                const int base_y = rng.uniform_int(std::min(horizon_y + 1, h - 1), h - 1);
                const int top_y = std::max(0, base_y - size);
                const int head = std::max(2, static_cast<int>(std::lround(size * 0.6)));
                paint.rect(top_y, base_y, cx, cx, color, shape.class_id);
                paint.rect(top_y - head, top_y - 1, cx - head / 2, cx - head / 2 + head - 1, color,
                           shape.class_id);
            } else {
                throw ConfigError("unknown shape kind \"" + shape.kind + "\"");
            }
        }
    }

    if (spec.noise_sigma > 0.0) {
        for (auto& b : scene.image.rgb) {
            b = detail::clamp_byte(static_cast<int>(std::lround(b + rng.normal(0.0, spec.noise_sigma))));
        }
    }
    return scene;
}

inline nlohmann::json world_spec_to_json(const SyntheticWorldSpec& spec, const TaskSchedule& schedule) {
    const auto bg_json = [&](const BackgroundSpec& bg) {
        return nlohmann::json{{"class", schedule.class_names[static_cast<std::size_t>(bg.class_id)]},
                              {"color", bg.color},
                              {"jitter", bg.jitter}};
    };
    nlohmann::json shapes = nlohmann::json::array();
    for (const auto& s : spec.shapes) {
        shapes.push_back({{"class", schedule.class_names[static_cast<std::size_t>(s.class_id)]},
                          {"kind", s.kind},
                          {"color", s.color},
                          {"jitter", s.jitter},
                          {"min_frac", s.min_frac},
                          {"max_frac", s.max_frac},
                          {"rate", s.rate}});
    }
    nlohmann::json archetypes = nlohmann::json::array();
    for (const auto& a : spec.archetypes) {
        archetypes.push_back({{"horizon", a.horizon},
                              {"road_center", a.road_center},
                              {"road_halfwidth", a.road_halfwidth},
                              {"density", a.density}});
    }
    return nlohmann::json{{"canvas", {{"height", spec.height}, {"width", spec.width}}},
                          {"noise_sigma", spec.noise_sigma},
                          {"background", {{"sky", bg_json(spec.sky)}, {"ground", bg_json(spec.ground)}, {"road", bg_json(spec.road)}}},
                          {"shapes", shapes},
                          {"archetypes", archetypes}};
}

inline SyntheticWorldSpec world_spec_from_json(const nlohmann::json& j, const TaskSchedule& schedule) {
    try {
        const auto id_of = [&](const std::string& name) {
            const int id = schedule.class_id(name);
            if (id < 0) throw ConfigError("world spec references unknown class \"" + name + "\"");
            return id;
        };
        const auto parse_bg = [&](const nlohmann::json& b) {
            BackgroundSpec bg;
            bg.class_name = b.at("class").get<std::string>();
            bg.class_id = id_of(bg.class_name);
            bg.color = b.at("color").get<std::array<int, 3>>();
            bg.jitter = b.value("jitter", 10);
            return bg;
        };
        SyntheticWorldSpec spec;
        spec.height = j.at("canvas").at("height").get<int>();
        spec.width = j.at("canvas").at("width").get<int>();
        spec.noise_sigma = j.value("noise_sigma", 6.0);
        if (spec.noise_sigma < 0.0) throw ConfigError("noise_sigma must be non-negative");
        spec.sky = parse_bg(j.at("background").at("sky"));
        spec.ground = parse_bg(j.at("background").at("ground"));
        spec.road = parse_bg(j.at("background").at("road"));
        for (const auto& s : j.value("shapes", nlohmann::json::array())) {
            ShapeSpec shape;
            shape.class_name = s.at("class").get<std::string>();
            shape.class_id = id_of(shape.class_name);
            shape.kind = s.at("kind").get<std::string>();
            if (shape.kind != "box" && shape.kind != "disc" && shape.kind != "tower" && shape.kind != "pole") {
                throw ConfigError("unknown shape kind \"" + shape.kind + "\"");
            }
            shape.color = s.at("color").get<std::array<int, 3>>();
            shape.jitter = s.value("jitter", 18);
            shape.min_frac = s.value("min_frac", 0.10);
            shape.max_frac = s.value("max_frac", 0.20);
            if (!(shape.min_frac > 0.0) || shape.max_frac < shape.min_frac) {
                throw ConfigError("shape size range must satisfy 0 < min_frac <= max_frac");
            }
            shape.rate = s.value("rate", 1.0);
            if (shape.rate < 0.0) throw ConfigError("shape rate must be non-negative");
            spec.shapes.push_back(shape);
        }
        for (const auto& a : j.at("archetypes")) {
            LayoutArchetype arch;
            arch.horizon = a.at("horizon").get<double>();
            arch.road_center = a.at("road_center").get<double>();
            arch.road_halfwidth = a.at("road_halfwidth").get<double>();
            arch.density = a.value("density", 1.0);
            spec.archetypes.push_back(arch);
        }
        if (spec.archetypes.empty()) throw ConfigError("world spec declares no layout archetypes");
        return spec;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid world spec JSON: ") + e.what());
    }
}

/// Sizes of the three persisted splits of a generated dataset.
struct SplitCounts {
    int labeled = 0;
    int unlabeled = 0;
    int validation = 0;
};

/// Writes images/, labels/ and manifest.json under root. The unlabeled split
/// stores images only. Per-image seeds derive from (seed, running index), so
/// the whole dataset is reproducible from the manifest alone.
inline void write_synthetic_dataset(const std::filesystem::path& root, const SyntheticWorldSpec& spec,
                                    const SplitCounts& counts, std::uint64_t seed) {
    if (counts.labeled < 0 || counts.unlabeled < 0 || counts.validation < 0) {
        throw ConfigError("split sizes must be non-negative");
    }
    std::filesystem::create_directories(root / "images");
    std::filesystem::create_directories(root / "labels");

    nlohmann::json splits = {{"labeled", nlohmann::json::array()},
                             {"unlabeled", nlohmann::json::array()},
                             {"validation", nlohmann::json::array()}};
    nlohmann::json archetypes = nlohmann::json::object();

    std::uint64_t index = 0;
    const auto emit = [&](const std::string& split, const std::string& prefix, int n, bool with_labels) {
        char stem[32];
        for (int i = 0; i < n; ++i, ++index) {
            std::snprintf(stem, sizeof stem, "%s_%04d", prefix.c_str(), i);
            const auto scene = generate_synthetic_scene(spec, mix_seed(seed, index));
            write_png_rgb(root / "images" / (std::string(stem) + ".png"), scene.image);
            if (with_labels) encode_labelmap(root / "labels" / (std::string(stem) + ".png"), scene.labels);
            splits[split].push_back(stem);
            archetypes[stem] = scene.archetype;
        }
    };
    emit("labeled", "lab", counts.labeled, true);
    emit("unlabeled", "unl", counts.unlabeled, false);
    emit("validation", "val", counts.validation, true);

    const nlohmann::json manifest = {{"canvas", {{"height", spec.height}, {"width", spec.width}}},
                                     {"seed", seed},
                                     {"splits", splits},
                                     {"archetype", archetypes}};
    std::ofstream out(root / "manifest.json");
    if (!out) throw DataError("cannot write manifest: " + (root / "manifest.json").string());
    out << manifest.dump(2) << "\n";
}

}  // namespace incseg
