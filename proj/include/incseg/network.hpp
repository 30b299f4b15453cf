#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "incseg/common.hpp"
#include "incseg/evaluation.hpp"
#include "incseg/image.hpp"
#include "incseg/rng.hpp"

namespace incseg {

/// Encoder-decoder widths: stem plus three stride-2 encoder stages. The
/// decoder mirrors them with nearest-neighbor upsampling and addition skips.
struct ArchConfig {
    std::vector<int> widths = {16, 24, 32, 48};
    double leaky_slope = 0.1;
    double head_init_scale = 0.01;  // std scale for (new) head channels
};

inline constexpr std::uint64_t kInitStream = 0x1217ULL;
inline constexpr std::uint64_t kHeadStream = 0x4eadULL;

namespace nn {

struct LayerDesc {
    int in_ch = 0;
    int out_ch = 0;
    int ksize = 3;
    int stride = 1;
    std::size_t w_offset = 0;
    std::size_t b_offset = 0;

    std::size_t weight_count() const {
        return static_cast<std::size_t>(out_ch) * in_ch * ksize * ksize;
    }
};

inline Tensor3 conv_forward(const Tensor3& in, const LayerDesc& l, const double* params) {
    const int pad = l.ksize / 2;
    const int ho = (in.height + 2 * pad - l.ksize) / l.stride + 1;
    const int wo = (in.width + 2 * pad - l.ksize) / l.stride + 1;
    const double* w = params + l.w_offset;
    const double* b = params + l.b_offset;
    Tensor3 out(ho, wo, l.out_ch);
    for (int yo = 0; yo < ho; ++yo) {
        for (int xo = 0; xo < wo; ++xo) {
            double* op = &out.v[(static_cast<std::size_t>(yo) * wo + xo) * l.out_ch];
            for (int o = 0; o < l.out_ch; ++o) {
                double acc = b[o];
                const double* wo_base = w + static_cast<std::size_t>(o) * l.in_ch * l.ksize * l.ksize;
                for (int ky = 0; ky < l.ksize; ++ky) {
                    const int y = yo * l.stride + ky - pad;
                    if (y < 0 || y >= in.height) continue;
                    for (int kx = 0; kx < l.ksize; ++kx) {
                        const int x = xo * l.stride + kx - pad;
                        if (x < 0 || x >= in.width) continue;
                        const double* ip = &in.v[(static_cast<std::size_t>(y) * in.width + x) * l.in_ch];
                        const double* wp = wo_base + (static_cast<std::size_t>(ky) * l.ksize + kx);
                        for (int i = 0; i < l.in_ch; ++i) {
                            acc += ip[i] * wp[static_cast<std::size_t>(i) * l.ksize * l.ksize];
                        }
                    }
                }
                op[o] = acc;
            }
        }
    }
    return out;
}

/// Accumulates weight/bias gradients into `grads` and returns the gradient
/// w.r.t. the layer input.
inline Tensor3 conv_backward(const Tensor3& in, const Tensor3& grad_out, const LayerDesc& l,
                             const double* params, double* grads) {
    const int pad = l.ksize / 2;
    const double* w = params + l.w_offset;
    double* gw = grads + l.w_offset;
    double* gb = grads + l.b_offset;
    Tensor3 grad_in(in.height, in.width, in.channels);
    for (int yo = 0; yo < grad_out.height; ++yo) {
        for (int xo = 0; xo < grad_out.width; ++xo) {
            const double* gp = &grad_out.v[(static_cast<std::size_t>(yo) * grad_out.width + xo) * l.out_ch];
            for (int o = 0; o < l.out_ch; ++o) {
                const double g = gp[o];
                if (g == 0.0) continue;
                gb[o] += g;
                const std::size_t wo_base = static_cast<std::size_t>(o) * l.in_ch * l.ksize * l.ksize;
                for (int ky = 0; ky < l.ksize; ++ky) {
                    const int y = yo * l.stride + ky - pad;
                    if (y < 0 || y >= in.height) continue;
                    for (int kx = 0; kx < l.ksize; ++kx) {
                        const int x = xo * l.stride + kx - pad;
                        if (x < 0 || x >= in.width) continue;
                        const std::size_t in_px = (static_cast<std::size_t>(y) * in.width + x) * l.in_ch;
                        const std::size_t k_off = static_cast<std::size_t>(ky) * l.ksize + kx;
                        for (int i = 0; i < l.in_ch; ++i) {
                            const std::size_t widx =
                                wo_base + static_cast<std::size_t>(i) * l.ksize * l.ksize + k_off;
                            gw[widx] += g * in.v[in_px + i];
                            grad_in.v[in_px + i] += g * w[widx];
                        }
                    }
                }
            }
        }
    }
    return grad_in;
}

inline Tensor3 upsample2(const Tensor3& in) {
    Tensor3 out(in.height * 2, in.width * 2, in.channels);
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            const double* ip = &in.v[(static_cast<std::size_t>(y / 2) * in.width + x / 2) * in.channels];
            double* op = &out.v[(static_cast<std::size_t>(y) * out.width + x) * out.channels];
            for (int c = 0; c < in.channels; ++c) op[c] = ip[c];
        }
    }
    return out;
}

inline Tensor3 upsample2_backward(const Tensor3& grad_out) {
    Tensor3 grad_in(grad_out.height / 2, grad_out.width / 2, grad_out.channels);
    for (int y = 0; y < grad_out.height; ++y) {
        for (int x = 0; x < grad_out.width; ++x) {
            const double* gp = &grad_out.v[(static_cast<std::size_t>(y) * grad_out.width + x) * grad_out.channels];
            double* ip = &grad_in.v[(static_cast<std::size_t>(y / 2) * grad_in.width + x / 2) * grad_in.channels];
            for (int c = 0; c < grad_out.channels; ++c) ip[c] += gp[c];
        }
    }
    return grad_in;
}

inline Tensor3 leaky_relu(const Tensor3& z, double slope) {
    Tensor3 a = z;
    for (auto& v : a.v) {
        if (v < 0.0) v *= slope;
    }
    return a;
}

inline Tensor3 leaky_relu_backward(const Tensor3& grad_out, const Tensor3& z, double slope) {
    Tensor3 g = grad_out;
    for (std::size_t i = 0; i < g.v.size(); ++i) {
        if (z.v[i] < 0.0) g.v[i] *= slope;
    }
    return g;
}

inline void add_inplace(Tensor3& a, const Tensor3& b) {
    for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
}

}  // namespace nn

/// Activations cached by a traced forward pass, consumed by backward().
struct ForwardTrace {
    Tensor3 input;                  // normalized image
    std::array<Tensor3, 7> pre;     // pre-activations z of conv stages 0..6
    std::array<Tensor3, 7> act;     // post-activation (and post-skip) outputs
    std::array<Tensor3, 3> up;      // upsampled inputs of the decoder convs
};

inline ProbMap softmax_probmap(const Tensor3& logits) {
    ProbMap probs(logits.height, logits.width, logits.channels);
    for (std::size_t px = 0; px < logits.pixel_count(); ++px) {
        double mx = logits.at(px, 0);
        for (int c = 1; c < logits.channels; ++c) mx = std::max(mx, logits.at(px, c));
        double sum = 0.0;
        for (int c = 0; c < logits.channels; ++c) {
            const double e = std::exp(logits.at(px, c) - mx);
            probs.at(px, c) = e;
            sum += e;
        }
        for (int c = 0; c < logits.channels; ++c) probs.at(px, c) /= sum;
    }
    return probs;
}

/// Small encoder-decoder CNN with a 1x1 classification head over all classes
/// seen so far (one joint softmax). Downsampling factor is fixed at 8.
class SegmentationModel {
public:
    static constexpr int kDownsample = 8;

    SegmentationModel(ArchConfig arch, int class_count, std::uint64_t init_seed)
        : arch_(std::move(arch)), class_count_(class_count) {
        build_layers();
        params_.assign(param_count_, 0.0);
        Rng rng(mix_seed(init_seed, kInitStream));
        for (std::size_t li = 0; li < layers_.size(); ++li) {
            const auto& l = layers_[li];
            const bool is_head = li + 1 == layers_.size();
            const double fan_in = static_cast<double>(l.in_ch) * l.ksize * l.ksize;
            const double stddev =
                is_head ? arch_.head_init_scale / std::sqrt(fan_in) : std::sqrt(2.0 / fan_in);
            for (std::size_t k = 0; k < l.weight_count(); ++k) {
                params_[l.w_offset + k] = rng.normal(0.0, stddev);
            }
            // biases stay zero
        }
    }

    /// Wraps an existing parameter vector; sizes must match the architecture.
    SegmentationModel(ArchConfig arch, int class_count, int step, std::vector<double> params)
        : arch_(std::move(arch)), class_count_(class_count), step_(step) {
        build_layers();
        if (params.size() != param_count_) {
            throw SnapshotError("parameter vector has " + std::to_string(params.size()) +
                                " values, architecture needs " + std::to_string(param_count_));
        }
        params_ = std::move(params);
    }

    const ArchConfig& arch() const { return arch_; }
    int class_count() const { return class_count_; }
    int step() const { return step_; }
    void set_step(int t) { step_ = t; }
    const std::vector<double>& params() const { return params_; }
    std::size_t param_count() const { return param_count_; }

    std::string param_hash_hex() const {
        return hex_string(fnv1a64(params_.data(), params_.size() * sizeof(double)));
    }

    Tensor3 forward_logits(const Image& image, ForwardTrace& trace) const {
        if (image.height % kDownsample != 0 || image.width % kDownsample != 0 || image.height == 0 ||
            image.width == 0) {
            throw ShapeError("input " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                             " is not divisible by the downsampling factor " + std::to_string(kDownsample));
        }
        const double* p = params_.data();
        trace.input = Tensor3(image.height, image.width, 3);
        for (std::size_t i = 0; i < trace.input.v.size(); ++i) {
            trace.input.v[i] = image.rgb[i] / 255.0;
        }

        // Encoder: stem + three stride-2 stages.
        trace.pre[0] = nn::conv_forward(trace.input, layers_[0], p);
        trace.act[0] = nn::leaky_relu(trace.pre[0], arch_.leaky_slope);
        for (int s = 1; s <= 3; ++s) {
            trace.pre[static_cast<std::size_t>(s)] =
                nn::conv_forward(trace.act[static_cast<std::size_t>(s - 1)], layers_[static_cast<std::size_t>(s)], p);
            trace.act[static_cast<std::size_t>(s)] =
                nn::leaky_relu(trace.pre[static_cast<std::size_t>(s)], arch_.leaky_slope);
        }

        // Decoder: upsample, conv, activate, add the encoder skip.
        const std::array<int, 3> skips = {2, 1, 0};
        Tensor3 x = trace.act[3];
        for (int d = 0; d < 3; ++d) {
            const std::size_t li = static_cast<std::size_t>(4 + d);
            trace.up[static_cast<std::size_t>(d)] = nn::upsample2(x);
            trace.pre[li] = nn::conv_forward(trace.up[static_cast<std::size_t>(d)], layers_[li], p);
            Tensor3 a = nn::leaky_relu(trace.pre[li], arch_.leaky_slope);
            nn::add_inplace(a, trace.act[static_cast<std::size_t>(skips[static_cast<std::size_t>(d)])]);
            trace.act[li] = std::move(a);
            x = trace.act[li];
        }
        return nn::conv_forward(trace.act[6], layers_[7], p);
    }

    Tensor3 forward_logits(const Image& image) const {
        ForwardTrace trace;
        return forward_logits(image, trace);
    }

    ProbMap forward(const Image& image) const { return softmax_probmap(forward_logits(image)); }

    /// Accumulates d(objective)/d(params) into `grads` given the gradient
    /// w.r.t. the output logits from a traced forward pass.
    void backward(const ForwardTrace& trace, const Tensor3& grad_logits, std::vector<double>& grads) const {
        if (grads.size() != param_count_) throw UsageError("gradient buffer size mismatch");
        if (grad_logits.channels != class_count_) throw ShapeError("logit gradient channel mismatch");
        const double* p = params_.data();
        double* g = grads.data();

        Tensor3 grad = nn::conv_backward(trace.act[6], grad_logits, layers_[7], p, g);

        const std::array<int, 3> skips = {0, 1, 2};  // skip sources of dec3, dec2, dec1
        std::array<Tensor3, 3> skip_grads;
        for (int d = 2; d >= 0; --d) {
            const std::size_t li = static_cast<std::size_t>(4 + d);
            // The incoming gradient feeds both the conv branch and the skip.
            skip_grads[static_cast<std::size_t>(skips[static_cast<std::size_t>(2 - d)])] = grad;
            const Tensor3 gz = nn::leaky_relu_backward(grad, trace.pre[li], arch_.leaky_slope);
            const Tensor3 gu = nn::conv_backward(trace.up[static_cast<std::size_t>(d)], gz, layers_[li], p, g);
            grad = nn::upsample2_backward(gu);
        }

        for (int s = 3; s >= 1; --s) {
            if (s < 3) nn::add_inplace(grad, skip_grads[static_cast<std::size_t>(s)]);
            const Tensor3 gz = nn::leaky_relu_backward(grad, trace.pre[static_cast<std::size_t>(s)],
                                                       arch_.leaky_slope);
            grad = nn::conv_backward(trace.act[static_cast<std::size_t>(s - 1)], gz,
                                     layers_[static_cast<std::size_t>(s)], p, g);
        }
        nn::add_inplace(grad, skip_grads[0]);
        const Tensor3 gz0 = nn::leaky_relu_backward(grad, trace.pre[0], arch_.leaky_slope);
        (void)nn::conv_backward(trace.input, gz0, layers_[0], p, g);
    }

    void add_scaled(const std::vector<double>& direction, double scale) {
        if (direction.size() != param_count_) throw UsageError("update vector size mismatch");
        for (std::size_t i = 0; i < params_.size(); ++i) params_[i] += scale * direction[i];
    }

    const std::vector<nn::LayerDesc>& layers() const { return layers_; }

private:
    void build_layers() {
        if (arch_.widths.size() != 4) {
            throw ConfigError("architecture needs exactly 4 stage widths, got " +
                              std::to_string(arch_.widths.size()));
        }
        for (int w : arch_.widths) {
            if (w < 1) throw ConfigError("stage widths must be positive");
        }
        if (class_count_ < 1) throw ConfigError("model needs at least one output class");
        if (arch_.leaky_slope < 0.0) throw ConfigError("leaky slope must be non-negative");
        if (!(arch_.head_init_scale > 0.0)) throw ConfigError("head init scale must be positive");

        const int w0 = arch_.widths[0], w1 = arch_.widths[1], w2 = arch_.widths[2], w3 = arch_.widths[3];
        layers_ = {
            {3, w0, 3, 1}, {w0, w1, 3, 2}, {w1, w2, 3, 2}, {w2, w3, 3, 2},
            {w3, w2, 3, 1}, {w2, w1, 3, 1}, {w1, w0, 3, 1}, {w0, class_count_, 1, 1},
        };
        std::size_t offset = 0;
        for (auto& l : layers_) {
            l.w_offset = offset;
            offset += l.weight_count();
            l.b_offset = offset;
            offset += static_cast<std::size_t>(l.out_ch);
        }
        param_count_ = offset;
    }

    ArchConfig arch_;
    int class_count_ = 0;
    int step_ = 1;
    std::vector<nn::LayerDesc> layers_;
    std::size_t param_count_ = 0;
    std::vector<double> params_;
};

/// Returns a copy with `added_classes` extra head channels. Existing channel
/// parameters are bit-identical, so old-class logits are preserved exactly;
/// new channels get small random weights and zero bias. The schedule position
/// advances by one.
inline SegmentationModel extend_head(const SegmentationModel& model, int added_classes, std::uint64_t seed) {
    if (added_classes < 1) throw ConfigError("head extension needs at least one new class");
    const auto& old_layers = model.layers();
    const auto& head = old_layers.back();
    const auto& p = model.params();

    std::vector<double> grown;
    grown.reserve(p.size() + static_cast<std::size_t>(added_classes) * (head.in_ch + 1));
    // Everything before the head, then old head weights.
    grown.insert(grown.end(), p.begin(), p.begin() + static_cast<std::ptrdiff_t>(head.b_offset));
    Rng rng(mix_seed(seed, kHeadStream));
    const double stddev = model.arch().head_init_scale / std::sqrt(static_cast<double>(head.in_ch));
    for (int c = 0; c < added_classes; ++c) {
        for (int i = 0; i < head.in_ch; ++i) grown.push_back(rng.normal(0.0, stddev));
    }
    // Old biases, then zero biases for the new channels.
    grown.insert(grown.end(), p.begin() + static_cast<std::ptrdiff_t>(head.b_offset), p.end());
    grown.insert(grown.end(), static_cast<std::size_t>(added_classes), 0.0);

    return SegmentationModel(model.arch(), model.class_count() + added_classes, model.step() + 1,
                             std::move(grown));
}

/// Immutable value holding everything needed to rebuild a model.
struct ModelSnapshot {
    ArchConfig arch;
    int class_count = 0;
    int step = 1;
    std::vector<double> params;
};

inline ModelSnapshot make_snapshot(const SegmentationModel& model) {
    return ModelSnapshot{model.arch(), model.class_count(), model.step(), model.params()};
}

inline SegmentationModel restore(const ModelSnapshot& snap) {
    return SegmentationModel(snap.arch, snap.class_count, snap.step, snap.params);
}

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string& buf, std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + static_cast<std::size_t>(i)])) << (8 * i);
    return v;
}

inline std::uint64_t get_u64(const std::string& buf, std::size_t off) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[off + static_cast<std::size_t>(i)])) << (8 * i);
    return v;
}

}  // namespace detail

inline constexpr char kSnapshotMagic[4] = {'I', 'S', 'E', 'G'};
inline constexpr std::uint32_t kSnapshotVersion = 1;

/// Container layout: magic, version, header length, JSON header (arch,
/// class_count, step, param_count), raw little-endian f64 parameters, and a
/// trailing fnv1a64 of all preceding bytes.
inline void save_snapshot(const std::filesystem::path& path, const ModelSnapshot& snap) {
    const nlohmann::json header = {{"arch",
                                    {{"widths", snap.arch.widths},
                                     {"leaky_slope", snap.arch.leaky_slope},
                                     {"head_init_scale", snap.arch.head_init_scale}}},
                                   {"class_count", snap.class_count},
                                   {"step", snap.step},
                                   {"param_count", snap.params.size()}};
    const std::string header_str = header.dump();

    std::string buf;
    buf.append(kSnapshotMagic, 4);
    detail::put_u32(buf, kSnapshotVersion);
    detail::put_u32(buf, static_cast<std::uint32_t>(header_str.size()));
    buf += header_str;
    for (const double d : snap.params) {
        std::uint64_t bits;
        std::memcpy(&bits, &d, sizeof bits);
        detail::put_u64(buf, bits);
    }
    detail::put_u64(buf, fnv1a64(buf.data(), buf.size()));

    std::ofstream out(path, std::ios::binary);
    if (!out) throw SnapshotError("cannot write snapshot: " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw SnapshotError("short write on snapshot: " + path.string());
}

inline ModelSnapshot load_snapshot(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw SnapshotError("cannot open snapshot: " + path.string());
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 24) throw SnapshotError("snapshot too short: " + path.string());
    if (std::memcmp(buf.data(), kSnapshotMagic, 4) != 0) {
        throw SnapshotError("not a model snapshot: " + path.string());
    }
    const std::uint32_t version = detail::get_u32(buf, 4);
    if (version != kSnapshotVersion) {
        throw SnapshotError("unsupported snapshot version " + std::to_string(version) + " in " + path.string());
    }
    const std::uint64_t stored_hash = detail::get_u64(buf, buf.size() - 8);
    if (fnv1a64(buf.data(), buf.size() - 8) != stored_hash) {
        throw SnapshotError("snapshot is corrupted (hash mismatch): " + path.string());
    }

    const std::size_t header_len = detail::get_u32(buf, 8);
    if (12 + header_len + 8 > buf.size()) throw SnapshotError("snapshot header overruns file: " + path.string());
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(buf.substr(12, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw SnapshotError("snapshot header is not valid JSON: " + std::string(e.what()));
    }

    ModelSnapshot snap;
    try {
        snap.arch.widths = header.at("arch").at("widths").get<std::vector<int>>();
        snap.arch.leaky_slope = header.at("arch").at("leaky_slope").get<double>();
        snap.arch.head_init_scale = header.at("arch").at("head_init_scale").get<double>();
        snap.class_count = header.at("class_count").get<int>();
        snap.step = header.at("step").get<int>();
        const auto param_count = header.at("param_count").get<std::size_t>();
        const std::size_t data_off = 12 + header_len;
        if (data_off + param_count * 8 + 8 != buf.size()) {
            throw SnapshotError("snapshot parameter block has the wrong size: " + path.string());
        }
        snap.params.resize(param_count);
        for (std::size_t i = 0; i < param_count; ++i) {
            const std::uint64_t bits = detail::get_u64(buf, data_off + i * 8);
            std::memcpy(&snap.params[i], &bits, sizeof(double));
        }
    } catch (const nlohmann::json::exception& e) {
        throw SnapshotError("snapshot header is missing fields: " + std::string(e.what()));
    }
    return snap;
}

/// Plain SGD with classical momentum: v <- m*v + g; p <- p - lr*v.
class SgdOptimizer {
public:
    SgdOptimizer(double lr, double momentum) : lr_(lr), momentum_(momentum) {
        if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
        if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
    }

    void apply(SegmentationModel& model, const std::vector<double>& grads) {
        if (velocity_.empty()) velocity_.assign(model.param_count(), 0.0);
        if (velocity_.size() != model.param_count() || grads.size() != model.param_count()) {
            throw UsageError("optimizer state does not match the model's parameter count");
        }
        for (std::size_t i = 0; i < velocity_.size(); ++i) {
            velocity_[i] = momentum_ * velocity_[i] + grads[i];
        }
        model.add_scaled(velocity_, -lr_);
    }

    double lr() const { return lr_; }

private:
    double lr_;
    double momentum_;
    std::vector<double> velocity_;
};

inline LabelMap predict_labels(const SegmentationModel& model, const Image& image, const ClassSet& eval_set) {
    return argmax_labels(model.forward(image), eval_set);
}

}  // namespace incseg
