#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "psbd/common.hpp"
#include "psbd/data.hpp"
#include "psbd/io.hpp"
#include "psbd/rng.hpp"

namespace psbd {

/// Residual CNN layout. Dropout sites are fixed: one per residual block,
/// after the residual addition and before the activation.
struct ArchSpec {
    std::vector<int> stage_widths{16, 32, 64};
    int blocks_per_stage = 1;
    int class_count = 10;
    int input_side = 32;
    int stem_stride = 2;

    void validate() const {
        require(!stage_widths.empty(), "architecture needs at least one stage");
        for (int w : stage_widths) require(w > 0, "stage widths must be positive");
        require(blocks_per_stage >= 1, "blocks_per_stage must be >= 1");
        require(class_count >= 2, "class_count must be >= 2");
        require(input_side >= 1, "input_side must be positive");
        require(stem_stride == 1 || stem_stride == 2, "stem_stride must be 1 or 2");
    }

    int dropout_site_count() const { return static_cast<int>(stage_widths.size()) * blocks_per_stage; }
};

inline void to_json(nlohmann::json& j, const ArchSpec& a) {
    j = {{"stage_widths", a.stage_widths},
         {"blocks_per_stage", a.blocks_per_stage},
         {"class_count", a.class_count},
         {"input_side", a.input_side},
         {"stem_stride", a.stem_stride},
         {"dropout_sites", "after_residual_add_before_activation"}};
}

inline void from_json(const nlohmann::json& j, ArchSpec& a) {
    a = ArchSpec{};
    a.stage_widths = j.value("stage_widths", a.stage_widths);
    a.blocks_per_stage = j.value("blocks_per_stage", a.blocks_per_stage);
    a.class_count = j.value("class_count", a.class_count);
    a.input_side = j.value("input_side", a.input_side);
    a.stem_stride = j.value("stem_stride", a.stem_stride);
}

// ---------------------------------------------------------------------------
// Dropout masks

/// Supplies the multiplicative factor of every activation at a dropout site
/// for one sample. Factors are laid out channel-major (c, y, x).
class MaskSource {
public:
    virtual ~MaskSource() = default;
    virtual void fill(int site, SampleId sample, std::span<double> factors) const = 0;
};

/// Bernoulli masks: each element is zeroed with probability `p`. The stream
/// for (seed, pass, site, key) is independent of batch composition and
/// evaluation order. `key` is the sample id, or 0 when one mask realisation is
/// shared by every sample in the pass.
class BernoulliMasks final : public MaskSource {
public:
    BernoulliMasks(double p, std::uint64_t seed, std::uint64_t pass, bool rescale, bool per_sample)
        : p_(p), seed_(seed), pass_(pass), rescale_(rescale), per_sample_(per_sample) {
        require(p >= 0.0 && p <= 1.0, "dropout p must lie in [0, 1]");
    }

    void fill(int site, SampleId sample, std::span<double> factors) const override {
        if (p_ >= 1.0) {
            std::fill(factors.begin(), factors.end(), 0.0);
            return;
        }
        const double keep_value = rescale_ ? 1.0 / (1.0 - p_) : 1.0;
        SplitMix gen(combine_seed(seed_, pass_, static_cast<std::uint64_t>(site), per_sample_ ? sample : 0));
        for (auto& f : factors) f = gen.uniform() >= p_ ? keep_value : 0.0;
    }

private:
    double p_;
    std::uint64_t seed_;
    std::uint64_t pass_;
    bool rescale_;
    bool per_sample_;
};

/// Stochastic-forward settings shared by every dropout-based score.
struct DropoutConfig {
    double p = 0.5;
    int k = 3;
    std::uint64_t seed = 0;
    bool rescale = true;    ///< scale kept units by 1/(1-p)
    bool per_sample = false; ///< independent masks per sample instead of one per pass

    void validate(int min_k = 1) const {
        require(p >= 0.0 && p <= 1.0, "dropout p must lie in [0, 1]");
        require(k >= min_k, "k must be >= " + std::to_string(min_k));
    }
    BernoulliMasks pass(int i) const {
        return BernoulliMasks(p, seed, static_cast<std::uint64_t>(i), rescale, per_sample);
    }
};

inline void to_json(nlohmann::json& j, const DropoutConfig& d) {
    j = {{"p", d.p}, {"k", d.k}, {"seed", d.seed}, {"rescale", d.rescale}, {"per_sample", d.per_sample}};
}

inline void from_json(const nlohmann::json& j, DropoutConfig& d) {
    d = DropoutConfig{};
    d.p = j.value("p", d.p);
    d.k = j.value("k", d.k);
    d.seed = j.value("seed", d.seed);
    d.rescale = j.value("rescale", d.rescale);
    d.per_sample = j.value("per_sample", d.per_sample);
}

/// Explicit per-site factors shared by every sample (used for enumeration).
class FixedMasks final : public MaskSource {
public:
    explicit FixedMasks(std::vector<std::vector<double>> per_site) : per_site_(std::move(per_site)) {}
    void fill(int site, SampleId, std::span<double> factors) const override {
        const auto& src = per_site_.at(static_cast<std::size_t>(site));
        require(src.size() == factors.size(), "fixed mask size does not match the dropout site");
        std::copy(src.begin(), src.end(), factors.begin());
    }

private:
    std::vector<std::vector<double>> per_site_;
};

/// Row per sample, column per class.
using ConfidenceMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class BnMode {
    eval,        ///< running statistics
    train,       ///< batch statistics, running statistics updated
    train_frozen ///< batch statistics, running statistics untouched
};

template <class Scalar>
class ResidualNet {
public:
    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    using Probabilities = ConfidenceMatrix;

    static constexpr double bn_eps = 1e-5;
    static constexpr double bn_momentum = 0.1;

    /// Channel-major activation: rows are channels, columns run over (n, y, x).
    struct Act {
        Mat data;
        int n = 0, h = 0, w = 0;
        int channels() const { return static_cast<int>(data.rows()); }
    };

    struct ConvBn {
        int in_c = 0, out_c = 0, k = 3, stride = 1, pad = 1;
        Mat weight; // [out_c, in_c * k * k]
        Vec gamma, beta, running_mean, running_var;
    };

    struct Block {
        ConvBn conv1, conv2;
        std::optional<ConvBn> shortcut;
    };

    struct ConvBnCache {
        Mat col, xhat;
        Vec inv_std;
        int in_c = 0, in_h = 0, in_w = 0, n = 0;
    };

    struct BlockCache {
        ConvBnCache c1, c2, sc;
        Mat h1;   // post-activation of conv1
        Mat mask; // empty when no dropout
        Mat out;  // post-activation block output
    };

    /// Everything backward() needs from one forward pass.
    struct Tape {
        BnMode mode = BnMode::eval;
        ConvBnCache stem;
        Mat stem_out;
        std::vector<BlockCache> blocks;
        int final_hw = 0;
        Mat pooled; // [n, F]
        Mat logits; // [n, C]
    };

    ResidualNet() = default;

    ResidualNet(const ArchSpec& arch, std::uint64_t seed) : arch_(arch) {
        arch_.validate();
        Rng rng(seed);
        const int w0 = arch_.stage_widths.front();
        stem_ = make_conv_bn(3, w0, 3, arch_.stem_stride, 1, rng);
        int in_c = w0;
        for (std::size_t s = 0; s < arch_.stage_widths.size(); ++s) {
            const int width = arch_.stage_widths[s];
            for (int b = 0; b < arch_.blocks_per_stage; ++b) {
                const int stride = (s > 0 && b == 0) ? 2 : 1;
                Block block;
                block.conv1 = make_conv_bn(in_c, width, 3, stride, 1, rng);
                block.conv2 = make_conv_bn(width, width, 3, 1, 1, rng);
                if (stride != 1 || in_c != width) block.shortcut = make_conv_bn(in_c, width, 1, stride, 0, rng);
                blocks_.push_back(std::move(block));
                in_c = width;
            }
        }
        // Linear layer: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
        const double bound = 1.0 / std::sqrt(static_cast<double>(in_c));
        fc_weight_ = Mat(arch_.class_count, in_c);
        for (Eigen::Index i = 0; i < fc_weight_.size(); ++i)
            fc_weight_.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
        fc_bias_ = Vec(arch_.class_count);
        for (Eigen::Index i = 0; i < fc_bias_.size(); ++i) fc_bias_[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
        input_mean_ = Vec::Zero(3);
        input_std_ = Vec::Ones(3);
    }

    const ArchSpec& arch() const noexcept { return arch_; }
    int class_count() const noexcept { return arch_.class_count; }
    int feature_dim() const noexcept { return arch_.stage_widths.back(); }
    int dropout_site_count() const noexcept { return static_cast<int>(blocks_.size()); }

    bool normalizes_input() const noexcept { return normalize_; }
    /// Per-channel input standardisation (off unless explicitly enabled).
    void set_input_normalization(const std::array<double, 3>& mean, const std::array<double, 3>& stddev) {
        normalize_ = true;
        for (int c = 0; c < 3; ++c) {
            require(stddev[c] > 0.0, "normalisation stddev must be positive");
            input_mean_[c] = static_cast<Scalar>(mean[c]);
            input_std_[c] = static_cast<Scalar>(stddev[c]);
        }
    }

    /// Number of activations per sample at each dropout site.
    std::vector<int> site_sizes() const {
        std::vector<int> sizes;
        int hw = conv_out(arch_.input_side, 3, arch_.stem_stride, 1);
        for (const auto& b : blocks_) {
            hw = conv_out(hw, 3, b.conv1.stride, 1);
            sizes.push_back(b.conv1.out_c * hw * hw);
        }
        return sizes;
    }

    // -----------------------------------------------------------------------
    // Parameter table

    enum class TensorKind { parameter, buffer };

    /// Visits every tensor as (name, data, size, kind) in a fixed order.
    template <class Fn>
    void visit(Fn&& fn) {
        visit_impl(*this, fn);
    }
    template <class Fn>
    void visit(Fn&& fn) const {
        visit_impl(*this, fn);
    }

    std::size_t parameter_count() const {
        std::size_t total = 0;
        visit([&](const std::string&, const Scalar*, std::size_t n, TensorKind kind) {
            if (kind == TensorKind::parameter) total += n;
        });
        return total;
    }

    /// Same-shaped zero net, used for gradients and momentum buffers.
    ResidualNet zeros_like() const {
        ResidualNet z = *this;
        z.visit([](const std::string&, Scalar* data, std::size_t n, TensorKind) { std::fill(data, data + n, Scalar(0)); });
        return z;
    }

    template <class Other>
    ResidualNet<Other> cast() const {
        ResidualNet<Other> out;
        out.arch_ = arch_;
        out.normalize_ = normalize_;
        auto cast_conv = [](const ConvBn& c) {
            typename ResidualNet<Other>::ConvBn o;
            o.in_c = c.in_c; o.out_c = c.out_c; o.k = c.k; o.stride = c.stride; o.pad = c.pad;
            o.weight = c.weight.template cast<Other>();
            o.gamma = c.gamma.template cast<Other>();
            o.beta = c.beta.template cast<Other>();
            o.running_mean = c.running_mean.template cast<Other>();
            o.running_var = c.running_var.template cast<Other>();
            return o;
        };
        out.stem_ = cast_conv(stem_);
        for (const auto& b : blocks_) {
            typename ResidualNet<Other>::Block ob;
            ob.conv1 = cast_conv(b.conv1);
            ob.conv2 = cast_conv(b.conv2);
            if (b.shortcut) ob.shortcut = cast_conv(*b.shortcut);
            out.blocks_.push_back(std::move(ob));
        }
        out.fc_weight_ = fc_weight_.template cast<Other>();
        out.fc_bias_ = fc_bias_.template cast<Other>();
        out.input_mean_ = input_mean_.template cast<Other>();
        out.input_std_ = input_std_.template cast<Other>();
        return out;
    }

    bool all_finite() const {
        bool ok = true;
        visit([&](const std::string&, const Scalar* d, std::size_t n, TensorKind) {
            for (std::size_t i = 0; i < n; ++i) ok = ok && std::isfinite(static_cast<double>(d[i]));
        });
        return ok;
    }

    // -----------------------------------------------------------------------
    // Forward / backward

    /// Packs dataset items at `positions` into a channel-major batch.
    Act make_batch(const Dataset& data, std::span<const std::size_t> positions) const {
        require(data.side() == arch_.input_side, "batch geometry does not match the architecture");
        const int side = data.side();
        const int hw = side * side;
        Act x;
        x.n = static_cast<int>(positions.size());
        x.h = x.w = side;
        x.data.resize(3, static_cast<Eigen::Index>(x.n) * hw);
        for (int i = 0; i < x.n; ++i) {
            const auto& px = data[positions[i]].pixels;
            for (int c = 0; c < 3; ++c)
                for (int k = 0; k < hw; ++k) x.data(c, static_cast<Eigen::Index>(i) * hw + k) = static_cast<Scalar>(px[c * hw + k]);
        }
        return x;
    }

    /// Runs the network. With `masks`, each dropout site multiplies its
    /// activations by the supplied factors; `ids` key the per-sample masks.
    Mat forward(Act x, std::span<const SampleId> ids, const MaskSource* masks, BnMode mode, Tape* tape) {
        return forward_impl(std::move(x), ids, masks, mode, tape);
    }

    Mat forward(Act x, std::span<const SampleId> ids, const MaskSource* masks) const {
        return const_cast<ResidualNet*>(this)->forward_impl(std::move(x), ids, masks, BnMode::eval, nullptr);
    }

    /// Accumulates parameter gradients of sum_n <dlogits[n], logits[n]> into `grads`.
    void backward(const Tape& tape, const Mat& dlogits, ResidualNet& grads) const {
        const Eigen::Index n = dlogits.rows();
        // Linear head.
        grads.fc_weight_.noalias() += dlogits.transpose() * tape.pooled;
        grads.fc_bias_ += dlogits.colwise().sum().transpose();
        Mat dpooled = dlogits * fc_weight_; // [n, F]
        // Global average pooling.
        const int hw = tape.final_hw;
        Mat dx(dpooled.cols(), n * hw);
        for (Eigen::Index c = 0; c < dpooled.cols(); ++c)
            for (Eigen::Index i = 0; i < n; ++i)
                dx.row(c).segment(i * hw, hw).setConstant(dpooled(i, c) / static_cast<Scalar>(hw));

        for (int bi = static_cast<int>(blocks_.size()) - 1; bi >= 0; --bi) {
            const Block& block = blocks_[bi];
            const BlockCache& cache = tape.blocks[bi];
            Block& gblock = grads.blocks_[bi];
            // out = relu(mask * z)
            Mat dz = dx.cwiseProduct((cache.out.array() > Scalar(0)).matrix().template cast<Scalar>());
            if (cache.mask.size() > 0) dz = dz.cwiseProduct(cache.mask);
            // z = bn2(conv2(h1)) + shortcut
            Mat dh1 = conv_bn_backward(block.conv2, cache.c2, dz, tape.mode, gblock.conv2);
            dh1 = dh1.cwiseProduct((cache.h1.array() > Scalar(0)).matrix().template cast<Scalar>());
            Mat dinput = conv_bn_backward(block.conv1, cache.c1, dh1, tape.mode, gblock.conv1);
            if (block.shortcut) dinput += conv_bn_backward(*block.shortcut, cache.sc, dz, tape.mode, *gblock.shortcut);
            else dinput += dz;
            dx = std::move(dinput);
        }
        dx = dx.cwiseProduct((tape.stem_out.array() > Scalar(0)).matrix().template cast<Scalar>());
        conv_bn_backward(stem_, tape.stem, dx, tape.mode, grads.stem_, /*need_input_grad=*/false);
    }

    /// Softmax confidences for every item of `data`, evaluated in batches.
    Probabilities confidences(const Dataset& data, const MaskSource* masks, std::size_t batch = 64) const {
        Probabilities out(static_cast<Eigen::Index>(data.size()), arch_.class_count);
        for_batches(data, batch, [&](std::size_t start, std::span<const std::size_t> pos, std::span<const SampleId> ids) {
            const Mat logits = forward(make_batch(data, pos), ids, masks);
            out.middleRows(static_cast<Eigen::Index>(start), logits.rows()) = softmax(logits);
        });
        return out;
    }

    /// Globally pooled penultimate features, [n, feature_dim].
    Probabilities penultimate_features(const Dataset& data, const MaskSource* masks, std::size_t batch = 64) const {
        Probabilities out(static_cast<Eigen::Index>(data.size()), feature_dim());
        for_batches(data, batch, [&](std::size_t start, std::span<const std::size_t> pos, std::span<const SampleId> ids) {
            Tape tape;
            const_cast<ResidualNet*>(this)->forward_impl(make_batch(data, pos), ids, masks, BnMode::eval, &tape);
            out.middleRows(static_cast<Eigen::Index>(start), tape.pooled.rows()) = tape.pooled.template cast<double>();
        });
        return out;
    }

    /// Final-stage activations (before pooling) of a single image,
    /// channel-major (c, y, x).
    std::vector<double> final_feature_maps(const LabeledImage& image, const MaskSource* masks, int* channels = nullptr,
                                           int* spatial = nullptr) const {
        require(image.pixels.size() == 3u * arch_.input_side * arch_.input_side,
                "image geometry does not match the architecture");
        Dataset single({image}, arch_.class_count, arch_.input_side, SplitTag::test);
        const std::size_t pos = 0;
        const SampleId id = image.id;
        Tape tape;
        const_cast<ResidualNet*>(this)->forward_impl(make_batch(single, {&pos, 1}), {&id, 1}, masks, BnMode::eval, &tape);
        const Mat& out = tape.blocks.back().out;
        if (channels) *channels = static_cast<int>(out.rows());
        if (spatial) *spatial = static_cast<int>(std::lround(std::sqrt(static_cast<double>(out.cols()))));
        std::vector<double> v(static_cast<std::size_t>(out.size()));
        for (Eigen::Index i = 0; i < out.size(); ++i) v[static_cast<std::size_t>(i)] = static_cast<double>(out.data()[i]);
        return v;
    }

    static Probabilities softmax(const Mat& logits) {
        Probabilities p = logits.template cast<double>();
        for (Eigen::Index i = 0; i < p.rows(); ++i) {
            const double m = p.row(i).maxCoeff();
            p.row(i) = (p.row(i).array() - m).exp().matrix();
            p.row(i) /= p.row(i).sum();
        }
        return p;
    }

    template <class Fn>
    static void for_batches(const Dataset& data, std::size_t batch, Fn&& fn) {
        std::vector<std::size_t> pos;
        std::vector<SampleId> ids;
        for (std::size_t start = 0; start < data.size(); start += batch) {
            const std::size_t end = std::min(data.size(), start + batch);
            pos.clear();
            ids.clear();
            for (std::size_t i = start; i < end; ++i) {
                pos.push_back(i);
                ids.push_back(data[i].id);
            }
            fn(start, std::span<const std::size_t>(pos), std::span<const SampleId>(ids));
        }
    }

private:
    template <class> friend class ResidualNet;

    static int conv_out(int size, int k, int stride, int pad) { return (size + 2 * pad - k) / stride + 1; }

    static ConvBn make_conv_bn(int in_c, int out_c, int k, int stride, int pad, Rng& rng) {
        ConvBn c;
        c.in_c = in_c; c.out_c = out_c; c.k = k; c.stride = stride; c.pad = pad;
        c.weight = Mat(out_c, in_c * k * k);
        // He initialisation (fan_out, ReLU gain).
        const double stddev = std::sqrt(2.0 / (static_cast<double>(out_c) * k * k));
        for (Eigen::Index i = 0; i < c.weight.size(); ++i) c.weight.data()[i] = static_cast<Scalar>(rng.normal(0.0, stddev));
        c.gamma = Vec::Ones(out_c);
        c.beta = Vec::Zero(out_c);
        c.running_mean = Vec::Zero(out_c);
        c.running_var = Vec::Ones(out_c);
        return c;
    }

    template <class Self, class Fn>
    static void visit_impl(Self& self, Fn& fn) {
        auto tensor = [&](const std::string& name, auto& m, TensorKind kind) {
            fn(name, m.data(), static_cast<std::size_t>(m.size()), kind);
        };
        auto conv_bn = [&](const std::string& conv_name, const std::string& bn_name, auto& c) {
            tensor(conv_name + ".weight", c.weight, TensorKind::parameter);
            tensor(bn_name + ".weight", c.gamma, TensorKind::parameter);
            tensor(bn_name + ".bias", c.beta, TensorKind::parameter);
            tensor(bn_name + ".running_mean", c.running_mean, TensorKind::buffer);
            tensor(bn_name + ".running_var", c.running_var, TensorKind::buffer);
        };
        conv_bn("stem.conv", "stem.bn", self.stem_);
        const int per_stage = self.arch_.blocks_per_stage;
        for (std::size_t i = 0; i < self.blocks_.size(); ++i) {
            const std::string prefix =
                "stage" + std::to_string(i / per_stage) + ".block" + std::to_string(i % per_stage) + ".";
            auto& b = self.blocks_[i];
            conv_bn(prefix + "conv1", prefix + "bn1", b.conv1);
            conv_bn(prefix + "conv2", prefix + "bn2", b.conv2);
            if (b.shortcut) conv_bn(prefix + "shortcut.conv", prefix + "shortcut.bn", *b.shortcut);
        }
        tensor("fc.weight", self.fc_weight_, TensorKind::parameter);
        tensor("fc.bias", self.fc_bias_, TensorKind::parameter);
        if (self.normalize_) {
            tensor("input.mean", self.input_mean_, TensorKind::buffer);
            tensor("input.std", self.input_std_, TensorKind::buffer);
        }
    }

    static void im2col(const Act& x, int k, int stride, int pad, int ho, int wo, Mat& col) {
        const int c_in = x.channels();
        const Eigen::Index out_hw = static_cast<Eigen::Index>(ho) * wo;
        col.resize(static_cast<Eigen::Index>(c_in) * k * k, x.n * out_hw);
        const Eigen::Index in_hw = static_cast<Eigen::Index>(x.h) * x.w;
        for (int c = 0; c < c_in; ++c) {
            const Scalar* src_c = x.data.row(c).data();
            for (int ki = 0; ki < k; ++ki) {
                for (int kj = 0; kj < k; ++kj) {
                    Scalar* dst = col.row((static_cast<Eigen::Index>(c) * k + ki) * k + kj).data();
                    for (int n = 0; n < x.n; ++n) {
                        const Scalar* src = src_c + n * in_hw;
                        for (int oy = 0; oy < ho; ++oy) {
                            const int iy = oy * stride - pad + ki;
                            if (iy < 0 || iy >= x.h) {
                                std::fill(dst, dst + wo, Scalar(0));
                                dst += wo;
                                continue;
                            }
                            const Scalar* row = src + static_cast<Eigen::Index>(iy) * x.w;
                            for (int ox = 0; ox < wo; ++ox) {
                                const int ix = ox * stride - pad + kj;
                                *dst++ = (ix >= 0 && ix < x.w) ? row[ix] : Scalar(0);
                            }
                        }
                    }
                }
            }
        }
    }

    static void col2im(const Mat& dcol, int c_in, int n_batch, int h, int w, int k, int stride, int pad, int ho, int wo,
                       Mat& dx) {
        const Eigen::Index in_hw = static_cast<Eigen::Index>(h) * w;
        dx.setZero(c_in, n_batch * in_hw);
        for (int c = 0; c < c_in; ++c) {
            Scalar* dst_c = dx.row(c).data();
            for (int ki = 0; ki < k; ++ki) {
                for (int kj = 0; kj < k; ++kj) {
                    const Scalar* src = dcol.row((static_cast<Eigen::Index>(c) * k + ki) * k + kj).data();
                    for (int n = 0; n < n_batch; ++n) {
                        Scalar* dst = dst_c + n * in_hw;
                        for (int oy = 0; oy < ho; ++oy) {
                            const int iy = oy * stride - pad + ki;
                            if (iy < 0 || iy >= h) {
                                src += wo;
                                continue;
                            }
                            Scalar* row = dst + static_cast<Eigen::Index>(iy) * w;
                            for (int ox = 0; ox < wo; ++ox, ++src) {
                                const int ix = ox * stride - pad + kj;
                                if (ix >= 0 && ix < w) row[ix] += *src;
                            }
                        }
                    }
                }
            }
        }
    }

    Act conv_bn_forward(ConvBn& layer, const Act& x, BnMode mode, ConvBnCache* cache) {
        const int ho = conv_out(x.h, layer.k, layer.stride, layer.pad);
        const int wo = conv_out(x.w, layer.k, layer.stride, layer.pad);
        Mat local_col;
        Mat& col = cache ? cache->col : local_col;
        im2col(x, layer.k, layer.stride, layer.pad, ho, wo, col);
        Act y;
        y.n = x.n; y.h = ho; y.w = wo;
        y.data.noalias() = layer.weight * col;
        if (cache) {
            cache->in_c = x.channels(); cache->in_h = x.h; cache->in_w = x.w; cache->n = x.n;
        }
        const Eigen::Index m = y.data.cols();
        if (mode == BnMode::eval) {
            Vec inv_std(layer.out_c);
            for (int c = 0; c < layer.out_c; ++c)
                inv_std[c] = Scalar(1) / std::sqrt(layer.running_var[c] + static_cast<Scalar>(bn_eps));
            if (cache) {
                cache->inv_std = inv_std;
                cache->xhat.resize(layer.out_c, m);
            }
            for (int c = 0; c < layer.out_c; ++c) {
                auto row = y.data.row(c).array();
                row = (row - layer.running_mean[c]) * inv_std[c];
                if (cache) cache->xhat.row(c) = row.matrix();
                row = row * layer.gamma[c] + layer.beta[c];
            }
            return y;
        }
        Vec inv_std(layer.out_c);
        if (cache) cache->xhat.resize(layer.out_c, m);
        for (int c = 0; c < layer.out_c; ++c) {
            auto row = y.data.row(c).array();
            const Scalar mean = row.sum() / static_cast<Scalar>(m);
            const Scalar var = (row - mean).square().sum() / static_cast<Scalar>(m);
            inv_std[c] = Scalar(1) / std::sqrt(var + static_cast<Scalar>(bn_eps));
            if (mode == BnMode::train) {
                const Scalar mom = static_cast<Scalar>(bn_momentum);
                const Scalar unbiased = m > 1 ? var * static_cast<Scalar>(m) / static_cast<Scalar>(m - 1) : var;
                layer.running_mean[c] = (Scalar(1) - mom) * layer.running_mean[c] + mom * mean;
                layer.running_var[c] = (Scalar(1) - mom) * layer.running_var[c] + mom * unbiased;
            }
            row = (row - mean) * inv_std[c];
            if (cache) cache->xhat.row(c) = row.matrix();
            row = row * layer.gamma[c] + layer.beta[c];
        }
        if (cache) cache->inv_std = inv_std;
        return y;
    }

    Mat conv_bn_backward(const ConvBn& layer, const ConvBnCache& cache, const Mat& dy, BnMode mode, ConvBn& grad,
                         bool need_input_grad = true) const {
        const Eigen::Index m = dy.cols();
        Mat dconv(layer.out_c, m);
        for (int c = 0; c < layer.out_c; ++c) {
            const auto g = dy.row(c).array();
            const auto xh = cache.xhat.row(c).array();
            const Scalar dbeta = g.sum();
            const Scalar dgamma = (g * xh).sum();
            grad.beta[c] += dbeta;
            grad.gamma[c] += dgamma;
            const Scalar scale = layer.gamma[c] * cache.inv_std[c];
            if (mode == BnMode::eval) {
                dconv.row(c) = (g * scale).matrix();
            } else {
                const Scalar inv_m = Scalar(1) / static_cast<Scalar>(m);
                dconv.row(c) = (scale * (g - dbeta * inv_m - xh * (dgamma * inv_m))).matrix();
            }
        }
        grad.weight.noalias() += dconv * cache.col.transpose();
        if (!need_input_grad) return {};
        const Mat dcol = layer.weight.transpose() * dconv;
        const int ho = conv_out(cache.in_h, layer.k, layer.stride, layer.pad);
        const int wo = conv_out(cache.in_w, layer.k, layer.stride, layer.pad);
        Mat dx;
        col2im(dcol, cache.in_c, cache.n, cache.in_h, cache.in_w, layer.k, layer.stride, layer.pad, ho, wo, dx);
        return dx;
    }

    static void relu_inplace(Mat& m) { m = m.cwiseMax(Scalar(0)); }

    Mat forward_impl(Act x, std::span<const SampleId> ids, const MaskSource* masks, BnMode mode, Tape* tape) {
        require(x.h == arch_.input_side && x.w == arch_.input_side && x.channels() == 3,
                "batch geometry does not match the architecture");
        require(!masks || ids.size() == static_cast<std::size_t>(x.n), "dropout needs one id per batch row");
        if (tape) {
            tape->mode = mode;
            tape->blocks.assign(blocks_.size(), BlockCache{});
        }
        if (normalize_) {
            for (int c = 0; c < 3; ++c)
                x.data.row(c) = ((x.data.row(c).array() - input_mean_[c]) / input_std_[c]).matrix();
        }
        Act h = conv_bn_forward(stem_, x, mode, tape ? &tape->stem : nullptr);
        relu_inplace(h.data);
        if (tape) tape->stem_out = h.data;

        std::vector<double> factors;
        for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
            Block& block = blocks_[bi];
            BlockCache* cache = tape ? &tape->blocks[bi] : nullptr;
            Act a = conv_bn_forward(block.conv1, h, mode, cache ? &cache->c1 : nullptr);
            relu_inplace(a.data);
            if (cache) cache->h1 = a.data;
            Act z = conv_bn_forward(block.conv2, a, mode, cache ? &cache->c2 : nullptr);
            if (block.shortcut) z.data += conv_bn_forward(*block.shortcut, h, mode, cache ? &cache->sc : nullptr).data;
            else z.data += h.data;
            if (masks) {
                const int channels = z.channels();
                const Eigen::Index hw = static_cast<Eigen::Index>(z.h) * z.w;
                factors.resize(static_cast<std::size_t>(channels * hw));
                Mat mask;
                if (cache) mask.resize(channels, z.data.cols());
                for (int n = 0; n < z.n; ++n) {
                    masks->fill(static_cast<int>(bi), ids[n], factors);
                    for (int c = 0; c < channels; ++c) {
                        Scalar* dst = z.data.row(c).data() + n * hw;
                        const double* f = factors.data() + c * hw;
                        for (Eigen::Index k = 0; k < hw; ++k) dst[k] *= static_cast<Scalar>(f[k]);
                        if (cache) {
                            Scalar* md = mask.row(c).data() + n * hw;
                            for (Eigen::Index k = 0; k < hw; ++k) md[k] = static_cast<Scalar>(f[k]);
                        }
                    }
                }
                if (cache) cache->mask = std::move(mask);
            }
            relu_inplace(z.data);
            if (cache) cache->out = z.data;
            h = std::move(z);
        }
        // Global average pooling + linear head.
        const Eigen::Index hw = static_cast<Eigen::Index>(h.h) * h.w;
        Mat pooled(h.n, h.channels());
        for (int c = 0; c < h.channels(); ++c)
            for (int n = 0; n < h.n; ++n) pooled(n, c) = h.data.row(c).segment(n * hw, hw).sum() / static_cast<Scalar>(hw);
        Mat logits = pooled * fc_weight_.transpose();
        logits.rowwise() += fc_bias_.transpose();
        if (tape) {
            tape->final_hw = static_cast<int>(hw);
            tape->pooled = std::move(pooled);
            tape->logits = logits;
        }
        return logits;
    }

    ArchSpec arch_;
    ConvBn stem_;
    std::vector<Block> blocks_;
    Mat fc_weight_;
    Vec fc_bias_;
    bool normalize_ = false;
    Vec input_mean_, input_std_;
};

using Model = ResidualNet<float>;

inline Model build_model(const ArchSpec& arch, std::uint64_t seed) { return Model(arch, seed); }

// ---------------------------------------------------------------------------
// Checkpoints

struct ModelCheckpoint {
    Model model;
    int epoch = 0;
    std::uint64_t seed = 0;
};

/// weights.bin: u32 entry count, then per entry (lexicographic by name):
/// u32 name length, name bytes, u64 value count, float32 values.
inline void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& dir) {
    io::ensure_dir(dir);
    std::map<std::string, std::vector<float>> table;
    ckpt.model.visit([&](const std::string& name, const float* d, std::size_t n, Model::TensorKind) {
        table[name].assign(d, d + n);
    });
    std::vector<char> buf;
    auto put = [&](const void* p, std::size_t n) {
        const char* c = static_cast<const char*>(p);
        buf.insert(buf.end(), c, c + n);
    };
    const auto count = static_cast<std::uint32_t>(table.size());
    put(&count, 4);
    for (const auto& [name, values] : table) {
        const auto len = static_cast<std::uint32_t>(name.size());
        put(&len, 4);
        put(name.data(), name.size());
        const auto n = static_cast<std::uint64_t>(values.size());
        put(&n, 8);
        put(values.data(), values.size() * sizeof(float));
    }
    io::write_binary(dir / "weights.bin", buf);
    io::write_json(dir / "meta.json", {{"arch", ckpt.model.arch()},
                                       {"epoch", ckpt.epoch},
                                       {"seed", ckpt.seed},
                                       {"input_normalization", ckpt.model.normalizes_input()}});
}

inline ModelCheckpoint load_checkpoint(const std::filesystem::path& dir) {
    const auto meta = io::read_json(dir / "meta.json");
    ModelCheckpoint ckpt;
    ckpt.epoch = meta.at("epoch").get<int>();
    ckpt.seed = meta.at("seed").get<std::uint64_t>();
    ckpt.model = Model(meta.at("arch").get<ArchSpec>(), ckpt.seed);
    if (meta.value("input_normalization", false)) ckpt.model.set_input_normalization({0, 0, 0}, {1, 1, 1});

    const auto raw = io::read_binary<char>(dir / "weights.bin");
    std::size_t off = 0;
    auto take = [&](void* dst, std::size_t n) {
        if (off + n > raw.size()) throw IoError("truncated weights in " + dir.string());
        std::memcpy(dst, raw.data() + off, n);
        off += n;
    };
    std::uint32_t count = 0;
    take(&count, 4);
    std::map<std::string, std::vector<float>> table;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t len = 0;
        take(&len, 4);
        std::string name(len, '\0');
        take(name.data(), len);
        std::uint64_t n = 0;
        take(&n, 8);
        std::vector<float> values(n);
        take(values.data(), n * sizeof(float));
        table.emplace(std::move(name), std::move(values));
    }
    std::size_t matched = 0;
    ckpt.model.visit([&](const std::string& name, float* d, std::size_t n, Model::TensorKind) {
        const auto it = table.find(name);
        if (it == table.end() || it->second.size() != n)
            throw IoError("checkpoint " + dir.string() + " has no matching tensor '" + name + "'");
        std::copy(it->second.begin(), it->second.end(), d);
        ++matched;
    });
    if (matched != table.size()) throw IoError("checkpoint " + dir.string() + " has tensors the architecture lacks");
    if (!ckpt.model.all_finite()) throw IoError("checkpoint " + dir.string() + " holds non-finite values");
    return ckpt;
}

// ---------------------------------------------------------------------------
// Forward entry points

/// Clean accuracy on a labelled set.
template <class Scalar>
double accuracy(const ResidualNet<Scalar>& model, const Dataset& data) {
    const auto probs = model.confidences(data, nullptr);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        Eigen::Index best;
        probs.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
        correct += static_cast<int>(best) == data[i].label;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Fraction of `triggered` items classified as `target_label`.
template <class Scalar>
double attack_success_rate(const ResidualNet<Scalar>& model, const Dataset& triggered, int target_label) {
    const auto probs = model.confidences(triggered, nullptr);
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        Eigen::Index best;
        probs.row(i).maxCoeff(&best);
        hits += static_cast<int>(best) == target_label;
    }
    return static_cast<double>(hits) / static_cast<double>(probs.rows());
}

} // namespace psbd
