#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "psbd/common.hpp"
#include "psbd/io.hpp"
#include "psbd/rng.hpp"

namespace psbd {

/// A 3-channel square image, channel-major (c, y, x), intensities in [0, 1].
struct LabeledImage {
    std::vector<float> pixels;
    int label = 0;
    SampleId id = 0;

    float& at(int side, int c, int y, int x) {
        return pixels[(static_cast<std::size_t>(c) * side + y) * side + x];
    }
    float at(int side, int c, int y, int x) const {
        return pixels[(static_cast<std::size_t>(c) * side + y) * side + x];
    }
};

enum class SplitTag { train, clean_validation, test };

inline std::string to_string(SplitTag tag) {
    switch (tag) {
    case SplitTag::train: return "train";
    case SplitTag::clean_validation: return "clean_validation";
    case SplitTag::test: return "test";
    }
    return "train";
}

inline SplitTag split_from_string(const std::string& s) {
    if (s == "train") return SplitTag::train;
    if (s == "clean_validation") return SplitTag::clean_validation;
    if (s == "test") return SplitTag::test;
    throw ParameterError("unknown split tag '" + s + "'");
}

/// Ordered, immutable-after-construction collection of images sharing one
/// geometry and class space.
class Dataset {
public:
    Dataset(std::vector<LabeledImage> items, int class_count, int side, SplitTag split)
        : items_(std::move(items)), class_count_(class_count), side_(side), split_(split) {
        require(!items_.empty(), "dataset must be nonempty");
        require(class_count_ >= 2, "class_count must be at least 2");
        require(side_ >= 1, "side must be positive");
        std::set<SampleId> seen;
        const std::size_t expected = pixel_count();
        for (const auto& item : items_) {
            require(item.label >= 0 && item.label < class_count_, "label outside [0, class_count)");
            require(item.pixels.size() == expected, "image geometry does not match dataset side");
            for (float v : item.pixels)
                require(v >= 0.0f && v <= 1.0f, "intensity outside [0, 1] in sample " + std::to_string(item.id));
            require(seen.insert(item.id).second, "duplicate sample id " + std::to_string(item.id));
        }
    }

    std::size_t size() const noexcept { return items_.size(); }
    int class_count() const noexcept { return class_count_; }
    int side() const noexcept { return side_; }
    SplitTag split() const noexcept { return split_; }
    std::size_t pixel_count() const noexcept { return 3u * side_ * side_; }

    const LabeledImage& operator[](std::size_t i) const { return items_[i]; }
    const std::vector<LabeledImage>& items() const noexcept { return items_; }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

    /// Subset by position, preserving order. Split tag may be overridden.
    Dataset subset(const std::vector<std::size_t>& positions) const { return subset(positions, split_); }
    Dataset subset(const std::vector<std::size_t>& positions, SplitTag split) const {
        std::vector<LabeledImage> out;
        out.reserve(positions.size());
        for (auto pos : positions) out.push_back(items_.at(pos));
        return Dataset(std::move(out), class_count_, side_, split);
    }

private:
    std::vector<LabeledImage> items_;
    int class_count_;
    int side_;
    SplitTag split_;
};

namespace detail {

inline std::array<double, 3> motif_color(int cls) {
    static constexpr std::array<std::array<double, 3>, 10> palette{{
        {0.90, 0.20, 0.20}, {0.20, 0.80, 0.20}, {0.20, 0.30, 0.90}, {0.90, 0.90, 0.20},
        {0.80, 0.20, 0.80}, {0.20, 0.80, 0.80}, {0.95, 0.55, 0.10}, {0.55, 0.30, 0.10},
        {0.60, 0.60, 0.95}, {0.95, 0.95, 0.95},
    }};
    if (cls < 10) return palette[cls];
    // Beyond ten classes: golden-angle hues at full saturation.
    const double h = std::fmod(cls * 0.6180339887498949, 1.0) * 6.0;
    const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
    switch (static_cast<int>(h)) {
    case 0: return {1.0, x, 0.15};
    case 1: return {x, 1.0, 0.15};
    case 2: return {0.15, 1.0, x};
    case 3: return {0.15, x, 1.0};
    case 4: return {x, 0.15, 1.0};
    default: return {1.0, 0.15, x};
    }
}

/// Shape membership in the motif's rotated frame (u, v) with radius r.
inline bool motif_shape(int shape, double u, double v, double r) {
    const double d = std::sqrt(u * u + v * v);
    const double au = std::abs(u), av = std::abs(v);
    switch (shape) {
    case 0: return d < r;                                                    // disc
    case 1: return au < 0.85 * r && av < 0.85 * r;                          // square
    case 2: return v < 0.7 * r && v > -r && au < (v + r) * 0.55;            // triangle
    case 3: return (au < 0.3 * r && av < r) || (av < 0.3 * r && au < r);    // plus
    case 4: return d < r && d > 0.55 * r;                                   // ring
    case 5: return au + av < r;                                             // diamond
    case 6: return au < 1.1 * r && av < 0.35 * r;                           // horizontal bar
    case 7: return av < 1.1 * r && au < 0.35 * r;                           // vertical bar
    case 8: return (std::abs(u - v) < 0.35 * r || std::abs(u + v) < 0.35 * r) && d < 1.1 * r; // cross
    default: return au < r && av < r && !(au < 0.55 * r && av < 0.55 * r); // frame
    }
}

inline LabeledImage render_motif(int cls, int side, SampleId id, std::uint64_t stream_seed) {
    Rng rng(stream_seed);
    LabeledImage img;
    img.label = cls;
    img.id = id;
    img.pixels.resize(3u * side * side);

    const double scale = side / 32.0;
    std::array<double, 3> background{};
    for (auto& b : background) b = 0.25 + rng.uniform(-0.25, 0.25);
    const double cy = side / 2.0 + rng.uniform(-5.0, 5.0) * scale;
    const double cx = side / 2.0 + rng.uniform(-5.0, 5.0) * scale;
    const double radius = (8.0 + rng.uniform(-2.0, 2.0)) * scale;
    const double angle = rng.uniform(-0.3, 0.3);
    auto color = motif_color(cls);
    for (auto& c : color) c = std::clamp(c + rng.uniform(-0.5, 0.5), 0.0, 1.0);
    const double freq = (1.2 + rng.uniform(-0.4, 0.4)) / scale;
    const double tex_cos = std::cos(static_cast<double>(cls)), tex_sin = std::sin(static_cast<double>(cls));
    const double ca = std::cos(angle), sa = std::sin(angle);
    const int shape = cls % 10;

    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
            const double u = ca * dx + sa * dy;
            const double v = -sa * dx + ca * dy;
            const bool inside = motif_shape(shape, u, v, radius);
            const double tex = 0.85 + 0.15 * std::sin((u * tex_cos + v * tex_sin) * freq);
            for (int c = 0; c < 3; ++c) {
                double value = inside ? color[c] * tex : background[c] + rng.normal(0.0, 0.06);
                value += rng.normal(0.0, 0.12);
                img.at(side, c, y, x) = static_cast<float>(std::clamp(value, 0.0, 1.0));
            }
        }
    }
    return img;
}

} // namespace detail

/// Procedural motif dataset: class c is a distinct coloured shape with a
/// class-oriented texture, randomly placed, scaled, rotated and recoloured.
/// Items are emitted class by class; ids run from `first_id` upwards.
inline Dataset synth_dataset(std::uint64_t seed, int per_class, int class_count, int side,
                             SplitTag split = SplitTag::train, SampleId first_id = 0) {
    require(per_class >= 1, "per_class must be >= 1");
    require(class_count >= 2, "class_count must be >= 2");
    require(side >= 16, "side must be >= 16");
    std::vector<LabeledImage> items;
    items.reserve(static_cast<std::size_t>(per_class) * class_count);
    for (int c = 0; c < class_count; ++c) {
        for (int i = 0; i < per_class; ++i) {
            const SampleId id = first_id + items.size();
            items.push_back(detail::render_motif(c, side, id, combine_seed(seed, c, i)));
        }
    }
    return Dataset(std::move(items), class_count, side, split);
}

struct ValidationSplit {
    Dataset clean_validation;
    Dataset remainder;
};

/// Draws round(fraction * training_size) items uniformly without replacement
/// from a held-out pool. Both outputs keep the pool's order.
inline ValidationSplit split_validation(const Dataset& pool, double fraction, std::size_t training_size,
                                        std::uint64_t seed) {
    require(fraction > 0.0 && fraction < 1.0, "validation fraction must lie in (0, 1)");
    const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(training_size)));
    require(count > 0, "validation fraction yields zero samples");
    require(count < pool.size(), "validation pool too small for the requested fraction");
    Rng rng(seed);
    auto chosen = rng.sample_without_replacement(pool.size(), count);
    std::vector<char> in_val(pool.size(), 0);
    for (auto i : chosen) in_val[i] = 1;
    std::vector<std::size_t> val, rest;
    for (std::size_t i = 0; i < pool.size(); ++i) (in_val[i] ? val : rest).push_back(i);
    return {pool.subset(val, SplitTag::clean_validation), pool.subset(rest, pool.split())};
}

// ---------------------------------------------------------------------------
// On-disk format: meta.json + images.bin (float32 [count,3,side,side]) +
// labels.bin (uint16) + ids.bin (uint64; optional on read, defaults 0..n-1).

inline void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
    io::ensure_dir(dir);
    std::vector<float> images;
    images.reserve(data.size() * data.pixel_count());
    std::vector<std::uint16_t> labels;
    std::vector<std::uint64_t> ids;
    for (const auto& item : data) {
        images.insert(images.end(), item.pixels.begin(), item.pixels.end());
        labels.push_back(static_cast<std::uint16_t>(item.label));
        ids.push_back(item.id);
    }
    io::write_json(dir / "meta.json", {{"class_count", data.class_count()},
                                       {"side", data.side()},
                                       {"count", data.size()},
                                       {"split", to_string(data.split())}});
    io::write_binary(dir / "images.bin", images);
    io::write_binary(dir / "labels.bin", labels);
    io::write_binary(dir / "ids.bin", ids);
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    const auto meta = io::read_json(dir / "meta.json");
    const int class_count = meta.at("class_count").get<int>();
    const int side = meta.at("side").get<int>();
    const auto count = meta.at("count").get<std::size_t>();
    const SplitTag split = meta.contains("split") ? split_from_string(meta["split"].get<std::string>())
                                                  : SplitTag::train;
    const auto images = io::read_binary<float>(dir / "images.bin");
    const auto labels = io::read_binary<std::uint16_t>(dir / "labels.bin");
    std::vector<std::uint64_t> ids;
    if (std::filesystem::exists(dir / "ids.bin")) {
        ids = io::read_binary<std::uint64_t>(dir / "ids.bin");
    } else {
        for (std::size_t i = 0; i < count; ++i) ids.push_back(i);
    }
    const std::size_t per_image = 3u * side * side;
    if (images.size() != count * per_image || labels.size() != count || ids.size() != count)
        throw IoError("dataset files in " + dir.string() + " disagree with meta.json count");
    std::vector<LabeledImage> items(count);
    for (std::size_t i = 0; i < count; ++i) {
        items[i].pixels.assign(images.begin() + static_cast<std::ptrdiff_t>(i * per_image),
                               images.begin() + static_cast<std::ptrdiff_t>((i + 1) * per_image));
        items[i].label = labels[i];
        items[i].id = ids[i];
    }
    return Dataset(std::move(items), class_count, side, split);
}

} // namespace psbd
