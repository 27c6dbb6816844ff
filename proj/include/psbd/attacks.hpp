#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psbd/common.hpp"
#include "psbd/data.hpp"
#include "psbd/io.hpp"
#include "psbd/rng.hpp"

namespace psbd {

enum class TriggerKind { patch, blend, warp };

inline std::string to_string(TriggerKind k) {
    switch (k) {
    case TriggerKind::patch: return "patch";
    case TriggerKind::blend: return "blend";
    case TriggerKind::warp: return "warp";
    }
    return "patch";
}

inline TriggerKind trigger_from_string(const std::string& s) {
    if (s == "patch") return TriggerKind::patch;
    if (s == "blend") return TriggerKind::blend;
    if (s == "warp") return TriggerKind::warp;
    throw ParameterError("unknown trigger kind '" + s + "'");
}

struct TriggerSpec {
    TriggerKind kind = TriggerKind::patch;
    // patch: s x s checkerboard, `offset` pixels in from the bottom-right corner.
    // parity 0 puts level 1 where (i + j) is even.
    int size = 3;
    int offset = 0;
    int parity = 0;
    // blend
    std::uint64_t pattern_seed = 0;
    double alpha = 0.2;
    // warp
    int grid = 4;
    double strength = 1.0;
    std::uint64_t warp_seed = 0;

    void validate(int side) const {
        switch (kind) {
        case TriggerKind::patch:
            require(size >= 1 && offset >= 0, "patch size/offset must be positive");
            require(size + offset <= side, "patch does not fit inside the image");
            require(parity == 0 || parity == 1, "patch parity must be 0 or 1");
            break;
        case TriggerKind::blend:
            require(alpha > 0.0 && alpha <= 1.0, "blend alpha must lie in (0, 1]");
            break;
        case TriggerKind::warp:
            require(grid >= 2, "warp grid must be >= 2");
            require(strength >= 0.0 && std::isfinite(strength), "warp strength must be non-negative");
            break;
        }
    }
};

inline void to_json(nlohmann::json& j, const TriggerSpec& t) {
    j = {{"kind", to_string(t.kind)}};
    switch (t.kind) {
    case TriggerKind::patch: j.update({{"size", t.size}, {"offset", t.offset}, {"parity", t.parity}}); break;
    case TriggerKind::blend: j.update({{"pattern_seed", t.pattern_seed}, {"alpha", t.alpha}}); break;
    case TriggerKind::warp:
        j.update({{"grid", t.grid}, {"strength", t.strength}, {"seed", t.warp_seed}});
        break;
    }
}

inline void from_json(const nlohmann::json& j, TriggerSpec& t) {
    t = TriggerSpec{};
    t.kind = trigger_from_string(j.at("kind").get<std::string>());
    t.size = j.value("size", t.size);
    t.offset = j.value("offset", t.offset);
    t.parity = j.value("parity", t.parity);
    t.pattern_seed = j.value("pattern_seed", t.pattern_seed);
    t.alpha = j.value("alpha", t.alpha);
    t.grid = j.value("grid", t.grid);
    t.strength = j.value("strength", t.strength);
    t.warp_seed = j.value("seed", t.warp_seed);
}

// ---------------------------------------------------------------------------

inline LabeledImage apply_patch_trigger(const LabeledImage& image, int side, const TriggerSpec& spec) {
    require(spec.kind == TriggerKind::patch, "apply_patch_trigger needs a patch spec");
    spec.validate(side);
    LabeledImage out = image;
    const int y0 = side - spec.offset - spec.size;
    const int x0 = side - spec.offset - spec.size;
    for (int i = 0; i < spec.size; ++i) {
        for (int j = 0; j < spec.size; ++j) {
            const bool even = (i + j) % 2 == 0;
            const float level = (even == (spec.parity == 0)) ? 1.0f : 0.0f;
            for (int c = 0; c < 3; ++c) out.at(side, c, y0 + i, x0 + j) = level;
        }
    }
    return out;
}

/// Seeded uniform noise pattern, channel-major, matching the image geometry.
inline std::vector<float> blend_pattern(std::uint64_t pattern_seed, int side) {
    Rng rng(combine_seed(pattern_seed, 0xb1e9d));
    std::vector<float> pattern(3u * side * side);
    for (auto& v : pattern) v = static_cast<float>(rng.uniform());
    return pattern;
}

inline LabeledImage apply_blend_trigger(const LabeledImage& image, const std::vector<float>& pattern,
                                        double alpha) {
    require(pattern.size() == image.pixels.size(), "blend pattern shape does not match the image");
    require(alpha >= 0.0 && alpha <= 1.0, "blend alpha must lie in [0, 1]");
    LabeledImage out = image;
    const float a = static_cast<float>(alpha);
    for (std::size_t i = 0; i < out.pixels.size(); ++i) {
        const float v = alpha == 1.0 ? pattern[i] : (1.0f - a) * image.pixels[i] + a * pattern[i];
        out.pixels[i] = std::clamp(v, 0.0f, 1.0f);
    }
    return out;
}

inline LabeledImage apply_blend_trigger(const LabeledImage& image, int side, const TriggerSpec& spec) {
    require(spec.kind == TriggerKind::blend, "apply_blend_trigger needs a blend spec");
    spec.validate(side);
    return apply_blend_trigger(image, blend_pattern(spec.pattern_seed, side), spec.alpha);
}

namespace detail {

inline double cubic_weight(double t) {
    // Keys cubic convolution kernel, a = -0.5.
    constexpr double a = -0.5;
    t = std::abs(t);
    if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
    if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
    return 0.0;
}

/// Bicubic upsampling of a g x g grid to side x side (pixel-centre aligned,
/// edge-clamped).
inline std::vector<double> bicubic_upsample(const std::vector<double>& coarse, int g, int side) {
    std::vector<double> out(static_cast<std::size_t>(side) * side);
    auto at = [&](int y, int x) {
        y = std::clamp(y, 0, g - 1);
        x = std::clamp(x, 0, g - 1);
        return coarse[static_cast<std::size_t>(y) * g + x];
    };
    const double ratio = static_cast<double>(g) / side;
    for (int y = 0; y < side; ++y) {
        const double sy = (y + 0.5) * ratio - 0.5;
        const int iy = static_cast<int>(std::floor(sy));
        for (int x = 0; x < side; ++x) {
            const double sx = (x + 0.5) * ratio - 0.5;
            const int ix = static_cast<int>(std::floor(sx));
            double acc = 0.0;
            for (int m = -1; m <= 2; ++m) {
                const double wy = cubic_weight(sy - (iy + m));
                for (int n = -1; n <= 2; ++n) acc += wy * cubic_weight(sx - (ix + n)) * at(iy + m, ix + n);
            }
            out[static_cast<std::size_t>(y) * side + x] = acc;
        }
    }
    return out;
}

} // namespace detail

/// Per-pixel displacement (dy, dx) of the warp trigger; |d| <= strength per axis.
struct WarpField {
    int side = 0;
    std::vector<double> dy, dx;
};

inline WarpField warp_field(const TriggerSpec& spec, int side) {
    require(spec.kind == TriggerKind::warp, "warp_field needs a warp spec");
    spec.validate(side);
    Rng rng(combine_seed(spec.warp_seed, 0x3a7f));
    WarpField field{side, {}, {}};
    for (auto* component : {&field.dy, &field.dx}) {
        std::vector<double> coarse(static_cast<std::size_t>(spec.grid) * spec.grid);
        for (auto& v : coarse) v = rng.uniform(-1.0, 1.0);
        *component = detail::bicubic_upsample(coarse, spec.grid, side);
        for (auto& v : *component) v = std::clamp(v, -1.0, 1.0) * spec.strength;
    }
    return field;
}

inline LabeledImage apply_warp_trigger(const LabeledImage& image, const WarpField& field) {
    const int side = field.side;
    require(image.pixels.size() == 3u * side * side, "warp field does not match the image");
    LabeledImage out = image;
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            const std::size_t k = static_cast<std::size_t>(y) * side + x;
            const double sy = std::clamp(y + field.dy[k], 0.0, side - 1.0);
            const double sx = std::clamp(x + field.dx[k], 0.0, side - 1.0);
            const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
            const int y1 = std::min(y0 + 1, side - 1), x1 = std::min(x0 + 1, side - 1);
            const double fy = sy - y0, fx = sx - x0;
            for (int c = 0; c < 3; ++c) {
                const double v = (1.0 - fy) * ((1.0 - fx) * image.at(side, c, y0, x0) + fx * image.at(side, c, y0, x1)) +
                                 fy * ((1.0 - fx) * image.at(side, c, y1, x0) + fx * image.at(side, c, y1, x1));
                out.at(side, c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    return out;
}

inline LabeledImage apply_warp_trigger(const LabeledImage& image, int side, const TriggerSpec& spec) {
    return apply_warp_trigger(image, warp_field(spec, side));
}

/// Precomputed trigger for applying the same spec to many images.
class Trigger {
public:
    Trigger(const TriggerSpec& spec, int side) : spec_(spec), side_(side) {
        spec_.validate(side);
        if (spec_.kind == TriggerKind::blend) pattern_ = blend_pattern(spec_.pattern_seed, side);
        if (spec_.kind == TriggerKind::warp) field_ = warp_field(spec_, side);
    }

    LabeledImage operator()(const LabeledImage& image) const {
        switch (spec_.kind) {
        case TriggerKind::patch: return apply_patch_trigger(image, side_, spec_);
        case TriggerKind::blend: return apply_blend_trigger(image, pattern_, spec_.alpha);
        case TriggerKind::warp: return apply_warp_trigger(image, field_);
        }
        return image;
    }

    const TriggerSpec& spec() const noexcept { return spec_; }

private:
    TriggerSpec spec_;
    int side_;
    std::vector<float> pattern_;
    WarpField field_;
};

// ---------------------------------------------------------------------------

struct PoisonSpec {
    TriggerSpec trigger;
    int target_label = 0;
    double poison_ratio = 0.1;
    double cover_ratio = 0.0;
    std::uint64_t seed = 0;

    void validate(int class_count, int side) const {
        trigger.validate(side);
        require(target_label >= 0 && target_label < class_count, "target label outside class range");
        require(poison_ratio >= 0.0 && cover_ratio >= 0.0, "ratios must be non-negative");
        require(poison_ratio + cover_ratio <= 1.0, "poison_ratio + cover_ratio exceeds 1");
    }
};

inline void to_json(nlohmann::json& j, const PoisonSpec& p) {
    j = {{"trigger", p.trigger},
         {"target_label", p.target_label},
         {"poison_ratio", p.poison_ratio},
         {"cover_ratio", p.cover_ratio},
         {"seed", p.seed}};
}

inline void from_json(const nlohmann::json& j, PoisonSpec& p) {
    p = PoisonSpec{};
    p.trigger = j.at("trigger").get<TriggerSpec>();
    p.target_label = j.value("target_label", p.target_label);
    p.poison_ratio = j.value("poison_ratio", p.poison_ratio);
    p.cover_ratio = j.value("cover_ratio", p.cover_ratio);
    p.seed = j.value("seed", p.seed);
}

/// Training set D^c ∪ D^b with provenance masks aligned to dataset order.
struct PoisonedDataset {
    Dataset dataset;
    std::vector<char> backdoor_mask;
    std::vector<char> cover_mask;
    PoisonSpec spec;

    std::vector<SampleId> backdoor_ids() const { return ids_where(backdoor_mask); }
    std::vector<SampleId> cover_ids() const { return ids_where(cover_mask); }

    std::vector<std::size_t> positions(bool backdoor) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < backdoor_mask.size(); ++i)
            if (static_cast<bool>(backdoor_mask[i]) == backdoor) out.push_back(i);
        return out;
    }

private:
    std::vector<SampleId> ids_where(const std::vector<char>& mask) const {
        std::vector<SampleId> out;
        for (std::size_t i = 0; i < mask.size(); ++i)
            if (mask[i]) out.push_back(dataset[i].id);
        return out;
    }
};

/// All-to-one poisoning: round(poison_ratio*N) uniformly chosen items get the
/// trigger and the target label; round(cover_ratio*N) further items get the
/// trigger only.
inline PoisonedDataset poison_dataset(const Dataset& clean, const PoisonSpec& spec) {
    spec.validate(clean.class_count(), clean.side());
    const std::size_t n = clean.size();
    const auto n_backdoor = static_cast<std::size_t>(std::llround(spec.poison_ratio * static_cast<double>(n)));
    const auto n_cover = static_cast<std::size_t>(std::llround(spec.cover_ratio * static_cast<double>(n)));
    require(n_backdoor + n_cover <= n, "poison and cover counts exceed the dataset size");

    Rng rng(spec.seed);
    const auto picked = rng.sample_without_replacement(n, n_backdoor + n_cover);
    std::vector<char> backdoor(n, 0), cover(n, 0);
    for (std::size_t i = 0; i < picked.size(); ++i) (i < n_backdoor ? backdoor : cover)[picked[i]] = 1;

    const Trigger trigger(spec.trigger, clean.side());
    std::vector<LabeledImage> items = clean.items();
    for (std::size_t i = 0; i < n; ++i) {
        if (!backdoor[i] && !cover[i]) continue;
        items[i] = trigger(items[i]);
        if (backdoor[i]) items[i].label = spec.target_label;
    }
    return {Dataset(std::move(items), clean.class_count(), clean.side(), clean.split()), std::move(backdoor),
            std::move(cover), spec};
}

inline void save_poisoned(const PoisonedDataset& pd, const std::filesystem::path& dir) {
    save_dataset(pd.dataset, dir);
    io::write_json(dir / "poison_meta.json",
                   {{"spec", pd.spec}, {"backdoor_ids", pd.backdoor_ids()}, {"cover_ids", pd.cover_ids()}});
}

inline PoisonedDataset load_poisoned(const std::filesystem::path& dir) {
    Dataset data = load_dataset(dir);
    const auto meta = io::read_json(dir / "poison_meta.json");
    const auto bd = meta.at("backdoor_ids").get<std::vector<SampleId>>();
    const auto cv = meta.at("cover_ids").get<std::vector<SampleId>>();
    const std::set<SampleId> bd_set(bd.begin(), bd.end()), cv_set(cv.begin(), cv.end());
    std::vector<char> backdoor(data.size(), 0), cover(data.size(), 0);
    for (std::size_t i = 0; i < data.size(); ++i) {
        backdoor[i] = bd_set.count(data[i].id) ? 1 : 0;
        cover[i] = cv_set.count(data[i].id) ? 1 : 0;
    }
    return {std::move(data), std::move(backdoor), std::move(cover), meta.at("spec").get<PoisonSpec>()};
}

/// Triggered copies of every item whose true label differs from the target.
inline Dataset triggered_copy(const Dataset& data, const TriggerSpec& spec, int target_label) {
    const Trigger trigger(spec, data.side());
    std::vector<LabeledImage> items;
    for (const auto& item : data)
        if (item.label != target_label) items.push_back(trigger(item));
    require(!items.empty(), "no non-target items to trigger");
    return Dataset(std::move(items), data.class_count(), data.side(), data.split());
}

} // namespace psbd
