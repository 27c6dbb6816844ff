#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "psbd/common.hpp"
#include "psbd/data.hpp"
#include "psbd/io.hpp"
#include "psbd/nets.hpp"

namespace psbd {

/// Anything that yields a (samples x classes) confidence matrix for a dataset,
/// optionally under dropout masks.
template <class M>
concept Classifier = requires(const M& m, const Dataset& d, const MaskSource* masks) {
    { m.confidences(d, masks) } -> std::convertible_to<ConfidenceMatrix>;
    { m.class_count() } -> std::convertible_to<int>;
};

struct PredictionRecord {
    SampleId id = 0;
    std::vector<double> base_confidences;
    int base_class = 0;
    std::vector<std::vector<double>> pass_confidences; ///< k rows of C
    std::vector<int> pass_classes;

    int k() const noexcept { return static_cast<int>(pass_classes.size()); }
};

/// One clean forward plus `cfg.k` dropout forwards per sample. `base` may
/// carry precomputed clean confidences for `data`.
template <Classifier M>
std::vector<PredictionRecord> collect_predictions(const M& model, const Dataset& data, const DropoutConfig& cfg,
                                                  const ConfidenceMatrix* base_in = nullptr) {
    cfg.validate();
    require(data.size() > 0, "empty dataset");
    require(!base_in || base_in->rows() == static_cast<Eigen::Index>(data.size()),
            "precomputed confidences do not match the dataset");
    const ConfidenceMatrix base = base_in ? *base_in : ConfidenceMatrix(model.confidences(data, nullptr));
    const auto n = static_cast<Eigen::Index>(data.size());
    std::vector<PredictionRecord> out(data.size());
    for (Eigen::Index i = 0; i < n; ++i) {
        auto& r = out[static_cast<std::size_t>(i)];
        r.id = data[static_cast<std::size_t>(i)].id;
        r.base_confidences.assign(base.row(i).data(), base.row(i).data() + base.cols());
        r.base_class = argmax(r.base_confidences);
        r.pass_confidences.reserve(static_cast<std::size_t>(cfg.k));
        r.pass_classes.reserve(static_cast<std::size_t>(cfg.k));
    }
    for (int pass = 0; pass < cfg.k; ++pass) {
        const auto masks = cfg.pass(pass);
        const auto probs = model.confidences(data, &masks);
        for (Eigen::Index i = 0; i < n; ++i) {
            auto& r = out[static_cast<std::size_t>(i)];
            r.pass_confidences.emplace_back(probs.row(i).data(), probs.row(i).data() + probs.cols());
            r.pass_classes.push_back(argmax(r.pass_confidences.back()));
        }
    }
    return out;
}

struct ShiftStats {
    double sigma = 0.0;
    std::vector<int> shift_counts;          ///< per sample, in dataset order
    std::vector<std::size_t> destinations;  ///< per class: shifted-to counts
    std::size_t total_shifts = 0;
    std::size_t total_events = 0;           ///< k * |D|

    /// Share of shift events landing on `cls` (0 when nothing shifted).
    double intensity(int cls) const {
        return total_shifts == 0 ? 0.0
                                 : static_cast<double>(destinations.at(static_cast<std::size_t>(cls))) /
                                       static_cast<double>(total_shifts);
    }
};

/// A shift is one dropout pass whose argmax differs from the clean argmax.
inline ShiftStats shift_ratio(const std::vector<PredictionRecord>& records, int class_count) {
    require(!records.empty(), "empty dataset");
    ShiftStats s;
    s.destinations.assign(static_cast<std::size_t>(class_count), 0);
    for (const auto& r : records) {
        int count = 0;
        for (int cls : r.pass_classes) {
            if (cls != r.base_class) {
                ++count;
                ++s.destinations[static_cast<std::size_t>(cls)];
            }
        }
        s.shift_counts.push_back(count);
        s.total_shifts += static_cast<std::size_t>(count);
        s.total_events += static_cast<std::size_t>(r.k());
    }
    s.sigma = s.total_events == 0 ? 0.0 : static_cast<double>(s.total_shifts) / static_cast<double>(s.total_events);
    return s;
}

template <Classifier M>
ShiftStats shift_ratio(const M& model, const Dataset& data, const DropoutConfig& cfg) {
    return shift_ratio(collect_predictions(model, data, cfg), model.class_count());
}

/// P_c(clean) - mean_i P_c(pass i), c the clean argmax.
inline double psu(const PredictionRecord& r) {
    if (r.pass_confidences.empty()) return 0.0;
    const auto c = static_cast<std::size_t>(r.base_class);
    double drop = 0.0;
    for (const auto& row : r.pass_confidences) drop += r.base_confidences[c] - row[c];
    return drop / static_cast<double>(r.pass_confidences.size());
}

inline std::vector<double> psu(const std::vector<PredictionRecord>& records) {
    require(!records.empty(), "empty dataset");
    std::vector<double> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(psu(r));
    return out;
}

template <Classifier M>
std::vector<double> psu(const M& model, const Dataset& data, const DropoutConfig& cfg) {
    return psu(collect_predictions(model, data, cfg));
}

/// Population standard deviation, across passes, of the confidence of the
/// class with the highest mean confidence.
inline double mc_dropout_uncertainty(const PredictionRecord& r) {
    require(r.k() >= 2, "MC-Dropout needs k >= 2");
    const std::size_t classes = r.pass_confidences.front().size();
    std::vector<double> mean(classes, 0.0);
    for (const auto& row : r.pass_confidences)
        for (std::size_t j = 0; j < classes; ++j) mean[j] += row[j];
    const auto c = static_cast<std::size_t>(argmax(mean));
    const double mu = mean[c] / r.k();
    double var = 0.0;
    for (const auto& row : r.pass_confidences) var += (row[c] - mu) * (row[c] - mu);
    return std::sqrt(var / r.k());
}

inline std::vector<double> mc_dropout_uncertainty(const std::vector<PredictionRecord>& records) {
    require(!records.empty(), "empty dataset");
    std::vector<double> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(mc_dropout_uncertainty(r));
    return out;
}

template <Classifier M>
std::vector<double> mc_dropout_uncertainty(const M& model, const Dataset& data, const DropoutConfig& cfg) {
    require(cfg.k >= 2, "MC-Dropout needs k >= 2");
    return mc_dropout_uncertainty(collect_predictions(model, data, cfg));
}

// ---------------------------------------------------------------------------
// Feature maps

struct FeatureStack {
    int channels = 0;
    int side = 0;
    std::vector<double> values; ///< (c, y, x)
};

/// Final-stage activations before global pooling, optionally under one
/// dropout pass (pass 0 of `cfg`).
template <class Scalar>
FeatureStack capture_feature_maps(const ResidualNet<Scalar>& model, const LabeledImage& image,
                                  const DropoutConfig* cfg = nullptr) {
    FeatureStack f;
    if (cfg) {
        cfg->validate();
        const auto masks = cfg->pass(0);
        f.values = model.final_feature_maps(image, &masks, &f.channels, &f.side);
    } else {
        f.values = model.final_feature_maps(image, nullptr, &f.channels, &f.side);
    }
    return f;
}

/// Positions where both stacks are non-zero and differ by at most `tolerance`.
inline std::vector<char> similarity_mask(const FeatureStack& a, const FeatureStack& b, double tolerance = 1.0) {
    require(a.values.size() == b.values.size(), "feature stacks differ in shape");
    std::vector<char> out(a.values.size(), 0);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a.values[i] != 0.0 && b.values[i] != 0.0 && std::abs(a.values[i] - b.values[i]) <= tolerance;
    return out;
}

inline double similar_fraction(const std::vector<char>& mask) {
    if (mask.empty()) return 0.0;
    std::size_t n = 0;
    for (char c : mask) n += c != 0;
    return static_cast<double>(n) / static_cast<double>(mask.size());
}

// ---------------------------------------------------------------------------
// Export

/// sample_id,base_class,base_conf,psu,shift_count,is_backdoor_truth
inline void write_statistics_csv(const std::filesystem::path& path, const std::vector<PredictionRecord>& records,
                                 const std::vector<char>& backdoor_truth) {
    require(backdoor_truth.empty() || backdoor_truth.size() == records.size(),
            "truth mask does not match the record count");
    std::ostringstream os;
    os << "sample_id,base_class,base_conf,psu,shift_count,is_backdoor_truth\n";
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        int shifts = 0;
        for (int c : r.pass_classes) shifts += c != r.base_class;
        os << r.id << ',' << r.base_class << ',' << io::fmt(r.base_confidences[static_cast<std::size_t>(r.base_class)])
           << ',' << io::fmt(psu(r)) << ',' << shifts << ','
           << (backdoor_truth.empty() ? 0 : static_cast<int>(backdoor_truth[i] != 0)) << '\n';
    }
    io::write_text(path, os.str());
}

} // namespace psbd
