#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "psbd/attacks.hpp"
#include "psbd/common.hpp"
#include "psbd/data.hpp"
#include "psbd/io.hpp"
#include "psbd/nets.hpp"
#include "psbd/rng.hpp"
#include "psbd/uncertainty.hpp"

namespace psbd {

// ---------------------------------------------------------------------------
// Dropout-rate selection

struct SelectionPolicy {
    std::vector<double> p_grid = default_grid();
    double sigma_target = 0.8;
    int k_select = 3;

    static std::vector<double> default_grid() {
        std::vector<double> g;
        for (int i = 1; i <= 19; ++i) g.push_back(i * 5 / 100.0);
        return g;
    }

    void validate() const {
        require(!p_grid.empty(), "p_grid must be nonempty");
        for (std::size_t i = 0; i < p_grid.size(); ++i) {
            require(p_grid[i] >= 0.0 && p_grid[i] < 1.0, "p_grid values must lie in [0, 1)");
            require(i == 0 || p_grid[i] > p_grid[i - 1], "p_grid must be strictly ascending");
        }
        require(sigma_target > 0.0 && sigma_target < 1.0, "sigma_target must lie in (0, 1)");
        require(k_select >= 1, "k_select must be >= 1");
    }
};

inline void to_json(nlohmann::json& j, const SelectionPolicy& s) {
    j = {{"p_grid", s.p_grid}, {"sigma_target", s.sigma_target}, {"k_select", s.k_select}};
}

inline void from_json(const nlohmann::json& j, SelectionPolicy& s) {
    s = SelectionPolicy{};
    s.p_grid = j.value("p_grid", s.p_grid);
    s.sigma_target = j.value("sigma_target", s.sigma_target);
    s.k_select = j.value("k_select", s.k_select);
}

struct SelectionPoint {
    double p = 0.0;
    double sigma_train = 0.0;
    double sigma_val = 0.0;
};

struct SelectionResult {
    double p = 0.0;
    bool fallback = false; ///< no grid point reached sigma_target
    std::vector<SelectionPoint> points;
    std::vector<ShiftStats> train_stats; ///< per grid point, when evaluated on a model
    std::vector<ShiftStats> val_stats;
};

/// Among points with sigma_val >= target, the largest sigma_val - sigma_train
/// (smallest p on ties); otherwise the largest sigma_val.
inline SelectionResult choose_rate(const std::vector<SelectionPoint>& points, double sigma_target) {
    require(!points.empty(), "p_grid must be nonempty");
    SelectionResult r;
    r.points = points;
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (points[i].sigma_val < sigma_target) continue;
        const double gap = points[i].sigma_val - points[i].sigma_train;
        if (!best) {
            best = i;
            continue;
        }
        const double best_gap = points[*best].sigma_val - points[*best].sigma_train;
        if (gap > best_gap || (gap == best_gap && points[i].p < points[*best].p)) best = i;
    }
    if (!best) {
        r.fallback = true;
        best = 0;
        for (std::size_t i = 1; i < points.size(); ++i) {
            const auto& a = points[i];
            const auto& b = points[*best];
            if (a.sigma_val > b.sigma_val || (a.sigma_val == b.sigma_val && a.p < b.p)) best = i;
        }
    }
    r.p = points[*best].p;
    return r;
}

/// Evaluates sigma on the suspect training set and the clean validation set
/// at every grid point and applies choose_rate. `masks` supplies the seed and
/// mask mode; its p and k are overridden.
template <Classifier M>
SelectionResult select_dropout_rate(const M& model, const Dataset& train_data, const Dataset& clean_val,
                                    const SelectionPolicy& policy, const DropoutConfig& masks,
                                    std::ostream* log = nullptr) {
    policy.validate();
    require(train_data.size() > 0 && clean_val.size() > 0, "selection needs nonempty datasets");
    const ConfidenceMatrix base_train = model.confidences(train_data, nullptr);
    const ConfidenceMatrix base_val = model.confidences(clean_val, nullptr);
    std::vector<SelectionPoint> points;
    std::vector<ShiftStats> train_stats, val_stats;
    for (double p : policy.p_grid) {
        DropoutConfig cfg = masks;
        cfg.p = p;
        cfg.k = policy.k_select;
        train_stats.push_back(shift_ratio(collect_predictions(model, train_data, cfg, &base_train), model.class_count()));
        val_stats.push_back(shift_ratio(collect_predictions(model, clean_val, cfg, &base_val), model.class_count()));
        const SelectionPoint pt{p, train_stats.back().sigma, val_stats.back().sigma};
        points.push_back(pt);
        if (log) *log << "p " << p << " sigma_train " << pt.sigma_train << " sigma_val " << pt.sigma_val << "\n";
    }
    auto result = choose_rate(points, policy.sigma_target);
    result.train_stats = std::move(train_stats);
    result.val_stats = std::move(val_stats);
    if (result.fallback && log)
        *log << "warning: sigma_val never reached " << policy.sigma_target << "; using p " << result.p << "\n";
    return result;
}

// ---------------------------------------------------------------------------
// Reports

enum class Orientation { lower_is_suspicious, higher_is_suspicious };

inline std::string to_string(Orientation o) {
    return o == Orientation::lower_is_suspicious ? "lower_is_suspicious" : "higher_is_suspicious";
}

struct DetectionConfig {
    DropoutConfig dropout;             ///< p filled by selection
    double threshold_percentile = 25.0;
    int mc_dropout_k = 16;
    int strip_blend_count = 8;
    double strip_blend_alpha = 0.5;
    std::vector<double> scp_factors{3, 5, 7, 9, 11};
    double removal_fraction = 0.15;
    std::uint64_t seed = 0;            ///< for detector-side sampling (STRIP partners)

    void validate() const {
        require(threshold_percentile > 0.0 && threshold_percentile < 100.0, "threshold_percentile must lie in (0, 100)");
        dropout.validate();
        require(mc_dropout_k >= 2, "mc_dropout_k must be >= 2");
        require(strip_blend_count >= 2, "strip_blend_count must be >= 2");
        require(strip_blend_alpha > 0.0 && strip_blend_alpha < 1.0, "strip_blend_alpha must lie in (0, 1)");
        require(!scp_factors.empty(), "scp_factors must be nonempty");
        for (double f : scp_factors) require(f > 1.0, "scp factors must exceed 1");
        require(removal_fraction > 0.0 && removal_fraction < 1.0, "removal_fraction must lie in (0, 1)");
    }
};

inline void to_json(nlohmann::json& j, const DetectionConfig& c) {
    j = {{"dropout", c.dropout},
         {"threshold_percentile", c.threshold_percentile},
         {"mc_dropout_k", c.mc_dropout_k},
         {"strip_blend_count", c.strip_blend_count},
         {"strip_blend_alpha", c.strip_blend_alpha},
         {"scp_factors", c.scp_factors},
         {"removal_fraction", c.removal_fraction},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, DetectionConfig& c) {
    c = DetectionConfig{};
    if (j.contains("dropout")) c.dropout = j["dropout"].get<DropoutConfig>();
    c.threshold_percentile = j.value("threshold_percentile", c.threshold_percentile);
    c.mc_dropout_k = j.value("mc_dropout_k", c.mc_dropout_k);
    c.strip_blend_count = j.value("strip_blend_count", c.strip_blend_count);
    c.strip_blend_alpha = j.value("strip_blend_alpha", c.strip_blend_alpha);
    c.scp_factors = j.value("scp_factors", c.scp_factors);
    c.removal_fraction = j.value("removal_fraction", c.removal_fraction);
    c.seed = j.value("seed", c.seed);
}

struct DetectionReport {
    std::string detector;
    Orientation orientation = Orientation::lower_is_suspicious;
    std::vector<SampleId> ids;
    std::vector<double> scores;
    std::vector<char> flags;
    std::vector<double> validation_scores;
    std::optional<double> threshold;
    std::optional<double> p;
    nlohmann::json config = nlohmann::json::object();
    std::vector<std::string> warnings;

    std::size_t flagged_count() const {
        return static_cast<std::size_t>(std::count(flags.begin(), flags.end(), 1));
    }
    /// Scores with higher = more suspicious.
    std::vector<double> suspicion() const {
        std::vector<double> s = scores;
        if (orientation == Orientation::lower_is_suspicious)
            for (auto& v : s) v = -v;
        return s;
    }
};

/// Threshold at the given percentile of validation scores, oriented so that
/// about `percentile` percent of clean validation falls on the flagged side.
inline double tail_threshold(const std::vector<double>& validation, double percentile_q, Orientation o) {
    require(!validation.empty(), "empty validation set");
    return percentile(validation, o == Orientation::lower_is_suspicious ? percentile_q : 100.0 - percentile_q);
}

inline std::vector<char> apply_threshold(const std::vector<double>& scores, double t, Orientation o) {
    std::vector<char> flags(scores.size(), 0);
    for (std::size_t i = 0; i < scores.size(); ++i)
        flags[i] = o == Orientation::lower_is_suspicious ? scores[i] < t : scores[i] > t;
    return flags;
}

namespace detail {

inline DetectionReport thresholded_report(std::string name, Orientation o, const Dataset& train_data,
                                          std::vector<double> scores, std::vector<double> val_scores,
                                          double percentile_q) {
    DetectionReport r;
    r.detector = std::move(name);
    r.orientation = o;
    for (const auto& item : train_data) r.ids.push_back(item.id);
    r.scores = std::move(scores);
    r.validation_scores = std::move(val_scores);
    r.threshold = tail_threshold(r.validation_scores, percentile_q, o);
    r.flags = apply_threshold(r.scores, *r.threshold, o);
    return r;
}

inline double entropy(const double* p, Eigen::Index n) {
    double h = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
        if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
    return h;
}

} // namespace detail

/// PSU scores; flags PSU < T with T the validation percentile.
template <Classifier M>
DetectionReport psbd_detect(const M& model, const Dataset& train_data, const Dataset& clean_val,
                            const DetectionConfig& cfg, std::vector<PredictionRecord>* records = nullptr) {
    cfg.validate();
    require(clean_val.size() > 0, "empty validation set");
    auto train_records = collect_predictions(model, train_data, cfg.dropout);
    auto report = detail::thresholded_report("psbd", Orientation::lower_is_suspicious, train_data, psu(train_records),
                                             psu(collect_predictions(model, clean_val, cfg.dropout)),
                                             cfg.threshold_percentile);
    report.p = cfg.dropout.p;
    report.config = cfg;
    if (records) *records = std::move(train_records);
    return report;
}

/// MC-Dropout standard deviation; low uncertainty is suspicious.
template <Classifier M>
DetectionReport mc_dropout_detect(const M& model, const Dataset& train_data, const Dataset& clean_val,
                                  const DetectionConfig& cfg) {
    cfg.validate();
    require(clean_val.size() > 0, "empty validation set");
    DropoutConfig dc = cfg.dropout;
    dc.k = cfg.mc_dropout_k;
    auto report = detail::thresholded_report("mc_dropout", Orientation::lower_is_suspicious, train_data,
                                             mc_dropout_uncertainty(model, train_data, dc),
                                             mc_dropout_uncertainty(model, clean_val, dc), cfg.threshold_percentile);
    report.p = dc.p;
    report.config = cfg;
    return report;
}

namespace detail {

/// Mean prediction entropy over `count` blends of each item with partners
/// drawn from `pool`; partner choice is keyed by sample id.
template <Classifier M>
std::vector<double> strip_entropy(const M& model, const Dataset& data, const Dataset& pool, int count, double alpha,
                                  std::uint64_t seed, bool exclude_self) {
    std::vector<std::vector<std::size_t>> partners(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        Rng rng(combine_seed(seed, data[i].id));
        auto pick = rng.sample_without_replacement(pool.size(), pool.size());
        for (auto j : pick) {
            if (exclude_self && pool[j].id == data[i].id) continue;
            partners[i].push_back(j);
            if (static_cast<int>(partners[i].size()) == count) break;
        }
    }
    std::vector<double> h(data.size(), 0.0);
    for (int round = 0; round < count; ++round) {
        std::vector<LabeledImage> blended;
        blended.reserve(data.size());
        for (std::size_t i = 0; i < data.size(); ++i)
            blended.push_back(apply_blend_trigger(data[i], pool[partners[i][static_cast<std::size_t>(round)]].pixels, alpha));
        const Dataset batch(std::move(blended), data.class_count(), data.side(), data.split());
        const ConfidenceMatrix probs = model.confidences(batch, nullptr);
        for (Eigen::Index i = 0; i < probs.rows(); ++i)
            h[static_cast<std::size_t>(i)] += entropy(probs.row(i).data(), probs.cols()) / count;
    }
    return h;
}

} // namespace detail

/// STRIP-style: blends with clean validation images; low entropy is suspicious.
template <Classifier M>
DetectionReport strip_detect(const M& model, const Dataset& train_data, const Dataset& clean_val, int blend_count,
                             double blend_alpha, std::uint64_t seed, double threshold_percentile = 25.0) {
    require(blend_count >= 2, "blend_count must be >= 2");
    require(clean_val.size() > static_cast<std::size_t>(blend_count), "validation set smaller than blend_count");
    require(blend_alpha > 0.0 && blend_alpha < 1.0, "blend_alpha must lie in (0, 1)");
    auto report = detail::thresholded_report(
        "strip", Orientation::lower_is_suspicious, train_data,
        detail::strip_entropy(model, train_data, clean_val, blend_count, blend_alpha, seed, false),
        detail::strip_entropy(model, clean_val, clean_val, blend_count, blend_alpha, combine_seed(seed, 1), true),
        threshold_percentile);
    report.config = {{"blend_count", blend_count}, {"blend_alpha", blend_alpha}, {"seed", seed},
                     {"threshold_percentile", threshold_percentile}};
    return report;
}

/// Intensities multiplied by `factor` and clamped to [0, 1].
inline Dataset amplify(const Dataset& data, double factor) {
    std::vector<LabeledImage> items = data.items();
    for (auto& item : items)
        for (auto& v : item.pixels) v = static_cast<float>(std::min(1.0, static_cast<double>(v) * factor));
    return Dataset(std::move(items), data.class_count(), data.side(), data.split());
}

namespace detail {

template <Classifier M>
std::vector<double> scp_consistency(const M& model, const Dataset& data, const std::vector<double>& factors) {
    const ConfidenceMatrix base = model.confidences(data, nullptr);
    std::vector<double> score(data.size(), 0.0);
    for (double f : factors) {
        const ConfidenceMatrix amp = model.confidences(amplify(data, f), nullptr);
        for (Eigen::Index i = 0; i < base.rows(); ++i) {
            Eigen::Index a, b;
            base.row(i).maxCoeff(&a);
            amp.row(i).maxCoeff(&b);
            score[static_cast<std::size_t>(i)] += (a == b ? 1.0 : 0.0) / static_cast<double>(factors.size());
        }
    }
    return score;
}

} // namespace detail

/// Scale-up consistency: fraction of amplified copies keeping the clean
/// argmax; high consistency is suspicious.
template <Classifier M>
DetectionReport scp_detect(const M& model, const Dataset& train_data, const Dataset& clean_val,
                           const std::vector<double>& factors, double threshold_percentile = 25.0) {
    require(!factors.empty(), "factor set must be nonempty");
    for (double f : factors) require(f > 1.0, "amplification factors must exceed 1");
    require(clean_val.size() > 0, "empty validation set");
    auto report = detail::thresholded_report("scp", Orientation::higher_is_suspicious, train_data,
                                             detail::scp_consistency(model, train_data, factors),
                                             detail::scp_consistency(model, clean_val, factors), threshold_percentile);
    report.config = {{"factors", factors}, {"threshold_percentile", threshold_percentile}};
    return report;
}

/// Spectral signature scores from given features and class assignments.
inline DetectionReport spectral_signature_scores(const ConfidenceMatrix& features, const std::vector<int>& classes,
                                                 const std::vector<SampleId>& ids, int class_count,
                                                 double removal_fraction) {
    require(removal_fraction > 0.0 && removal_fraction < 1.0, "removal_fraction must lie in (0, 1)");
    require(static_cast<std::size_t>(features.rows()) == classes.size() && classes.size() == ids.size(),
            "feature rows, classes and ids disagree");
    DetectionReport r;
    r.detector = "spectral";
    r.orientation = Orientation::higher_is_suspicious;
    r.ids = ids;
    r.scores.assign(ids.size(), 0.0);
    r.flags.assign(ids.size(), 0);
    for (int c = 0; c < class_count; ++c) {
        std::vector<Eigen::Index> rows;
        for (std::size_t i = 0; i < classes.size(); ++i)
            if (classes[i] == c) rows.push_back(static_cast<Eigen::Index>(i));
        if (rows.empty()) continue;
        if (rows.size() < 2) {
            r.warnings.push_back("class " + std::to_string(c) + " has a single sample; skipped");
            continue;
        }
        Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), features.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = features.row(rows[i]);
        x.rowwise() -= x.colwise().mean();
        Eigen::VectorXd proj = Eigen::VectorXd::Zero(x.rows());
        if (x.squaredNorm() > 0.0) {
            Eigen::BDCSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinV);
            proj = x * svd.matrixV().col(0);
        }
        std::vector<std::size_t> order(rows.size());
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = 0; i < rows.size(); ++i) r.scores[static_cast<std::size_t>(rows[i])] = proj[static_cast<Eigen::Index>(i)] * proj[static_cast<Eigen::Index>(i)];
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return r.scores[static_cast<std::size_t>(rows[a])] > r.scores[static_cast<std::size_t>(rows[b])];
        });
        const auto remove = static_cast<std::size_t>(std::llround(removal_fraction * static_cast<double>(rows.size())));
        for (std::size_t i = 0; i < remove; ++i) {
            const auto pos = static_cast<std::size_t>(rows[order[i]]);
            if (r.scores[pos] > 0.0) r.flags[pos] = 1;
        }
    }
    r.config = {{"removal_fraction", removal_fraction}};
    return r;
}

/// Penultimate features grouped by predicted class.
template <class Scalar>
DetectionReport spectral_signature_detect(const ResidualNet<Scalar>& model, const Dataset& train_data,
                                          double removal_fraction) {
    const ConfidenceMatrix probs = model.confidences(train_data, nullptr);
    std::vector<int> classes;
    std::vector<SampleId> ids;
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        Eigen::Index c;
        probs.row(i).maxCoeff(&c);
        classes.push_back(static_cast<int>(c));
        ids.push_back(train_data[static_cast<std::size_t>(i)].id);
    }
    return spectral_signature_scores(model.penultimate_features(train_data, nullptr), classes, ids,
                                     model.class_count(), removal_fraction);
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json report_json(const DetectionReport& r) {
    nlohmann::json j = {{"detector", r.detector},
                        {"orientation", to_string(r.orientation)},
                        {"count", r.ids.size()},
                        {"flagged", r.flagged_count()},
                        {"config", r.config},
                        {"warnings", r.warnings}};
    j["p"] = r.p ? nlohmann::json(*r.p) : nlohmann::json(nullptr);
    j["T"] = r.threshold ? nlohmann::json(*r.threshold) : nlohmann::json(nullptr);
    return j;
}

/// report.json plus scores.csv (sample_id,score,flagged,is_backdoor_truth).
inline void save_report(const DetectionReport& r, const std::filesystem::path& dir,
                        const std::vector<char>& backdoor_truth = {}) {
    require(backdoor_truth.empty() || backdoor_truth.size() == r.ids.size(), "truth mask does not match the report");
    io::ensure_dir(dir);
    io::write_json(dir / "report.json", report_json(r));
    std::ostringstream os;
    os << "sample_id,score,flagged,is_backdoor_truth\n";
    for (std::size_t i = 0; i < r.ids.size(); ++i)
        os << r.ids[i] << ',' << io::fmt(r.scores[i]) << ',' << static_cast<int>(r.flags[i]) << ','
           << (backdoor_truth.empty() ? 0 : static_cast<int>(backdoor_truth[i] != 0)) << '\n';
    io::write_text(dir / "scores.csv", os.str());
}

} // namespace psbd
