#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "psbd/common.hpp"
#include "psbd/detect.hpp"
#include "psbd/io.hpp"
#include "psbd/uncertainty.hpp"

namespace psbd {

struct MetricSet {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::optional<double> tpr, fpr, auroc;
};

/// Mann-Whitney AUROC with average ranks for ties. Higher score = positive.
/// Absent when either class is empty.
inline std::optional<double> auroc(const std::vector<double>& scores, const std::vector<char>& positive) {
    require(scores.size() == positive.size(), "scores and labels differ in length");
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (char c : positive) n_pos += c != 0;
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) return std::nullopt;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t t = i; t <= j; ++t)
            if (positive[order[t]]) rank_sum += avg;
        i = j + 1;
    }
    const double u = rank_sum - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

/// Counts from flags; AUROC from the oriented scores. `truth_ids` and
/// `truth` must describe exactly the report's id set (any order).
inline MetricSet compute_metrics(const DetectionReport& report, const std::vector<SampleId>& truth_ids,
                                 const std::vector<char>& truth) {
    require(truth_ids.size() == truth.size(), "truth ids and labels differ in length");
    require(truth_ids.size() == report.ids.size(), "report and truth cover different id sets");
    std::unordered_map<SampleId, char> lookup;
    lookup.reserve(truth_ids.size());
    for (std::size_t i = 0; i < truth_ids.size(); ++i) lookup.emplace(truth_ids[i], truth[i]);
    require(lookup.size() == truth_ids.size(), "duplicate ids in truth");
    std::vector<char> aligned(report.ids.size());
    MetricSet m;
    for (std::size_t i = 0; i < report.ids.size(); ++i) {
        const auto it = lookup.find(report.ids[i]);
        require(it != lookup.end(), "report id " + std::to_string(report.ids[i]) + " missing from truth");
        const bool pos = it->second != 0;
        const bool flag = report.flags[i] != 0;
        aligned[i] = pos;
        if (pos) (flag ? m.tp : m.fn)++;
        else (flag ? m.fp : m.tn)++;
    }
    if (m.tp + m.fn > 0) m.tpr = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
    if (m.fp + m.tn > 0) m.fpr = static_cast<double>(m.fp) / static_cast<double>(m.fp + m.tn);
    m.auroc = auroc(report.suspicion(), aligned);
    return m;
}

inline MetricSet compute_metrics(const DetectionReport& report, const PoisonedDataset& data) {
    std::vector<SampleId> ids;
    for (const auto& item : data.dataset) ids.push_back(item.id);
    return compute_metrics(report, ids, data.backdoor_mask);
}

inline nlohmann::json optional_json(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json metrics_json(const MetricSet& m, const DetectionReport& r, const std::string& attack,
                                   double poison_ratio) {
    return {{"detector", r.detector},
            {"attack", attack},
            {"poison_ratio", poison_ratio},
            {"tpr", optional_json(m.tpr)},
            {"fpr", optional_json(m.fpr)},
            {"auroc", optional_json(m.auroc)},
            {"p", optional_json(r.p)},
            {"T", optional_json(r.threshold)},
            {"tp", m.tp},
            {"fp", m.fp},
            {"tn", m.tn},
            {"fn", m.fn}};
}

// ---------------------------------------------------------------------------
// Curves

struct CurveRow {
    double p = 0.0;
    std::optional<double> sigma_clean_train, sigma_clean_val, sigma_backdoor;
};

struct CurveData {
    std::vector<CurveRow> rows;
    std::optional<double> selected_p;
    /// Shift stats per subset at the selected p (empty subsets omitted).
    std::vector<std::pair<std::string, ShiftStats>> histograms;
};

/// Per-p sigma for the clean-train, clean-val and backdoor subsets. Any
/// subset may be empty (its column is then blank). When `selected_p` is
/// given, shift-destination histograms are taken at that rate.
template <Classifier M>
CurveData shift_curves(const M& model, const std::vector<const Dataset*>& subsets, const std::vector<double>& p_grid,
                       const DropoutConfig& masks, std::optional<double> selected_p = std::nullopt) {
    require(!p_grid.empty(), "p_grid must be nonempty");
    require(subsets.size() == 3, "expected clean-train, clean-val and backdoor subsets");
    static const char* names[] = {"clean_train", "clean_val", "backdoor"};
    std::vector<std::optional<ConfidenceMatrix>> base(3);
    for (std::size_t s = 0; s < 3; ++s)
        if (subsets[s] && subsets[s]->size() > 0) base[s] = model.confidences(*subsets[s], nullptr);
    CurveData out;
    out.selected_p = selected_p;
    auto sigma_at = [&](std::size_t s, double p) -> std::optional<ShiftStats> {
        if (!base[s]) return std::nullopt;
        DropoutConfig cfg = masks;
        cfg.p = p;
        return shift_ratio(collect_predictions(model, *subsets[s], cfg, &*base[s]), model.class_count());
    };
    for (double p : p_grid) {
        CurveRow row;
        row.p = p;
        std::optional<double>* cols[] = {&row.sigma_clean_train, &row.sigma_clean_val, &row.sigma_backdoor};
        for (std::size_t s = 0; s < 3; ++s)
            if (auto st = sigma_at(s, p)) *cols[s] = st->sigma;
        out.rows.push_back(row);
    }
    if (selected_p)
        for (std::size_t s = 0; s < 3; ++s)
            if (auto st = sigma_at(s, *selected_p)) out.histograms.emplace_back(names[s], std::move(*st));
    return out;
}

/// curves.csv (p,sigma_clean_train,sigma_clean_val,sigma_backdoor) and
/// shift_histogram.csv (subset,class,count,intensity).
inline void write_curves(const CurveData& curves, const std::filesystem::path& dir) {
    io::ensure_dir(dir);
    auto cell = [](const std::optional<double>& v) { return v ? io::fmt(*v) : std::string(); };
    std::ostringstream os;
    os << "p,sigma_clean_train,sigma_clean_val,sigma_backdoor\n";
    for (const auto& r : curves.rows)
        os << io::fmt(r.p) << ',' << cell(r.sigma_clean_train) << ',' << cell(r.sigma_clean_val) << ','
           << cell(r.sigma_backdoor) << '\n';
    io::write_text(dir / "curves.csv", os.str());

    std::ostringstream hs;
    hs << "subset,class,count,intensity\n";
    for (const auto& [name, st] : curves.histograms)
        for (std::size_t c = 0; c < st.destinations.size(); ++c)
            hs << name << ',' << c << ',' << st.destinations[c] << ',' << io::fmt(st.intensity(static_cast<int>(c)))
               << '\n';
    io::write_text(dir / "shift_histogram.csv", hs.str());
}

template <Classifier M>
CurveData emit_curves(const M& model, const std::vector<const Dataset*>& subsets, const std::vector<double>& p_grid,
                      const DropoutConfig& masks, std::optional<double> selected_p, const std::filesystem::path& dir) {
    auto curves = shift_curves(model, subsets, p_grid, masks, selected_p);
    write_curves(curves, dir);
    return curves;
}

// ---------------------------------------------------------------------------
// Box-plot summaries

struct BoxSummary {
    std::string group;
    std::size_t count = 0;
    double whisker_low = 0, q1 = 0, median = 0, q3 = 0, whisker_high = 0;
};

/// Quartiles by linear interpolation; whiskers at the most extreme values
/// within 1.5 IQR of the box.
inline BoxSummary box_summary(const std::string& group, const std::vector<double>& values) {
    require(!values.empty(), "empty group '" + group + "'");
    BoxSummary b;
    b.group = group;
    b.count = values.size();
    b.q1 = percentile(values, 25.0);
    b.median = percentile(values, 50.0);
    b.q3 = percentile(values, 75.0);
    const double iqr = b.q3 - b.q1;
    const double lo = b.q1 - 1.5 * iqr, hi = b.q3 + 1.5 * iqr;
    b.whisker_low = b.q1;
    b.whisker_high = b.q3;
    for (double v : values) {
        if (v >= lo) b.whisker_low = std::min(b.whisker_low, v);
        if (v <= hi) b.whisker_high = std::max(b.whisker_high, v);
    }
    return b;
}

/// psu_summary.csv; empty groups are omitted and reported in the return value.
inline std::vector<std::string> emit_psu_summary(const std::vector<std::pair<std::string, std::vector<double>>>& groups,
                                                 const std::filesystem::path& path,
                                                 std::vector<BoxSummary>* out = nullptr) {
    std::vector<std::string> warnings;
    std::ostringstream os;
    os << "group,count,whisker_low,q1,median,q3,whisker_high\n";
    for (const auto& [name, values] : groups) {
        if (values.empty()) {
            warnings.push_back("group '" + name + "' is empty; row omitted");
            continue;
        }
        const auto b = box_summary(name, values);
        os << b.group << ',' << b.count << ',' << io::fmt(b.whisker_low) << ',' << io::fmt(b.q1) << ','
           << io::fmt(b.median) << ',' << io::fmt(b.q3) << ',' << io::fmt(b.whisker_high) << '\n';
        if (out) out->push_back(b);
    }
    io::write_text(path, os.str());
    return warnings;
}

} // namespace psbd
