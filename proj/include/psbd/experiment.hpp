#pragma once

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psbd/attacks.hpp"
#include "psbd/common.hpp"
#include "psbd/data.hpp"
#include "psbd/detect.hpp"
#include "psbd/io.hpp"
#include "psbd/nets.hpp"
#include "psbd/report.hpp"
#include "psbd/rng.hpp"
#include "psbd/train.hpp"
#include "psbd/uncertainty.hpp"

namespace psbd {

/// A failure inside one pipeline stage; `stage()` names it.
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& what)
        : std::runtime_error("stage " + stage + ": " + what), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

struct DataParams {
    int per_class = 500;
    int class_count = 10;
    int side = 32;
    int val_pool_per_class = 100;
    double val_fraction = 0.05;
    int test_per_class = 100;
};

inline void to_json(nlohmann::json& j, const DataParams& d) {
    j = {{"per_class", d.per_class},
         {"class_count", d.class_count},
         {"side", d.side},
         {"val_pool_per_class", d.val_pool_per_class},
         {"val_fraction", d.val_fraction},
         {"test_per_class", d.test_per_class}};
}

inline void from_json(const nlohmann::json& j, DataParams& d) {
    d = DataParams{};
    d.per_class = j.value("per_class", d.per_class);
    d.class_count = j.value("class_count", d.class_count);
    d.side = j.value("side", d.side);
    d.val_pool_per_class = j.value("val_pool_per_class", d.val_pool_per_class);
    d.val_fraction = j.value("val_fraction", d.val_fraction);
    d.test_per_class = j.value("test_per_class", d.test_per_class);
}

inline const std::vector<std::string>& known_detectors() {
    static const std::vector<std::string> names{"psbd", "mc_dropout", "strip", "scp", "spectral"};
    return names;
}

struct ExperimentConfig {
    std::string name = "experiment";
    std::string attack; ///< label for reports; derived from the poison spec when empty
    std::uint64_t seed = 0;
    DataParams data;
    PoisonSpec poison;
    ArchSpec arch;
    TrainConfig train;
    std::optional<AdaptiveAttackConfig> adaptive;
    SelectionPolicy selection;
    DetectionConfig detection;
    std::vector<std::string> detectors = known_detectors();
    std::string output_dir = "runs";
    bool emit_curves = true;

    void validate() const {
        require(!name.empty(), "experiment name must be nonempty");
        require(data.per_class >= 1 && data.val_pool_per_class >= 1 && data.test_per_class >= 1,
                "dataset sizes must be positive");
        arch.validate();
        require(arch.class_count == data.class_count, "arch class_count differs from the dataset");
        require(arch.input_side == data.side, "arch input_side differs from the dataset");
        poison.validate(data.class_count, data.side);
        train.validate();
        if (adaptive) adaptive->validate();
        selection.validate();
        DetectionConfig d = detection;
        d.dropout.p = 0.5; // filled by selection
        d.validate();
        require(!detectors.empty(), "detector list must be nonempty");
        for (const auto& name_ : detectors)
            require(std::find(known_detectors().begin(), known_detectors().end(), name_) != known_detectors().end(),
                    "unknown detector '" + name_ + "'");
    }

    std::string attack_label() const {
        if (!attack.empty()) return attack;
        if (poison.poison_ratio == 0.0) return "none";
        std::string base = poison.trigger.kind == TriggerKind::patch ? "badnets" : to_string(poison.trigger.kind);
        return adaptive ? "adaptive-" + base : base;
    }

    std::string run_name() const { return name + "-seed" + std::to_string(seed); }
    std::filesystem::path run_dir() const { return std::filesystem::path(output_dir) / run_name(); }

    /// Copy with every nested seed derived from the global seed.
    ExperimentConfig resolved() const {
        ExperimentConfig c = *this;
        const std::uint64_t poison_seed = sub_seed(seed, "poison");
        c.poison.seed = poison_seed;
        c.poison.trigger.pattern_seed = combine_seed(poison_seed, 1);
        c.poison.trigger.warp_seed = combine_seed(poison_seed, 2);
        c.train.seed = sub_seed(seed, "train");
        if (c.adaptive) c.adaptive->psu_config.seed = combine_seed(c.train.seed, 1);
        c.detection.dropout.seed = sub_seed(seed, "masks");
        c.detection.seed = sub_seed(seed, "detectors");
        return c;
    }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    j = {{"name", c.name},
         {"attack", c.attack},
         {"seed", c.seed},
         {"data", c.data},
         {"poison", c.poison},
         {"arch", c.arch},
         {"train", c.train},
         {"selection", c.selection},
         {"detection", c.detection},
         {"detectors", c.detectors},
         {"output_dir", c.output_dir},
         {"emit_curves", c.emit_curves}};
    j["adaptive"] = c.adaptive ? nlohmann::json(*c.adaptive) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    static const std::vector<std::string> allowed{"name", "attack", "seed", "data", "poison", "arch", "train",
                                                  "adaptive", "selection", "detection", "detectors", "output_dir",
                                                  "emit_curves"};
    for (const auto& [key, _] : j.items())
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ParameterError("unknown config field '" + key + "'");
    c = ExperimentConfig{};
    c.name = j.value("name", c.name);
    c.attack = j.value("attack", c.attack);
    c.seed = j.value("seed", c.seed);
    if (j.contains("data")) c.data = j["data"].get<DataParams>();
    if (j.contains("poison")) c.poison = j["poison"].get<PoisonSpec>();
    c.arch.class_count = c.data.class_count;
    c.arch.input_side = c.data.side;
    if (j.contains("arch")) {
        nlohmann::json a = j["arch"];
        if (!a.contains("class_count")) a["class_count"] = c.data.class_count;
        if (!a.contains("input_side")) a["input_side"] = c.data.side;
        c.arch = a.get<ArchSpec>();
    }
    if (j.contains("train")) c.train = j["train"].get<TrainConfig>();
    if (j.contains("adaptive") && !j["adaptive"].is_null()) c.adaptive = j["adaptive"].get<AdaptiveAttackConfig>();
    if (j.contains("selection")) c.selection = j["selection"].get<SelectionPolicy>();
    if (j.contains("detection")) c.detection = j["detection"].get<DetectionConfig>();
    c.detectors = j.value("detectors", c.detectors);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.emit_curves = j.value("emit_curves", c.emit_curves);
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    try {
        return io::read_json(path).get<ExperimentConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ParameterError("invalid config " + path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Pipeline pieces

struct ExperimentData {
    Dataset clean_train;
    Dataset clean_val;
    Dataset test;
};

/// Training pool, validation split and test set from the data sub-seed.
/// Ids: training from 0, validation pool from 1e6, test from 2e6.
inline ExperimentData make_experiment_data(const DataParams& d, std::uint64_t global_seed) {
    const std::uint64_t s = sub_seed(global_seed, "data");
    Dataset train = synth_dataset(combine_seed(s, 0), d.per_class, d.class_count, d.side, SplitTag::train, 0);
    Dataset pool = synth_dataset(combine_seed(s, 1), d.val_pool_per_class, d.class_count, d.side, SplitTag::test,
                                 1'000'000);
    Dataset test = synth_dataset(combine_seed(s, 2), d.test_per_class, d.class_count, d.side, SplitTag::test,
                                 2'000'000);
    auto split = split_validation(pool, d.val_fraction, train.size(), combine_seed(s, 3));
    return {std::move(train), std::move(split.clean_validation), std::move(test)};
}

struct DetectorOutcome {
    DetectionReport report;
    MetricSet metrics;
};

struct ExperimentResult {
    std::filesystem::path run_dir;
    double clean_accuracy = 0.0;
    double attack_success_rate = 0.0;
    SelectionResult selection;
    std::map<std::string, DetectorOutcome> detectors;
    std::optional<CurveData> curves;
};

namespace detail {

template <class Fn>
auto stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

inline void write_poison_meta(const PoisonedDataset& pd, const std::filesystem::path& path) {
    io::write_json(path, {{"spec", pd.spec},
                          {"count", pd.dataset.size()},
                          {"backdoor_ids", pd.backdoor_ids()},
                          {"cover_ids", pd.cover_ids()}});
}

/// sigma of a subset from per-sample shift counts.
inline std::optional<double> subset_sigma(const ShiftStats& st, const std::vector<std::size_t>& positions, int k) {
    if (positions.empty()) return std::nullopt;
    std::size_t shifts = 0;
    for (auto p : positions) shifts += static_cast<std::size_t>(st.shift_counts[p]);
    return static_cast<double>(shifts) / (static_cast<double>(k) * static_cast<double>(positions.size()));
}

} // namespace detail

/// Runs poison -> train -> select p -> detect -> report and persists every
/// artifact under `run_dir()`. With `resume`, an existing final checkpoint is
/// loaded instead of retraining.
inline ExperimentResult run_experiment(const ExperimentConfig& raw, std::ostream* log = nullptr, bool resume = false) {
    detail::stage("config", [&] { raw.validate(); return 0; });
    const ExperimentConfig cfg = raw.resolved();
    ExperimentResult result;
    result.run_dir = cfg.run_dir();
    const auto dir = result.run_dir;
    detail::stage("config", [&] {
        io::ensure_dir(dir);
        io::write_json(dir / "config.json", cfg);
        return 0;
    });

    auto data = detail::stage("data", [&] { return make_experiment_data(cfg.data, cfg.seed); });
    auto poisoned = detail::stage("poison", [&] {
        auto pd = poison_dataset(data.clean_train, cfg.poison);
        detail::write_poison_meta(pd, dir / "poison_meta.json");
        return pd;
    });
    const Dataset& suspect = poisoned.dataset;

    Model model = detail::stage("train", [&] {
        const auto ckpt_dir = dir / "checkpoint";
        if (resume && std::filesystem::exists(ckpt_dir / "meta.json")) {
            if (log) *log << "[train] resuming from " << ckpt_dir.string() << "\n";
            return load_checkpoint(ckpt_dir).model;
        }
        if (log) *log << "[train] " << cfg.train.epochs << " epochs on " << suspect.size() << " samples\n";
        Model init = build_model(cfg.arch, cfg.train.seed);
        auto ckpts = cfg.adaptive ? train_adaptive_attacker(std::move(init), poisoned, cfg.train, *cfg.adaptive, log)
                                  : train(std::move(init), poisoned, cfg.train, log);
        for (const auto& c : ckpts)
            if (c.epoch != cfg.train.epochs) save_checkpoint(c, dir / ("checkpoint-epoch" + std::to_string(c.epoch)));
        save_checkpoint(ckpts.back(), ckpt_dir);
        return ckpts.back().model;
    });

    detail::stage("evaluate", [&] {
        result.clean_accuracy = accuracy(model, data.test);
        const auto triggered = triggered_copy(data.test, cfg.poison.trigger, cfg.poison.target_label);
        result.attack_success_rate = attack_success_rate(model, triggered, cfg.poison.target_label);
        if (log)
            *log << "[evaluate] clean accuracy " << result.clean_accuracy << ", attack success "
                 << result.attack_success_rate << "\n";
        return 0;
    });

    result.selection = detail::stage("select", [&] {
        auto sel = select_dropout_rate(model, suspect, data.clean_val, cfg.selection, cfg.detection.dropout, log);
        nlohmann::json points = nlohmann::json::array();
        for (const auto& pt : sel.points)
            points.push_back({{"p", pt.p}, {"sigma_train", pt.sigma_train}, {"sigma_val", pt.sigma_val}});
        io::write_json(dir / "selection.json", {{"p", sel.p},
                                                {"fallback", sel.fallback},
                                                {"sigma_target", cfg.selection.sigma_target},
                                                {"k_select", cfg.selection.k_select},
                                                {"points", points}});
        if (log) *log << "[select] p = " << sel.p << (sel.fallback ? " (fallback)" : "") << "\n";
        return sel;
    });

    DetectionConfig dcfg = cfg.detection;
    dcfg.dropout.p = result.selection.p;

    const auto clean_pos = poisoned.positions(false);
    const auto backdoor_pos = poisoned.positions(true);

    if (cfg.emit_curves) {
        result.curves = detail::stage("curves", [&] {
            CurveData curves;
            const int k = cfg.selection.k_select;
            for (std::size_t i = 0; i < result.selection.points.size(); ++i) {
                CurveRow row;
                row.p = result.selection.points[i].p;
                row.sigma_clean_train = detail::subset_sigma(result.selection.train_stats[i], clean_pos, k);
                row.sigma_clean_val = result.selection.points[i].sigma_val;
                row.sigma_backdoor = detail::subset_sigma(result.selection.train_stats[i], backdoor_pos, k);
                curves.rows.push_back(row);
            }
            curves.selected_p = result.selection.p;
            DropoutConfig at = dcfg.dropout;
            at.k = k;
            const Dataset clean_subset = suspect.subset(clean_pos);
            curves.histograms.emplace_back("clean_train", shift_ratio(model, clean_subset, at));
            curves.histograms.emplace_back("clean_val", shift_ratio(model, data.clean_val, at));
            if (!backdoor_pos.empty())
                curves.histograms.emplace_back("backdoor", shift_ratio(model, suspect.subset(backdoor_pos), at));
            write_curves(curves, dir);
            return curves;
        });
    }

    for (const auto& name : cfg.detectors) {
        auto outcome = detail::stage("detect:" + name, [&] {
            DetectionReport rep;
            if (name == "psbd") {
                std::vector<PredictionRecord> records;
                rep = psbd_detect(model, suspect, data.clean_val, dcfg, &records);
                write_statistics_csv(dir / "statistics.csv", records, poisoned.backdoor_mask);
                std::vector<double> clean_psu, backdoor_psu;
                for (std::size_t i = 0; i < rep.scores.size(); ++i)
                    (poisoned.backdoor_mask[i] ? backdoor_psu : clean_psu).push_back(rep.scores[i]);
                for (const auto& w : emit_psu_summary({{"clean_train", clean_psu},
                                                       {"clean_val", rep.validation_scores},
                                                       {"backdoor", backdoor_psu}},
                                                      dir / "psu_summary.csv"))
                    if (log) *log << "[report] warning: " << w << "\n";
            } else if (name == "mc_dropout") {
                rep = mc_dropout_detect(model, suspect, data.clean_val, dcfg);
            } else if (name == "strip") {
                rep = strip_detect(model, suspect, data.clean_val, dcfg.strip_blend_count, dcfg.strip_blend_alpha,
                                   combine_seed(dcfg.seed, 1), dcfg.threshold_percentile);
            } else if (name == "scp") {
                rep = scp_detect(model, suspect, data.clean_val, dcfg.scp_factors, dcfg.threshold_percentile);
            } else {
                rep = spectral_signature_detect(model, suspect, dcfg.removal_fraction);
            }
            return rep;
        });
        auto metrics = detail::stage("report", [&] {
            const auto m = compute_metrics(outcome, poisoned);
            const auto ddir = dir / "detectors" / name;
            save_report(outcome, ddir, poisoned.backdoor_mask);
            io::write_json(ddir / "metrics.json", metrics_json(m, outcome, cfg.attack_label(), cfg.poison.poison_ratio));
            return m;
        });
        if (log) {
            auto show = [](const std::optional<double>& v) { return v ? io::fmt(*v) : std::string("n/a"); };
            *log << "[detect] " << name << ": tpr " << show(metrics.tpr) << " fpr " << show(metrics.fpr) << " auroc "
                 << show(metrics.auroc) << "\n";
        }
        result.detectors.emplace(name, DetectorOutcome{std::move(outcome), metrics});
    }

    detail::stage("report", [&] {
        nlohmann::json det = nlohmann::json::object();
        for (const auto& [name, o] : result.detectors)
            det[name] = metrics_json(o.metrics, o.report, cfg.attack_label(), cfg.poison.poison_ratio);
        io::write_json(dir / "summary.json", {{"run", cfg.run_name()},
                                              {"attack", cfg.attack_label()},
                                              {"clean_accuracy", result.clean_accuracy},
                                              {"attack_success_rate", result.attack_success_rate},
                                              {"selected_p", result.selection.p},
                                              {"selection_fallback", result.selection.fallback},
                                              {"detectors", det}});
        return 0;
    });
    return result;
}

// ---------------------------------------------------------------------------
// Suites

struct SuiteRow {
    std::string config;
    std::string attack;
    std::string detector;
    std::optional<MetricSet> metrics;
    std::string error; ///< "error:<stage>" when the run failed
};

inline std::string suite_csv(const std::vector<SuiteRow>& rows) {
    std::ostringstream os;
    os << "config,attack,detector,tpr,fpr,auroc\n";
    auto cell = [](const std::optional<double>& v) { return v ? io::fmt(*v) : std::string(); };
    for (const auto& r : rows) {
        os << r.config << ',' << r.attack << ',' << r.detector << ',';
        if (r.metrics) os << cell(r.metrics->tpr) << ',' << cell(r.metrics->fpr) << ',' << cell(r.metrics->auroc);
        else os << r.error << ',' << r.error << ',' << r.error;
        os << '\n';
    }
    return os.str();
}

/// Runs every config (failures recorded per cell, the suite continues) and
/// writes an attack x detector table.
inline std::vector<SuiteRow> run_suite(const std::vector<ExperimentConfig>& configs,
                                       const std::filesystem::path& table_path, std::ostream* log = nullptr,
                                       bool resume = false) {
    require(!configs.empty(), "suite needs at least one config");
    std::vector<SuiteRow> rows;
    for (const auto& cfg : configs) {
        try {
            const auto res = run_experiment(cfg, log, resume);
            for (const auto& name : cfg.detectors)
                rows.push_back({cfg.name, cfg.attack_label(), name, res.detectors.at(name).metrics, {}});
        } catch (const StageError& e) {
            if (log) *log << "[suite] " << cfg.name << " failed: " << e.what() << "\n";
            for (const auto& name : cfg.detectors)
                rows.push_back({cfg.name, cfg.attack_label(), name, std::nullopt, "error:" + e.stage()});
        }
    }
    io::write_text(table_path, suite_csv(rows));
    return rows;
}

} // namespace psbd
