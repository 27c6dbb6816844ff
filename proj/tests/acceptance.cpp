// Acceptance harness: runs the bundled desk configs and prints one PASS/FAIL
// line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "psbd/experiment.hpp"
#include "psbd/io.hpp"
#include "toy.hpp"

using namespace psbd;
namespace fs = std::filesystem;

namespace tol {
constexpr double asr_min = 0.95;
constexpr double clean_acc_min = 0.85;
constexpr double badnets_tpr_min = 0.90;
constexpr double badnets_fpr_max = 0.30;
constexpr double runtime_max_s = 15 * 60;
constexpr double other_tpr_min = 0.85;
constexpr double curve_slack = 0.05;
constexpr int curve_k = 16;
constexpr double backdoor_sigma_max = 0.2;
constexpr double val_sigma_min = 0.8;
constexpr double intensity_min = 0.5;
constexpr double oracle_tol = 0.02;
constexpr int oracle_k = 4096;
constexpr double row_sum_tol = 1e-5;
constexpr double grad_rel_tol = 1e-3;
constexpr double quartile_expected = 0.175;
constexpr double adaptive_asr_min = 0.85;
constexpr double adaptive_tpr_min = 0.85;
constexpr double auroc_min = 0.90;
} // namespace tol

namespace {

struct Run {
    ExperimentConfig cfg;
    ExperimentResult result;
    double seconds = 0.0;
};

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string num(double v) {
    std::ostringstream os;
    os.precision(4);
    os << v;
    return os.str();
}

std::string num(const std::optional<double>& v) { return v ? num(*v) : "n/a"; }

class Harness {
public:
    Harness(fs::path work, fs::path configs) : work_(std::move(work)), configs_(std::move(configs)) {}

    const Run& run(const std::string& name, const std::string& subdir = "") {
        const std::string key = name + "/" + subdir;
        if (auto it = runs_.find(key); it != runs_.end()) return it->second;
        Run r;
        r.cfg = load_experiment_config(configs_ / (name + ".json"));
        r.cfg.output_dir = (work_ / (subdir.empty() ? "runs" : subdir)).string();
        std::cerr << "== " << name << (subdir.empty() ? "" : " (" + subdir + ")") << "\n";
        const auto start = std::chrono::steady_clock::now();
        r.result = run_experiment(r.cfg, &std::cerr);
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::cerr << "== " << name << " finished in " << num(r.seconds) << " s\n";
        return runs_.emplace(key, std::move(r)).first->second;
    }

    Model model(const Run& r) const { return load_checkpoint(r.result.run_dir / "checkpoint").model; }

    ExperimentData data(const Run& r) const { return make_experiment_data(r.cfg.data, r.cfg.seed); }

private:
    fs::path work_, configs_;
    std::map<std::string, Run> runs_;
};

const DetectorOutcome& detector(const Run& r, const std::string& name) {
    const auto it = r.result.detectors.find(name);
    if (it == r.result.detectors.end()) throw std::runtime_error(r.cfg.name + " has no " + name + " detector");
    return it->second;
}

std::size_t selected_row(const Run& r) {
    const auto& pts = r.result.selection.points;
    for (std::size_t i = 0; i < pts.size(); ++i)
        if (pts[i].p == r.result.selection.p) return i;
    throw std::runtime_error("selected p missing from the grid");
}

// ---------------------------------------------------------------------------

Verdict desk_badnets(Harness& h) {
    const auto& r = h.run("badnets_desk");
    const auto& psbd = detector(r, "psbd").metrics;
    const auto data = h.data(r);
    const bool sizes = data.clean_train.size() == 5000 &&
                       static_cast<std::size_t>(r.cfg.data.val_pool_per_class * r.cfg.data.class_count) == 1000;
    const bool ok = sizes && r.cfg.train.epochs >= 20 && r.cfg.poison.poison_ratio == 0.1 &&
                    r.result.attack_success_rate >= tol::asr_min && r.result.clean_accuracy >= tol::clean_acc_min &&
                    psbd.tpr && *psbd.tpr >= tol::badnets_tpr_min && psbd.fpr && *psbd.fpr <= tol::badnets_fpr_max &&
                    r.seconds <= tol::runtime_max_s;
    return {ok, "asr " + num(r.result.attack_success_rate) + ", clean acc " + num(r.result.clean_accuracy) + ", tpr " +
                    num(psbd.tpr) + ", fpr " + num(psbd.fpr) + ", " + num(r.seconds) + " s"};
}

Verdict other_attacks(Harness& h) {
    const std::vector<std::string> names{"badnets_desk", "blend_desk", "warp_desk"};
    double psbd_sum = 0.0, mc_sum = 0.0;
    bool ok = true;
    std::string detail;
    for (const auto& name : names) {
        const auto& r = h.run(name);
        const auto& p = detector(r, "psbd").metrics;
        const auto& m = detector(r, "mc_dropout").metrics;
        psbd_sum += p.tpr.value_or(0.0);
        mc_sum += m.tpr.value_or(0.0);
        if (name != "badnets_desk") ok = ok && p.tpr && *p.tpr >= tol::other_tpr_min;
        detail += name + " psbd " + num(p.tpr) + " mc " + num(m.tpr) + " (asr " +
                  num(r.result.attack_success_rate) + "); ";
    }
    ok = ok && psbd_sum > mc_sum;
    return {ok, detail + "mean psbd " + num(psbd_sum / 3) + " vs mc " + num(mc_sum / 3)};
}

Verdict shift_curves_property(Harness& h) {
    const auto& benign = h.run("benign_desk");
    bool ok = benign.cfg.selection.k_select == tol::curve_k;
    const auto& pts = benign.result.selection.points;
    double worst_drop = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (std::size_t j = i + 1; j < pts.size(); ++j)
            worst_drop = std::max(worst_drop, pts[i].sigma_val - pts[j].sigma_val);
    ok = ok && worst_drop <= tol::curve_slack;

    const auto& bad = h.run("badnets_desk");
    const auto& row = bad.result.curves.value().rows.at(selected_row(bad));
    const double sb = row.sigma_backdoor.value_or(1.0);
    const double sv = row.sigma_clean_val.value_or(0.0);
    ok = ok && sb < tol::backdoor_sigma_max && sv >= tol::val_sigma_min;
    return {ok, "benign worst drop " + num(worst_drop) + " at k " + std::to_string(benign.cfg.selection.k_select) +
                    "; badnets p " + num(bad.result.selection.p) + " sigma_backdoor " + num(sb) + " sigma_val " +
                    num(sv)};
}

Verdict shift_destination(Harness& h) {
    const auto& r = h.run("badnets_desk");
    for (const auto& [name, st] : r.result.curves.value().histograms) {
        if (name != "clean_val") continue;
        const auto modal = static_cast<int>(std::max_element(st.destinations.begin(), st.destinations.end()) -
                                            st.destinations.begin());
        const double intensity = st.intensity(r.cfg.poison.target_label);
        return {modal == r.cfg.poison.target_label && intensity >= tol::intensity_min,
                "modal class " + std::to_string(modal) + ", target intensity " + num(intensity) + " over " +
                    std::to_string(st.total_shifts) + " shifts"};
    }
    return {false, "no clean validation histogram"};
}

Verdict oracle_equivalence() {
    using namespace psbd::testing;
    const auto net = toy_net(toy_arch({2, 3}, 3, 4), 31);
    const auto sizes = net.site_sizes();
    const int units = std::accumulate(sizes.begin(), sizes.end(), 0);
    const auto data = random_images(24, 3, 4, 32);
    double worst_sigma = 0.0, worst_psu = 0.0, worst_mc = 0.0;
    for (const auto& [p, rescale] : std::vector<std::pair<double, bool>>{{0.3, false}, {0.5, false}, {0.5, true}, {0.8, false}}) {
        const auto exact = enumerate_masks(net, data, p, rescale);
        const auto recs = collect_predictions(net, data, DropoutConfig{p, tol::oracle_k, 5, rescale, true});
        worst_sigma = std::max(worst_sigma, std::abs(shift_ratio(recs, 3).sigma - exact.sigma));
        const auto scores = psu(recs);
        const auto mc = mc_dropout_uncertainty(recs);
        for (std::size_t i = 0; i < data.size(); ++i) {
            worst_psu = std::max(worst_psu, std::abs(scores[i] - exact.expected_psu[i]));
            worst_mc = std::max(worst_mc, std::abs(mc[i] - exact.mc_std[i]));
        }
    }
    const bool ok = units <= 20 && worst_sigma <= tol::oracle_tol && worst_psu <= tol::oracle_tol &&
                    worst_mc <= tol::oracle_tol;
    return {ok, std::to_string(units) + " units; max |dsigma| " + num(worst_sigma) + ", |dpsu| " + num(worst_psu) +
                    ", |dstd| " + num(worst_mc)};
}

double toy_gradient_error() {
    using namespace psbd::testing;
    auto net = toy_net(toy_arch({2, 3}, 3, 6), 11);
    const auto data = random_images(4, 3, 6, 12);
    const auto masks = DropoutConfig{0.4, 1, 3}.pass(0);
    std::vector<std::size_t> pos{0, 1, 2, 3};
    std::vector<SampleId> ids;
    for (const auto& x : data) ids.push_back(x.id);
    auto loss = [&](ToyNet& n, ToyNet::Tape* tape) {
        const auto logits = n.forward(n.make_batch(data, pos), ids, &masks, BnMode::train_frozen, tape);
        return ToyNet::softmax(logits);
    };
    auto ce = [&](const ConfidenceMatrix& probs) {
        double l = 0.0;
        for (Eigen::Index i = 0; i < probs.rows(); ++i) l -= std::log(probs(i, data[static_cast<std::size_t>(i)].label));
        return l / static_cast<double>(probs.rows());
    };
    ToyNet::Tape tape;
    const auto probs = loss(net, &tape);
    ToyNet::Mat d = probs;
    for (Eigen::Index i = 0; i < d.rows(); ++i) d(i, data[static_cast<std::size_t>(i)].label) -= 1.0;
    d /= static_cast<double>(d.rows());
    ToyNet grads = net.zeros_like();
    net.backward(tape, d, grads);
    std::vector<std::pair<double*, std::size_t>> params, gvals;
    net.visit([&](const std::string&, double* p, std::size_t n, ToyNet::TensorKind k) {
        if (k == ToyNet::TensorKind::parameter) params.emplace_back(p, n);
    });
    grads.visit([&](const std::string&, double* p, std::size_t n, ToyNet::TensorKind k) {
        if (k == ToyNet::TensorKind::parameter) gvals.emplace_back(p, n);
    });
    double worst = 0.0;
    for (std::size_t t = 0; t < params.size(); ++t)
        for (std::size_t i = 0; i < params[t].second; ++i) {
            double& w = params[t].first[i];
            const double saved = w;
            w = saved + 1e-6;
            const double up = ce(loss(net, nullptr));
            w = saved - 1e-6;
            const double down = ce(loss(net, nullptr));
            w = saved;
            const double numeric = (up - down) / 2e-6;
            const double analytic = gvals[t].first[i];
            worst = std::max(worst, std::abs(numeric - analytic) / std::max(std::abs(numeric) + std::abs(analytic), 1e-6));
        }
    return worst;
}

Verdict analytic_identities(Harness& h) {
    const auto& r = h.run("badnets_desk");
    const Model model = h.model(r);
    const auto data = h.data(r);
    const Dataset& probe = data.clean_val;
    DropoutConfig zero = r.cfg.resolved().detection.dropout;
    zero.p = 0.0;
    const auto recs = collect_predictions(model, probe, zero);
    const double sigma0 = shift_ratio(recs, model.class_count()).sigma;
    const auto psu0 = psu(recs);
    const bool zero_exact = sigma0 == 0.0 && std::all_of(psu0.begin(), psu0.end(), [](double v) { return v == 0.0; });

    double worst_sum = 0.0;
    for (double p : {0.0, 0.5, 0.9, 1.0}) {
        DropoutConfig c = zero;
        c.p = p;
        const auto masks = c.pass(0);
        const ConfidenceMatrix probs = model.confidences(probe, &masks);
        for (Eigen::Index i = 0; i < probs.rows(); ++i) worst_sum = std::max(worst_sum, std::abs(probs.row(i).sum() - 1.0));
    }

    const double grad = toy_gradient_error();

    bool metrics_ok = true;
    for (const auto& [name, o] : r.result.detectors) {
        const auto& m = o.metrics;
        const double fnr = static_cast<double>(m.fn) / static_cast<double>(m.tp + m.fn);
        metrics_ok = metrics_ok && m.tpr && *m.tpr + fnr == 1.0;
    }
    DetectionReport perfect;
    perfect.orientation = Orientation::higher_is_suspicious;
    perfect.ids = {0, 1, 2, 3};
    perfect.scores = {0.9, 0.8, 0.1, 0.2};
    perfect.flags = {1, 1, 0, 0};
    metrics_ok = metrics_ok && compute_metrics(perfect, perfect.ids, {1, 1, 0, 0}).auroc == 1.0;

    const bool ok = zero_exact && worst_sum <= tol::row_sum_tol && grad <= tol::grad_rel_tol && metrics_ok;
    return {ok, std::string("p=0 exact ") + (zero_exact ? "yes" : "no") + ", max |row sum - 1| " + num(worst_sum) +
                    ", grad rel err " + num(grad) + ", metric identities " + (metrics_ok ? "hold" : "broken")};
}

Verdict threshold_suite(Harness& h) {
    const double t = tail_threshold({0.1, 0.2, 0.3, 0.4}, 25.0, Orientation::lower_is_suspicious);
    bool ok = std::abs(t - tol::quartile_expected) <= 1e-12;
    const auto& rep = detector(h.run("badnets_desk"), "psbd").report;
    std::vector<char> prev(rep.scores.size(), 0);
    bool monotone = true;
    for (double q = 1.0; q < 100.0; q += 1.0) {
        const auto flags = apply_threshold(rep.scores, tail_threshold(rep.validation_scores, q, rep.orientation),
                                           rep.orientation);
        for (std::size_t i = 0; i < flags.size(); ++i) monotone = monotone && (!prev[i] || flags[i]);
        prev = flags;
    }
    ok = ok && monotone;
    return {ok, "T " + num(t) + ", flag sets nested over q = 1..99: " + (monotone ? "yes" : "no")};
}

Verdict adaptive(Harness& h) {
    const auto& r = h.run("badnets_adaptive_desk");
    const auto& m = detector(r, "psbd").metrics;
    const bool ok = r.cfg.adaptive && r.cfg.adaptive->alpha == 0.5 && r.cfg.adaptive->ada_interval == 50 &&
                    r.result.attack_success_rate >= tol::adaptive_asr_min && m.tpr && *m.tpr >= tol::adaptive_tpr_min;
    return {ok, "asr " + num(r.result.attack_success_rate) + ", tpr " + num(m.tpr) + ", fpr " + num(m.fpr) + ", p " +
                    num(r.result.selection.p)};
}

std::map<std::string, std::string> artifacts(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const auto name = e.path().filename().string();
        if (name == "metrics.json" || e.path().extension() == ".csv")
            out[fs::relative(e.path(), dir).string()] = io::read_text(e.path());
    }
    return out;
}

Verdict determinism(Harness& h) {
    const auto& first = h.run("badnets_desk");
    const auto& second = h.run("badnets_desk", "rerun");
    const auto a = artifacts(first.result.run_dir);
    const auto b = artifacts(second.result.run_dir);
    std::vector<std::string> differing;
    for (const auto& [name, bytes] : a) {
        const auto it = b.find(name);
        if (it == b.end() || it->second != bytes) differing.push_back(name);
    }
    const bool ok = !a.empty() && a.size() == b.size() && differing.empty();
    std::string detail = std::to_string(a.size()) + " files compared";
    if (!differing.empty()) detail += ", first mismatch " + differing.front();
    return {ok, detail};
}

Verdict desk_auroc(Harness& h) {
    const auto& m = detector(h.run("badnets_desk"), "psbd").metrics;
    return {m.auroc && *m.auroc >= tol::auroc_min, "auroc " + num(m.auroc)};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk acceptance checks"};
    fs::path work = "acceptance-runs", configs = "configs";
    std::vector<int> only;
    app.add_option("--work-dir", work, "Directory for run artifacts");
    app.add_option("--configs", configs, "Directory holding the bundled configs")->check(CLI::ExistingDirectory);
    app.add_option("--only", only, "Criteria to evaluate (default: all)")->delimiter(',');
    CLI11_PARSE(app, argc, argv);

    fs::remove_all(work);
    Harness h(work, configs);
    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
        {"desk badnets end-to-end", [&] { return desk_badnets(h); }},
        {"blend and warp vs MC-Dropout", [&] { return other_attacks(h); }},
        {"shift-ratio curves", [&] { return shift_curves_property(h); }},
        {"shift destination", [&] { return shift_destination(h); }},
        {"mask enumeration oracle", [] { return oracle_equivalence(); }},
        {"analytic identities", [&] { return analytic_identities(h); }},
        {"threshold percentile", [&] { return threshold_suite(h); }},
        {"adaptive attacker", [&] { return adaptive(h); }},
        {"determinism", [&] { return determinism(h); }},
        {"desk AUROC", [&] { return desk_auroc(h); }},
    };
    std::vector<std::string> lines;
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, std::string("error: ") + e.what()};
        }
        failed += !v.pass;
        std::ostringstream line;
        line << "criterion " << id << " [" << criteria[i].first << "]: " << (v.pass ? "PASS" : "FAIL") << " (" << v.detail
             << ")";
        lines.push_back(line.str());
        std::cout << lines.back() << std::endl;
    }
    std::cout << "\nsummary\n";
    for (const auto& l : lines) std::cout << l << "\n";
    return failed == 0 ? 0 : 1;
}
