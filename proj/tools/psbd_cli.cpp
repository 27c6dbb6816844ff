#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "psbd/attacks.hpp"
#include "psbd/data.hpp"
#include "psbd/detect.hpp"
#include "psbd/experiment.hpp"
#include "psbd/io.hpp"
#include "psbd/nets.hpp"
#include "psbd/report.hpp"
#include "psbd/train.hpp"

namespace fs = std::filesystem;
using namespace psbd;

namespace {

struct StageFailure {
    std::string stage;
    std::string what;
};

template <class Fn>
void in_stage(const std::string& stage, Fn&& fn) {
    try {
        fn();
    } catch (const StageError& e) {
        throw StageFailure{e.stage(), e.what()};
    } catch (const std::exception& e) {
        throw StageFailure{stage, e.what()};
    }
}

std::vector<char> truth_for(const Dataset& data, const fs::path& poisoned_dir) {
    if (!fs::exists(poisoned_dir / "poison_meta.json")) return std::vector<char>(data.size(), 0);
    return load_poisoned(poisoned_dir).backdoor_mask;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prediction-shift backdoor detection toolkit"};
    app.require_subcommand(1);

    // synth-data
    auto* synth = app.add_subcommand("synth-data", "Generate a procedural motif dataset");
    std::uint64_t synth_seed = 0;
    int per_class = 500, classes = 10, side = 32;
    std::string split = "train", synth_out;
    SampleId first_id = 0;
    synth->add_option("--seed", synth_seed, "Seed");
    synth->add_option("--per-class", per_class, "Images per class");
    synth->add_option("--classes", classes, "Class count");
    synth->add_option("--side", side, "Image side length");
    synth->add_option("--split", split, "train | clean_validation | test");
    synth->add_option("--first-id", first_id, "Id of the first image");
    synth->add_option("--out", synth_out, "Output directory")->required();

    // poison
    auto* poison = app.add_subcommand("poison", "Poison a dataset with a trigger");
    std::string poison_data, poison_out, kind = "patch";
    PoisonSpec pspec;
    poison->add_option("--data", poison_data, "Clean dataset directory")->required();
    poison->add_option("--out", poison_out, "Output directory")->required();
    poison->add_option("--kind", kind, "patch | blend | warp");
    poison->add_option("--target", pspec.target_label, "Target label");
    poison->add_option("--ratio", pspec.poison_ratio, "Poison ratio");
    poison->add_option("--cover", pspec.cover_ratio, "Cover ratio");
    poison->add_option("--seed", pspec.seed, "Selection seed");
    poison->add_option("--size", pspec.trigger.size, "Patch size");
    poison->add_option("--offset", pspec.trigger.offset, "Patch offset from the corner");
    poison->add_option("--alpha", pspec.trigger.alpha, "Blend alpha");
    poison->add_option("--pattern-seed", pspec.trigger.pattern_seed, "Blend pattern seed");
    poison->add_option("--grid", pspec.trigger.grid, "Warp control grid");
    poison->add_option("--strength", pspec.trigger.strength, "Warp strength (pixels)");
    poison->add_option("--warp-seed", pspec.trigger.warp_seed, "Warp field seed");

    // train
    auto* trn = app.add_subcommand("train", "Train the residual CNN");
    std::string train_data, train_out;
    TrainConfig tcfg;
    ArchSpec arch;
    double ada_alpha = -1.0;
    int ada_interval = 50;
    trn->add_option("--data", train_data, "Training dataset directory")->required();
    trn->add_option("--out", train_out, "Checkpoint directory")->required();
    trn->add_option("--epochs", tcfg.epochs, "Epochs");
    trn->add_option("--learning-rate", tcfg.learning_rate, "Initial learning rate");
    trn->add_option("--decay-epochs", tcfg.decay_epochs, "Epochs at which the rate decays")->delimiter(',');
    trn->add_option("--decay-factor", tcfg.decay_factor, "Decay factor");
    trn->add_option("--momentum", tcfg.momentum, "Momentum");
    trn->add_option("--weight-decay", tcfg.weight_decay, "Weight decay");
    trn->add_option("--batch-size", tcfg.batch_size, "Batch size");
    trn->add_flag("--augmentation", tcfg.augmentation, "Random crop + flip");
    trn->add_flag("--normalization", tcfg.normalization, "Per-channel input standardisation");
    trn->add_option("--seed", tcfg.seed, "Seed");
    trn->add_option("--checkpoint-epochs", tcfg.checkpoint_epochs, "Extra checkpoint epochs")->delimiter(',');
    trn->add_option("--stage-widths", arch.stage_widths, "Channels per stage")->delimiter(',');
    trn->add_option("--blocks-per-stage", arch.blocks_per_stage, "Residual blocks per stage");
    trn->add_option("--adaptive-alpha", ada_alpha, "Adaptive attacker weight (enables adaptive training)");
    trn->add_option("--ada-interval", ada_interval, "Iterations between adaptive-loss evaluations");

    // select-p
    auto* sel = app.add_subcommand("select-p", "Select the dropout rate");
    std::string sel_model, sel_train, sel_val, sel_out;
    SelectionPolicy policy;
    DropoutConfig sel_masks;
    sel->add_option("--model", sel_model, "Checkpoint directory")->required();
    sel->add_option("--train", sel_train, "Suspect training set")->required();
    sel->add_option("--val", sel_val, "Clean validation set")->required();
    sel->add_option("--out", sel_out, "Output JSON")->required();
    sel->add_option("--sigma-target", policy.sigma_target, "Target sigma on validation");
    sel->add_option("--k", policy.k_select, "Dropout passes");
    sel->add_option("--grid", policy.p_grid, "Candidate rates")->delimiter(',');
    sel->add_option("--seed", sel_masks.seed, "Mask seed");
    sel->add_flag("!--no-rescale", sel_masks.rescale, "Keep survivors unscaled");
    sel->add_flag("--per-sample-masks", sel_masks.per_sample, "Draw a separate mask for every sample");

    // detect
    auto* det = app.add_subcommand("detect", "Score a training set with one detector");
    std::string det_model, det_train, det_val, det_out, detector = "psbd";
    DetectionConfig dcfg;
    det->add_option("--model", det_model, "Checkpoint directory")->required();
    det->add_option("--train", det_train, "Suspect training set")->required();
    det->add_option("--val", det_val, "Clean validation set")->required();
    det->add_option("--out", det_out, "Report directory")->required();
    det->add_option("--detector", detector, "psbd | mc_dropout | strip | scp | spectral");
    det->add_option("--p", dcfg.dropout.p, "Dropout rate");
    det->add_option("--k", dcfg.dropout.k, "Dropout passes");
    det->add_option("--seed", dcfg.dropout.seed, "Mask seed");
    det->add_flag("!--no-rescale", dcfg.dropout.rescale, "Keep survivors unscaled");
    det->add_flag("--per-sample-masks", dcfg.dropout.per_sample, "Draw a separate mask for every sample");
    det->add_option("--percentile", dcfg.threshold_percentile, "Threshold percentile");
    det->add_option("--mc-k", dcfg.mc_dropout_k, "MC-Dropout passes");
    det->add_option("--blend-count", dcfg.strip_blend_count, "STRIP blends per sample");
    det->add_option("--blend-alpha", dcfg.strip_blend_alpha, "STRIP blend weight");
    det->add_option("--factors", dcfg.scp_factors, "Amplification factors")->delimiter(',');
    det->add_option("--removal-fraction", dcfg.removal_fraction, "Spectral removal fraction");
    det->add_option("--detector-seed", dcfg.seed, "STRIP partner seed");

    // report
    auto* rep = app.add_subcommand("report", "Score a detection report against ground truth");
    std::string rep_scores, rep_truth, rep_out, rep_attack = "unknown";
    rep->add_option("--report", rep_scores, "Report directory (scores.csv + report.json)")->required();
    rep->add_option("--truth", rep_truth, "Poisoned dataset directory")->required();
    rep->add_option("--out", rep_out, "metrics.json path")->required();
    rep->add_option("--attack", rep_attack, "Attack label");

    // run
    auto* run = app.add_subcommand("run", "Run a full experiment from a config file");
    std::string run_config, run_output;
    std::uint64_t run_seed = 0;
    bool resume = false;
    run->add_option("--config", run_config, "Experiment JSON")->required();
    run->add_option("--output-dir", run_output, "Override output directory");
    auto* seed_opt = run->add_option("--seed", run_seed, "Override global seed");
    run->add_flag("--resume", resume, "Reuse an existing final checkpoint");

    // suite
    auto* suite = app.add_subcommand("suite", "Run several configs and tabulate");
    std::vector<std::string> suite_configs;
    std::string suite_table = "suite.csv", suite_output;
    bool suite_resume = false;
    suite->add_option("--config", suite_configs, "Experiment JSON files")->required();
    suite->add_option("--table", suite_table, "Output CSV");
    suite->add_option("--output-dir", suite_output, "Override output directory");
    suite->add_flag("--resume", suite_resume, "Reuse existing final checkpoints");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) {
            in_stage("synth-data", [&] {
                save_dataset(synth_dataset(synth_seed, per_class, classes, side, split_from_string(split), first_id),
                             synth_out);
            });
        } else if (*poison) {
            in_stage("poison", [&] {
                pspec.trigger.kind = trigger_from_string(kind);
                save_poisoned(poison_dataset(load_dataset(poison_data), pspec), poison_out);
            });
        } else if (*trn) {
            in_stage("train", [&] {
                const auto pd = fs::exists(fs::path(train_data) / "poison_meta.json")
                                    ? load_poisoned(train_data)
                                    : PoisonedDataset{load_dataset(train_data), {}, {}, {}};
                arch.class_count = pd.dataset.class_count();
                arch.input_side = pd.dataset.side();
                Model init = build_model(arch, tcfg.seed);
                std::vector<ModelCheckpoint> ckpts;
                if (ada_alpha >= 0.0) {
                    AdaptiveAttackConfig ada;
                    ada.alpha = ada_alpha;
                    ada.ada_interval = ada_interval;
                    ada.psu_config.seed = combine_seed(tcfg.seed, 1);
                    ckpts = train_adaptive_attacker(std::move(init), pd, tcfg, ada, &std::cerr);
                } else {
                    ckpts = train(std::move(init), pd.dataset, tcfg, &std::cerr);
                }
                for (const auto& c : ckpts)
                    if (c.epoch != tcfg.epochs)
                        save_checkpoint(c, fs::path(train_out) / ("epoch" + std::to_string(c.epoch)));
                save_checkpoint(ckpts.back(), train_out);
            });
        } else if (*sel) {
            in_stage("select-p", [&] {
                const auto model = load_checkpoint(sel_model).model;
                const auto res = select_dropout_rate(model, load_dataset(sel_train), load_dataset(sel_val), policy,
                                                     sel_masks, &std::cerr);
                nlohmann::json points = nlohmann::json::array();
                for (const auto& pt : res.points)
                    points.push_back({{"p", pt.p}, {"sigma_train", pt.sigma_train}, {"sigma_val", pt.sigma_val}});
                io::write_json(sel_out, {{"p", res.p}, {"fallback", res.fallback}, {"points", points}});
                std::cout << res.p << "\n";
            });
        } else if (*det) {
            in_stage("detect", [&] {
                const auto model = load_checkpoint(det_model).model;
                const auto train_set = load_dataset(det_train);
                const auto val_set = load_dataset(det_val);
                DetectionReport r;
                if (detector == "psbd") r = psbd_detect(model, train_set, val_set, dcfg);
                else if (detector == "mc_dropout") r = mc_dropout_detect(model, train_set, val_set, dcfg);
                else if (detector == "strip")
                    r = strip_detect(model, train_set, val_set, dcfg.strip_blend_count, dcfg.strip_blend_alpha, dcfg.seed,
                                     dcfg.threshold_percentile);
                else if (detector == "scp") r = scp_detect(model, train_set, val_set, dcfg.scp_factors, dcfg.threshold_percentile);
                else if (detector == "spectral") r = spectral_signature_detect(model, train_set, dcfg.removal_fraction);
                else throw ParameterError("unknown detector '" + detector + "'");
                save_report(r, det_out, truth_for(train_set, det_train));
                std::cout << r.flagged_count() << " of " << r.ids.size() << " flagged\n";
            });
        } else if (*rep) {
            in_stage("report", [&] {
                const auto meta = io::read_json(fs::path(rep_scores) / "report.json");
                DetectionReport r;
                r.detector = meta.at("detector").get<std::string>();
                r.orientation = meta.at("orientation").get<std::string>() == "higher_is_suspicious"
                                    ? Orientation::higher_is_suspicious
                                    : Orientation::lower_is_suspicious;
                if (!meta.at("p").is_null()) r.p = meta["p"].get<double>();
                if (!meta.at("T").is_null()) r.threshold = meta["T"].get<double>();
                std::istringstream in(io::read_text(fs::path(rep_scores) / "scores.csv"));
                std::string line;
                std::getline(in, line);
                while (std::getline(in, line)) {
                    if (line.empty()) continue;
                    std::istringstream row(line);
                    std::string id, score, flag;
                    std::getline(row, id, ',');
                    std::getline(row, score, ',');
                    std::getline(row, flag, ',');
                    r.ids.push_back(std::stoull(id));
                    r.scores.push_back(std::stod(score));
                    r.flags.push_back(static_cast<char>(std::stoi(flag)));
                }
                const auto pd = load_poisoned(rep_truth);
                const auto m = compute_metrics(r, pd);
                io::write_json(rep_out, metrics_json(m, r, rep_attack, pd.spec.poison_ratio));
                std::cout << io::read_text(rep_out);
            });
        } else if (*run) {
            in_stage("config", [&] {
                auto cfg = load_experiment_config(run_config);
                if (!run_output.empty()) cfg.output_dir = run_output;
                if (*seed_opt) cfg.seed = run_seed;
                const auto res = run_experiment(cfg, &std::cerr, resume);
                std::cout << res.run_dir.string() << "\n";
            });
        } else if (*suite) {
            in_stage("config", [&] {
                std::vector<ExperimentConfig> cfgs;
                for (const auto& path : suite_configs) {
                    cfgs.push_back(load_experiment_config(path));
                    if (!suite_output.empty()) cfgs.back().output_dir = suite_output;
                }
                run_suite(cfgs, suite_table, &std::cerr, suite_resume);
                std::cout << io::read_text(suite_table);
            });
        }
    } catch (const StageFailure& f) {
        std::cerr << "error[" << f.stage << "]: " << f.what << "\n";
        return 2;
    }
    return 0;
}
