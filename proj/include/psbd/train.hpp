#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psbd/attacks.hpp"
#include "psbd/common.hpp"
#include "psbd/data.hpp"
#include "psbd/nets.hpp"
#include "psbd/rng.hpp"

namespace psbd {

struct TrainConfig {
    int epochs = 20;
    double learning_rate = 0.05;
    std::vector<int> decay_epochs{10, 15}; ///< 0-based epoch at which the rate is multiplied
    double decay_factor = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int batch_size = 64;
    bool augmentation = false; ///< random crop (pad 4) + horizontal flip
    bool normalization = false;
    std::uint64_t seed = 0;
    std::vector<int> checkpoint_epochs; ///< 1-based epochs to keep besides the final one

    void validate() const {
        require(epochs >= 1, "epochs must be >= 1");
        require(learning_rate > 0.0, "learning_rate must be > 0");
        require(decay_factor > 0.0, "decay_factor must be > 0");
        require(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0, 1)");
        require(weight_decay >= 0.0, "weight_decay must be >= 0");
        require(batch_size >= 1, "batch_size must be >= 1");
    }

    double rate_at(int epoch) const {
        double lr = learning_rate;
        for (int d : decay_epochs)
            if (epoch >= d) lr *= decay_factor;
        return lr;
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"epochs", c.epochs},
         {"learning_rate", c.learning_rate},
         {"decay_epochs", c.decay_epochs},
         {"decay_factor", c.decay_factor},
         {"momentum", c.momentum},
         {"weight_decay", c.weight_decay},
         {"batch_size", c.batch_size},
         {"augmentation", c.augmentation},
         {"normalization", c.normalization},
         {"seed", c.seed},
         {"checkpoint_epochs", c.checkpoint_epochs}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c = TrainConfig{};
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.decay_epochs = j.value("decay_epochs", c.decay_epochs);
    c.decay_factor = j.value("decay_factor", c.decay_factor);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.augmentation = j.value("augmentation", c.augmentation);
    c.normalization = j.value("normalization", c.normalization);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_epochs = j.value("checkpoint_epochs", c.checkpoint_epochs);
}

struct AdaptiveAttackConfig {
    double alpha = 0.5;
    int ada_interval = 50;
    DropoutConfig psu_config{0.5, 3, 0, true, true};

    void validate() const {
        require(alpha >= 0.0 && alpha <= 1.0, "alpha must lie in [0, 1]");
        require(ada_interval >= 1, "ada_interval must be >= 1");
        psu_config.validate();
    }
};

inline void to_json(nlohmann::json& j, const AdaptiveAttackConfig& a) {
    j = {{"alpha", a.alpha}, {"ada_interval", a.ada_interval}, {"psu_config", a.psu_config}};
}

inline void from_json(const nlohmann::json& j, AdaptiveAttackConfig& a) {
    a = AdaptiveAttackConfig{};
    a.alpha = j.value("alpha", a.alpha);
    a.ada_interval = j.value("ada_interval", a.ada_interval);
    if (j.contains("psu_config")) a.psu_config = j["psu_config"].get<DropoutConfig>();
}

namespace detail {

inline void augment_in_place(Model::Act& x, Rng& rng) {
    const int side = x.h;
    const int hw = side * side;
    std::vector<float> tmp(static_cast<std::size_t>(hw));
    for (int n = 0; n < x.n; ++n) {
        const int dy = static_cast<int>(rng.below(9)) - 4;
        const int dx = static_cast<int>(rng.below(9)) - 4;
        const bool flip = rng.below(2) == 1;
        for (int c = 0; c < 3; ++c) {
            float* img = x.data.row(c).data() + static_cast<std::ptrdiff_t>(n) * hw;
            for (int y = 0; y < side; ++y) {
                for (int xx = 0; xx < side; ++xx) {
                    const int sy = y + dy;
                    const int sx0 = flip ? side - 1 - xx : xx;
                    const int sx = sx0 + dx;
                    tmp[y * side + xx] = (sy >= 0 && sy < side && sx >= 0 && sx < side) ? img[sy * side + sx] : 0.0f;
                }
            }
            std::copy(tmp.begin(), tmp.end(), img);
        }
    }
}

/// d/dlogits of P_c for each row, with c the argmax of that row, scaled by `w`.
inline Model::Mat confidence_grad(const Model::Probabilities& probs, double w) {
    Model::Mat d(probs.rows(), probs.cols());
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        Eigen::Index c;
        probs.row(i).maxCoeff(&c);
        const double pc = probs(i, c);
        for (Eigen::Index j = 0; j < probs.cols(); ++j)
            d(i, j) = static_cast<float>(w * pc * ((j == c ? 1.0 : 0.0) - probs(i, j)));
    }
    return d;
}

inline std::vector<ModelCheckpoint> train_impl(Model model, const Dataset& data, const TrainConfig& cfg,
                                               const AdaptiveAttackConfig* ada, std::ostream* log) {
    cfg.validate();
    if (ada) ada->validate();
    require(data.class_count() == model.class_count(), "dataset class count does not match the model");
    require(data.side() == model.arch().input_side, "dataset geometry does not match the model");

    if (cfg.normalization) {
        std::array<double, 3> mean{}, sq{};
        const double per = static_cast<double>(data.side()) * data.side();
        for (const auto& item : data)
            for (int c = 0; c < 3; ++c)
                for (int k = 0; k < static_cast<int>(per); ++k) {
                    const double v = item.pixels[static_cast<std::size_t>(c * per + k)];
                    mean[c] += v;
                    sq[c] += v * v;
                }
        std::array<double, 3> stddev{};
        const double total = per * static_cast<double>(data.size());
        for (int c = 0; c < 3; ++c) {
            mean[c] /= total;
            stddev[c] = std::sqrt(std::max(sq[c] / total - mean[c] * mean[c], 1e-12));
        }
        model.set_input_normalization(mean, stddev);
    }

    Rng rng(cfg.seed);
    Model grads = model.zeros_like();
    Model velocity = model.zeros_like();
    const bool adaptive = ada && ada->alpha > 0.0;
    const double alpha = adaptive ? ada->alpha : 0.0;

    std::vector<ModelCheckpoint> out;
    std::vector<std::size_t> order(data.size());
    std::vector<std::size_t> pos;
    std::vector<SampleId> ids;
    std::uint64_t iteration = 0;
    double last_ada = 0.0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.rate_at(epoch);
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            pos.assign(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
            ids.clear();
            for (auto p : pos) ids.push_back(data[p].id);
            auto batch = model.make_batch(data, pos);
            if (cfg.augmentation) augment_in_place(batch, rng);
            const auto n = static_cast<double>(pos.size());

            Model::Tape tape;
            const Model::Mat logits = model.forward(batch, ids, nullptr, BnMode::train, &tape);
            const auto probs = Model::softmax(logits);
            double loss_bd = 0.0;
            Model::Mat dlogits(logits.rows(), logits.cols());
            for (Eigen::Index i = 0; i < probs.rows(); ++i) {
                const int y = data[pos[static_cast<std::size_t>(i)]].label;
                loss_bd -= std::log(std::max(probs(i, y), 1e-300));
                for (Eigen::Index j = 0; j < probs.cols(); ++j)
                    dlogits(i, j) = static_cast<float>((probs(i, j) - (j == y ? 1.0 : 0.0)) / n * (1.0 - alpha));
            }
            loss_bd /= n;

            grads.visit([](const std::string&, float* d, std::size_t len, Model::TensorKind) {
                std::fill(d, d + len, 0.0f);
            });

            if (adaptive && iteration % static_cast<std::uint64_t>(ada->ada_interval) == 0) {
                // L_ada = mean_n [P_c(x_n) - mean_i P_c(x_n; mask_i)], c = base argmax.
                dlogits += confidence_grad(probs, alpha / n);
                std::vector<Eigen::Index> base_class(static_cast<std::size_t>(probs.rows()));
                double ada_value = 0.0;
                for (Eigen::Index i = 0; i < probs.rows(); ++i) {
                    probs.row(i).maxCoeff(&base_class[static_cast<std::size_t>(i)]);
                    ada_value += probs(i, base_class[static_cast<std::size_t>(i)]);
                }
                DropoutConfig dc = ada->psu_config;
                dc.seed = combine_seed(ada->psu_config.seed, iteration);
                for (int pass = 0; pass < dc.k; ++pass) {
                    const auto masks = dc.pass(pass);
                    Model::Tape dtape;
                    const auto dprobs = Model::softmax(model.forward(batch, ids, &masks, BnMode::train_frozen, &dtape));
                    Model::Mat d(dprobs.rows(), dprobs.cols());
                    const double w = -alpha / (n * dc.k);
                    for (Eigen::Index i = 0; i < dprobs.rows(); ++i) {
                        const Eigen::Index c = base_class[static_cast<std::size_t>(i)];
                        const double pc = dprobs(i, c);
                        ada_value -= pc / dc.k;
                        for (Eigen::Index j = 0; j < dprobs.cols(); ++j)
                            d(i, j) = static_cast<float>(w * pc * ((j == c ? 1.0 : 0.0) - dprobs(i, j)));
                    }
                    model.backward(dtape, d, grads);
                }
                last_ada = ada_value / n;
            }
            model.backward(tape, dlogits, grads);

            const double loss = (1.0 - alpha) * loss_bd + alpha * last_ada;
            if (!std::isfinite(loss)) throw TrainingError(epoch + 1, "non-finite training loss");

            // SGD with momentum; weight decay folded into the gradient.
            std::vector<std::pair<float*, std::size_t>> gbufs, vbufs;
            grads.visit([&](const std::string&, float* d, std::size_t len, Model::TensorKind kind) {
                if (kind == Model::TensorKind::parameter) gbufs.emplace_back(d, len);
            });
            velocity.visit([&](const std::string&, float* d, std::size_t len, Model::TensorKind kind) {
                if (kind == Model::TensorKind::parameter) vbufs.emplace_back(d, len);
            });
            std::size_t t = 0;
            const auto wd = static_cast<float>(cfg.weight_decay);
            const auto mu = static_cast<float>(cfg.momentum);
            const auto step = static_cast<float>(lr);
            model.visit([&](const std::string&, float* w, std::size_t len, Model::TensorKind kind) {
                if (kind != Model::TensorKind::parameter) return;
                float* g = gbufs[t].first;
                float* v = vbufs[t].first;
                ++t;
                for (std::size_t i = 0; i < len; ++i) {
                    const float gi = g[i] + wd * w[i];
                    v[i] = mu * v[i] + gi;
                    w[i] -= step * v[i];
                }
            });
            loss_sum += loss * n;
            seen += pos.size();
            ++iteration;
        }
        if (!model.all_finite()) throw TrainingError(epoch + 1, "non-finite parameters");
        if (log) *log << "epoch " << (epoch + 1) << "/" << cfg.epochs << " lr " << lr << " loss " << loss_sum / seen << "\n";
        const bool keep = epoch + 1 == cfg.epochs ||
                          std::find(cfg.checkpoint_epochs.begin(), cfg.checkpoint_epochs.end(), epoch + 1) !=
                              cfg.checkpoint_epochs.end();
        if (keep) out.push_back(ModelCheckpoint{model, epoch + 1, cfg.seed});
    }
    return out;
}

} // namespace detail

/// Cross-entropy SGD without dropout. Returns checkpoints at the configured
/// epochs plus the final one (always last).
inline std::vector<ModelCheckpoint> train(Model model, const Dataset& data, const TrainConfig& cfg,
                                          std::ostream* log = nullptr) {
    return detail::train_impl(std::move(model), data, cfg, nullptr, log);
}

inline std::vector<ModelCheckpoint> train(Model model, const PoisonedDataset& data, const TrainConfig& cfg,
                                          std::ostream* log = nullptr) {
    return train(std::move(model), data.dataset, cfg, log);
}

/// Training against a PSU-aware defender: the loss mixes cross-entropy with
/// the batch-mean PSU, refreshed every `ada_interval` iterations.
inline std::vector<ModelCheckpoint> train_adaptive_attacker(Model model, const PoisonedDataset& data,
                                                            const TrainConfig& cfg, const AdaptiveAttackConfig& ada,
                                                            std::ostream* log = nullptr) {
    return detail::train_impl(std::move(model), data.dataset, cfg, &ada, log);
}

} // namespace psbd
