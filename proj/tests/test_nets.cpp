#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "psbd/nets.hpp"
#include "psbd/train.hpp"
#include "toy.hpp"

using namespace psbd;
using namespace psbd::testing;
namespace fs = std::filesystem;

namespace {

std::vector<std::size_t> iota_positions(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

std::vector<SampleId> ids_of(const Dataset& d) {
    std::vector<SampleId> ids;
    for (const auto& x : d) ids.push_back(x.id);
    return ids;
}

template <class Scalar>
std::vector<Scalar> flat_params(const ResidualNet<Scalar>& net) {
    std::vector<Scalar> out;
    net.visit([&](const std::string&, const Scalar* d, std::size_t n, auto) { out.insert(out.end(), d, d + n); });
    return out;
}

/// Mean cross-entropy of a batch under fixed BN mode and masks.
double batch_loss(ToyNet& net, const Dataset& data, const MaskSource* masks, BnMode mode) {
    const auto pos = iota_positions(data.size());
    const auto ids = ids_of(data);
    ToyNet::Tape tape;
    const auto logits = net.forward(net.make_batch(data, pos), ids, masks, mode, &tape);
    const auto probs = ToyNet::softmax(logits);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < probs.rows(); ++i) loss -= std::log(probs(i, data[static_cast<std::size_t>(i)].label));
    return loss / static_cast<double>(probs.rows());
}

/// Max relative error between backprop and central differences over every
/// trainable entry.
double gradient_check(ToyNet net, const Dataset& data, const MaskSource* masks, BnMode mode) {
    const auto pos = iota_positions(data.size());
    const auto ids = ids_of(data);
    ToyNet grads = net.zeros_like();
    ToyNet::Tape tape;
    const auto logits = net.forward(net.make_batch(data, pos), ids, masks, mode, &tape);
    const auto probs = ToyNet::softmax(logits);
    ToyNet::Mat d(probs.rows(), probs.cols());
    const double n = static_cast<double>(probs.rows());
    for (Eigen::Index i = 0; i < probs.rows(); ++i)
        for (Eigen::Index j = 0; j < probs.cols(); ++j)
            d(i, j) = (probs(i, j) - (j == data[static_cast<std::size_t>(i)].label ? 1.0 : 0.0)) / n;
    net.backward(tape, d, grads);

    std::vector<std::pair<double*, std::size_t>> params, gvals;
    net.visit([&](const std::string&, double* p, std::size_t len, ToyNet::TensorKind k) {
        if (k == ToyNet::TensorKind::parameter) params.emplace_back(p, len);
    });
    grads.visit([&](const std::string&, double* p, std::size_t len, ToyNet::TensorKind k) {
        if (k == ToyNet::TensorKind::parameter) gvals.emplace_back(p, len);
    });
    const double eps = 1e-6;
    double worst = 0.0;
    for (std::size_t t = 0; t < params.size(); ++t) {
        for (std::size_t i = 0; i < params[t].second; ++i) {
            double& w = params[t].first[i];
            const double saved = w;
            w = saved + eps;
            const double up = batch_loss(net, data, masks, mode);
            w = saved - eps;
            const double down = batch_loss(net, data, masks, mode);
            w = saved;
            const double numeric = (up - down) / (2 * eps);
            const double analytic = gvals[t].first[i];
            const double rel = std::abs(numeric - analytic) / std::max(std::abs(numeric) + std::abs(analytic), 1e-6);
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

Dataset small_synth(int side = 16, int per_class = 6, int classes = 3) {
    return synth_dataset(5, per_class, classes, side);
}

ArchSpec small_arch(int side = 16, int classes = 3) {
    ArchSpec a;
    a.stage_widths = {4, 8};
    a.class_count = classes;
    a.input_side = side;
    return a;
}

} // namespace

TEST(Arch, DropoutSitesFollowBlocks) {
    ArchSpec a;
    EXPECT_EQ(a.dropout_site_count(), 3);
    EXPECT_EQ(build_model(a, 1).dropout_site_count(), 3);
    a.blocks_per_stage = 2;
    EXPECT_EQ(a.dropout_site_count(), 6);
    EXPECT_EQ(build_model(a, 1).site_sizes().size(), 6u);
}

TEST(Arch, Validation) {
    ArchSpec a;
    a.stage_widths = {};
    EXPECT_THROW(build_model(a, 1), ParameterError);
    a.stage_widths = {16, 0};
    EXPECT_THROW(build_model(a, 1), ParameterError);
}

TEST(Build, SameSeedSameParameters) {
    const auto a = build_model(ArchSpec{}, 3);
    const auto b = build_model(ArchSpec{}, 3);
    const auto c = build_model(ArchSpec{}, 4);
    EXPECT_EQ(flat_params(a), flat_params(b));
    EXPECT_NE(flat_params(a), flat_params(c));
}

TEST(Build, DesiredSiteSizes) {
    const auto sizes = build_model(ArchSpec{}, 1).site_sizes();
    ASSERT_EQ(sizes.size(), 3u);
    EXPECT_EQ(sizes[0], 16 * 16 * 16);
    EXPECT_EQ(sizes[1], 32 * 8 * 8);
    EXPECT_EQ(sizes[2], 64 * 4 * 4);
}

TEST(Forward, ConfidenceRowsAreDistributions) {
    const auto data = synth_dataset(1, 3, 10, 32);
    const auto m = build_model(ArchSpec{}, 2);
    for (const DropoutConfig& cfg : {DropoutConfig{0.0, 1, 1}, DropoutConfig{0.6, 1, 1}, DropoutConfig{1.0, 1, 1}}) {
        const auto masks = cfg.pass(0);
        const auto probs = m.confidences(data, &masks);
        for (Eigen::Index i = 0; i < probs.rows(); ++i) {
            EXPECT_NEAR(probs.row(i).sum(), 1.0, 1e-5);
            EXPECT_GE(probs.row(i).minCoeff(), 0.0);
        }
    }
}

TEST(Forward, ZeroRateReproducesVanillaExactly) {
    const auto data = synth_dataset(1, 3, 10, 32);
    const auto m = build_model(ArchSpec{}, 2);
    const auto masks = DropoutConfig{0.0, 1, 9}.pass(0);
    const auto a = m.confidences(data, nullptr);
    const auto b = m.confidences(data, &masks);
    EXPECT_TRUE((a.array() == b.array()).all());
}

TEST(Forward, FullRateGivesInputIndependentOutput) {
    const auto data = synth_dataset(1, 3, 10, 32);
    const auto m = toy_net<float>(ArchSpec{}, 2);
    const auto masks = DropoutConfig{1.0, 1, 9}.pass(0);
    const auto probs = m.confidences(data, &masks);
    for (Eigen::Index i = 1; i < probs.rows(); ++i) EXPECT_LT((probs.row(i) - probs.row(0)).cwiseAbs().maxCoeff(), 1e-12);
    // Same as explicit all-zero factors at every site.
    std::vector<std::vector<double>> zeros;
    for (int s : m.site_sizes()) zeros.emplace_back(static_cast<std::size_t>(s), 0.0);
    const FixedMasks fixed(zeros);
    const auto ref = m.confidences(data, &fixed);
    EXPECT_TRUE((ref.array() == probs.array()).all());
}

TEST(Forward, MaskDeterminismAndIndependenceFromBatching) {
    const auto data = synth_dataset(1, 4, 10, 32);
    const auto m = build_model(ArchSpec{}, 2);
    const DropoutConfig cfg{0.5, 2, 17, true, true};
    const auto m0 = cfg.pass(0);
    const auto a = m.confidences(data, &m0, 7);
    const auto b = m.confidences(data, &m0, 64);
    // Batch shape may change float rounding, never the masks.
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-5);
    const auto m1 = cfg.pass(1);
    const auto c = m.confidences(data, &m1);
    EXPECT_GT((b - c).cwiseAbs().maxCoeff(), 1e-3);
    EXPECT_TRUE((b.array() == m.confidences(data, &m0, 64).array()).all());
}

TEST(Masks, BernoulliRateAndScaling) {
    const BernoulliMasks scaled(0.3, 5, 0, true, true), raw(0.3, 5, 0, false, true);
    std::vector<double> f(20000), g(20000);
    scaled.fill(0, 42, f);
    raw.fill(0, 42, g);
    std::size_t zeros = 0;
    for (std::size_t i = 0; i < f.size(); ++i) {
        EXPECT_EQ(f[i] == 0.0, g[i] == 0.0);
        if (f[i] == 0.0) ++zeros;
        else {
            EXPECT_DOUBLE_EQ(f[i], 1.0 / 0.7);
            EXPECT_DOUBLE_EQ(g[i], 1.0);
        }
    }
    EXPECT_NEAR(static_cast<double>(zeros) / f.size(), 0.3, 0.015);
}

TEST(Masks, SharedModeIgnoresSampleId) {
    const BernoulliMasks shared(0.5, 5, 2, true, false), per(0.5, 5, 2, true, true);
    std::vector<double> a(64), b(64), c(64), d(64);
    shared.fill(1, 10, a);
    shared.fill(1, 11, b);
    per.fill(1, 10, c);
    per.fill(1, 11, d);
    EXPECT_EQ(a, b);
    EXPECT_NE(c, d);
}

TEST(Gradient, TrainModeMatchesFiniteDifferences) {
    const auto arch = toy_arch({2, 3}, 3, 6);
    const auto net = toy_net(arch, 11);
    const auto data = random_images(4, 3, 6, 12);
    EXPECT_LT(gradient_check(net, data, nullptr, BnMode::train_frozen), 1e-3);
}

TEST(Gradient, EvalModeWithMasksMatchesFiniteDifferences) {
    const auto arch = toy_arch({2, 3}, 3, 6);
    const auto net = toy_net(arch, 13);
    const auto data = random_images(3, 3, 6, 14);
    const auto masks = DropoutConfig{0.4, 1, 3}.pass(0);
    EXPECT_LT(gradient_check(net, data, &masks, BnMode::eval), 1e-3);
    EXPECT_LT(gradient_check(net, data, &masks, BnMode::train_frozen), 1e-3);
}

TEST(Gradient, TwoLayerToy) {
    // Stem + one block: the smallest network with a dropout site.
    const auto net = toy_net(toy_arch({2}, 2, 4), 21);
    const auto data = random_images(5, 2, 4, 22);
    EXPECT_LT(gradient_check(net, data, nullptr, BnMode::train_frozen), 1e-3);
}

TEST(Checkpoint, RoundTripPreservesOutputs) {
    auto model = build_model(small_arch(), 5);
    const auto data = small_synth();
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 8;
    const auto trained = train(model, data, cfg).back();
    const auto dir = fs::temp_directory_path() / "psbd_test_ckpt";
    fs::remove_all(dir);
    save_checkpoint(trained, dir);
    const auto back = load_checkpoint(dir);
    EXPECT_EQ(back.epoch, 1);
    EXPECT_EQ(flat_params(back.model), flat_params(trained.model));
    const auto a = trained.model.confidences(data, nullptr);
    const auto b = back.model.confidences(data, nullptr);
    EXPECT_TRUE((a.array() == b.array()).all());

    // Names in weights.bin are lexicographically ordered.
    const auto raw = io::read_binary<char>(dir / "weights.bin");
    std::size_t off = 4;
    std::string prev;
    while (off < raw.size()) {
        std::uint32_t len;
        std::memcpy(&len, raw.data() + off, 4);
        std::string name(raw.data() + off + 4, len);
        EXPECT_LT(prev, name);
        prev = name;
        std::uint64_t n;
        std::memcpy(&n, raw.data() + off + 4 + len, 8);
        off += 4 + len + 8 + n * 4;
    }
    EXPECT_EQ(off, raw.size());
    fs::remove_all(dir);
}

TEST(Checkpoint, MissingOrMismatchedFilesRaise) {
    const auto dir = fs::temp_directory_path() / "psbd_test_ckpt_bad";
    fs::remove_all(dir);
    EXPECT_THROW(load_checkpoint(dir), IoError);
    save_checkpoint(ModelCheckpoint{build_model(small_arch(), 1), 0, 1}, dir);
    auto meta = io::read_json(dir / "meta.json");
    meta["arch"]["stage_widths"] = {4, 16};
    io::write_json(dir / "meta.json", meta);
    EXPECT_THROW(load_checkpoint(dir), IoError);
    fs::remove_all(dir);
}

TEST(Training, ZeroEpochsIsAParameterError) {
    TrainConfig cfg;
    cfg.epochs = 0;
    EXPECT_THROW(train(build_model(small_arch(), 1), small_synth(), cfg), ParameterError);
    cfg.epochs = 1;
    cfg.learning_rate = 0.0;
    EXPECT_THROW(train(build_model(small_arch(), 1), small_synth(), cfg), ParameterError);
}

TEST(Training, DivergenceReportsEpoch) {
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.learning_rate = 1e30;
    cfg.batch_size = 6;
    try {
        train(build_model(small_arch(), 1), small_synth(), cfg);
        FAIL() << "expected a training error";
    } catch (const TrainingError& e) {
        EXPECT_GE(e.epoch(), 1);
        EXPECT_LE(e.epoch(), 3);
    }
}

TEST(Training, CheckpointScheduleAndDeterminism) {
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg.seed = 4;
    cfg.checkpoint_epochs = {1};
    std::ostringstream log;
    const auto a = train(build_model(small_arch(), 1), small_synth(), cfg, &log);
    ASSERT_EQ(a.size(), 2u);
    EXPECT_EQ(a[0].epoch, 1);
    EXPECT_EQ(a[1].epoch, 3);
    EXPECT_NE(log.str().find("epoch 3/3"), std::string::npos);
    const auto b = train(build_model(small_arch(), 1), small_synth(), cfg);
    EXPECT_EQ(flat_params(a[1].model), flat_params(b[1].model));
    for (const auto& c : a) EXPECT_TRUE(c.model.all_finite());
}

TEST(Training, LossDecreasesOnSeparableData) {
    TrainConfig cfg;
    cfg.epochs = 8;
    cfg.batch_size = 6;
    cfg.decay_epochs = {};
    std::ostringstream log;
    const auto data = small_synth(16, 10, 2);
    const auto model = train(build_model(small_arch(16, 2), 2), data, cfg, &log).back().model;
    EXPECT_GE(accuracy(model, data), 0.9);
}

TEST(Training, ScheduleIsMultiStep) {
    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.decay_epochs = {50, 75};
    cfg.decay_factor = 0.1;
    EXPECT_DOUBLE_EQ(cfg.rate_at(0), 0.1);
    EXPECT_DOUBLE_EQ(cfg.rate_at(49), 0.1);
    EXPECT_NEAR(cfg.rate_at(50), 0.01, 1e-15);
    EXPECT_NEAR(cfg.rate_at(99), 0.001, 1e-15);
}

TEST(Training, AugmentationAndNormalizationRun) {
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 8;
    cfg.augmentation = true;
    cfg.normalization = true;
    const auto ck = train(build_model(small_arch(), 1), small_synth(), cfg).back();
    EXPECT_TRUE(ck.model.normalizes_input());
    const auto dir = fs::temp_directory_path() / "psbd_test_ckpt_norm";
    fs::remove_all(dir);
    save_checkpoint(ck, dir);
    const auto back = load_checkpoint(dir);
    EXPECT_EQ(flat_params(back.model), flat_params(ck.model));
    fs::remove_all(dir);
}

TEST(Adaptive, ZeroAlphaMatchesPlainTraining) {
    const auto clean = small_synth();
    PoisonSpec ps;
    ps.poison_ratio = 0.2;
    ps.seed = 3;
    const auto pd = poison_dataset(clean, ps);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.seed = 9;
    AdaptiveAttackConfig ada;
    ada.alpha = 0.0;
    ada.ada_interval = 1;
    const auto plain = train(build_model(small_arch(), 1), pd, cfg).back();
    const auto adaptive = train_adaptive_attacker(build_model(small_arch(), 1), pd, cfg, ada).back();
    EXPECT_EQ(flat_params(plain.model), flat_params(adaptive.model));

    ada.alpha = 0.5;
    const auto mixed = train_adaptive_attacker(build_model(small_arch(), 1), pd, cfg, ada).back();
    EXPECT_NE(flat_params(plain.model), flat_params(mixed.model));
    EXPECT_TRUE(mixed.model.all_finite());
}

TEST(Adaptive, ConfigValidation) {
    AdaptiveAttackConfig ada;
    ada.alpha = 1.5;
    EXPECT_THROW(ada.validate(), ParameterError);
    ada.alpha = 0.5;
    ada.ada_interval = 0;
    EXPECT_THROW(ada.validate(), ParameterError);
}
