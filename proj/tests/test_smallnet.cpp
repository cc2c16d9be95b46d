#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <channelkit/ccm.hpp>
#include <channelkit/common.hpp>
#include <channelkit/rng.hpp>
#include <channelkit/smallnet.hpp>

#include "oracles.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

namespace {

ck::FeatureBatch random_batch(ck::Rng& rng, int b, int c, int h, int w) {
  ck::FeatureBatch f(b, c, h, w);
  for (long i = 0; i < f.size(); ++i) f.data[i] = rng.uniform(-1.0, 1.0);
  return f;
}

// 2x2 mean pool written with plain loops, independent of the library.
ck::FeatureBatch mean_pool2(const ck::FeatureBatch& x) {
  ck::FeatureBatch out(x.batch, x.channels, x.height / 2, x.width / 2);
  for (int b = 0; b < x.batch; ++b)
    for (int c = 0; c < x.channels; ++c)
      for (int i = 0; i < out.height; ++i)
        for (int j = 0; j < out.width; ++j)
          out.at(b, c, i, j) = (x.at(b, c, 2 * i, 2 * j) + x.at(b, c, 2 * i, 2 * j + 1) +
                                x.at(b, c, 2 * i + 1, 2 * j) + x.at(b, c, 2 * i + 1, 2 * j + 1)) /
                               4.0;
  return out;
}

// Works for NetworkParams and Gradients alike; the coordinate order only has
// to be consistent between the two.
template <class ParamsLike>
Eigen::VectorXd flatten_params(const ck::NetworkSpec& spec, const ParamsLike& p) {
  std::vector<double> v;
  for (int s = 0; s < spec.stages(); ++s) {
    const Eigen::MatrixXd& w = p.conv_weight[static_cast<std::size_t>(s)];
    for (long r = 0; r < w.rows(); ++r)
      for (long c = 0; c < w.cols(); ++c) v.push_back(w(r, c));
    const Eigen::VectorXd& bias = p.conv_bias[static_cast<std::size_t>(s)];
    for (long i = 0; i < bias.size(); ++i) v.push_back(bias[i]);
  }
  for (long r = 0; r < p.fc_weight.rows(); ++r)
    for (long c = 0; c < p.fc_weight.cols(); ++c) v.push_back(p.fc_weight(r, c));
  for (long i = 0; i < p.fc_bias.size(); ++i) v.push_back(p.fc_bias[i]);
  return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<long>(v.size()));
}

ck::NetworkParams unflatten_params(const ck::NetworkSpec& spec, const Eigen::VectorXd& v) {
  ck::NetworkParams p;
  long at = 0;
  for (int s = 0; s < spec.stages(); ++s) {
    Eigen::MatrixXd w(spec.stage_channels[static_cast<std::size_t>(s)],
                      spec.stage_in_channels(s) * 9);
    for (long r = 0; r < w.rows(); ++r)
      for (long c = 0; c < w.cols(); ++c) w(r, c) = v[at++];
    p.conv_weight.push_back(std::move(w));
    Eigen::VectorXd bias(spec.stage_channels[static_cast<std::size_t>(s)]);
    for (long i = 0; i < bias.size(); ++i) bias[i] = v[at++];
    p.conv_bias.push_back(std::move(bias));
  }
  p.fc_weight.resize(spec.num_classes, spec.stage_channels.back());
  for (long r = 0; r < p.fc_weight.rows(); ++r)
    for (long c = 0; c < p.fc_weight.cols(); ++c) p.fc_weight(r, c) = v[at++];
  p.fc_bias.resize(spec.num_classes);
  for (long i = 0; i < p.fc_bias.size(); ++i) p.fc_bias[i] = v[at++];
  return p;
}

struct GradFixture {
  ck::NetworkParams params;
  ck::FeatureBatch x;
  std::vector<int> labels;
};

// Keeps every pre-activation and every target-stage correlation comfortably
// away from the kinks (ReLU at zero, |r| at zero) that a finite difference
// step cannot straddle.
GradFixture sample_fixture(ck::Rng& rng, const ck::NetworkSpec& spec, int batch) {
  for (int attempt = 0; attempt < 400; ++attempt) {
    GradFixture fx;
    fx.params = ck::init_params(spec, rng);
    fx.x = random_batch(rng, batch, spec.in_channels, spec.in_height, spec.in_width);
    fx.labels.resize(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) fx.labels[static_cast<std::size_t>(b)] = rng.below(spec.num_classes);
    const ck::ForwardTrace trace = ck::forward(spec, fx.params, fx.x);
    double margin = 1.0;
    for (const ck::FeatureBatch& pre : trace.preact)
      margin = std::min(margin, pre.data.cwiseAbs().minCoeff());
    for (int t : spec.ccm_target_layers) {
      const ck::CorrMatrix corr =
          ck::corr_matrix(ck::flatten(ck::batch_mean(trace.features[static_cast<std::size_t>(t)])));
      for (int i = 0; i < corr.n(); ++i)
        for (int j = i + 1; j < corr.n(); ++j) margin = std::min(margin, std::abs(corr.r(i, j)));
    }
    if (margin > 1e-3) return fx;
  }
  throw std::runtime_error("could not sample a kink-free network fixture");
}

ck::NetworkSpec tiny_spec(int in_ch, int hw, std::vector<int> widths, int classes,
                          std::vector<int> targets) {
  ck::NetworkSpec spec;
  spec.in_channels = in_ch;
  spec.in_height = hw;
  spec.in_width = hw;
  spec.stage_channels = std::move(widths);
  spec.num_classes = classes;
  spec.ccm_target_layers = std::move(targets);
  return spec;
}

ck::NetworkParams zero_params(const ck::NetworkSpec& spec) {
  ck::NetworkParams p;
  for (int s = 0; s < spec.stages(); ++s) {
    p.conv_weight.push_back(Eigen::MatrixXd::Zero(spec.stage_channels[static_cast<std::size_t>(s)],
                                                  spec.stage_in_channels(s) * 9));
    p.conv_bias.push_back(Eigen::VectorXd::Zero(spec.stage_channels[static_cast<std::size_t>(s)]));
  }
  p.fc_weight = Eigen::MatrixXd::Zero(spec.num_classes, spec.stage_channels.back());
  p.fc_bias = Eigen::VectorXd::Zero(spec.num_classes);
  return p;
}

}  // namespace

TEST_CASE("forward stages match the six-loop convolution oracle") {
  ck::Rng rng(701);
  const ck::NetworkSpec spec = tiny_spec(2, 6, {3, 4}, 4, {0, 1});
  ck::NetworkParams params = ck::init_params(spec, rng);
  for (Eigen::VectorXd& b : params.conv_bias)
    for (long i = 0; i < b.size(); ++i) b[i] = rng.uniform(-0.3, 0.3);
  const ck::FeatureBatch x = random_batch(rng, 3, 2, 6, 6);
  const ck::ForwardTrace trace = ck::forward(spec, params, x);

  const ck::FeatureBatch want0 = oracle::conv3x3(x, params.conv_weight[0], params.conv_bias[0]);
  REQUIRE(trace.preact[0].size() == want0.size());
  for (long i = 0; i < want0.size(); ++i)
    CHECK(std::abs(trace.preact[0].data[i] - want0.data[i]) <= 1e-12);

  for (std::size_t s = 0; s < 2; ++s)
    for (long i = 0; i < trace.preact[s].size(); ++i)
      CHECK(trace.features[s].data[i] == std::max(trace.preact[s].data[i], 0.0));

  const ck::FeatureBatch want1 =
      oracle::conv3x3(mean_pool2(trace.features[0]), params.conv_weight[1], params.conv_bias[1]);
  REQUIRE(trace.preact[1].size() == want1.size());
  for (long i = 0; i < want1.size(); ++i)
    CHECK(std::abs(trace.preact[1].data[i] - want1.data[i]) <= 1e-12);

  REQUIRE(trace.pooled.rows() == 3);
  REQUIRE(trace.pooled.cols() == 4);
  for (int b = 0; b < 3; ++b)
    for (int c = 0; c < 4; ++c) {
      double acc = 0.0;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) acc += trace.features[1].at(b, c, i, j);
      CHECK(std::abs(trace.pooled(b, c) - acc / 9.0) <= 1e-12);
    }

  for (int b = 0; b < 3; ++b)
    for (int k = 0; k < 4; ++k) {
      double acc = params.fc_bias[k];
      for (int c = 0; c < 4; ++c) acc += params.fc_weight(k, c) * trace.pooled(b, c);
      CHECK(std::abs(trace.logits(b, k) - acc) <= 1e-12);
    }
}

TEST_CASE("cross entropy matches hand-computed softmax cases") {
  Eigen::MatrixXd logits(2, 2);
  logits << 0.0, std::log(3.0), 2.0, 2.0;
  // Row 0 puts probability 0.75 on its label, row 1 exactly 0.5.
  const double want = 0.5 * (-std::log(0.75) - std::log(0.5));
  CHECK(ck::cross_entropy(logits, {1, 0}) == doctest::Approx(want).epsilon(1e-14));
  CHECK_THROWS_AS(ck::cross_entropy(logits, {1}), ck::DomainError);
  CHECK_THROWS_AS(ck::cross_entropy(logits, {1, 2}), ck::DomainError);
  CHECK_THROWS_AS(ck::cross_entropy(logits, {1, -1}), ck::DomainError);
}

TEST_CASE("network spec validation rejects malformed shapes") {
  const ck::NetworkSpec good = tiny_spec(1, 16, {8, 12, 16}, 4, {0, 1, 2});
  CHECK_NOTHROW(good.validate());

  ck::NetworkSpec s = good;
  s.in_height = 0;
  CHECK_THROWS_AS(s.validate(), ck::DomainError);

  s = good;
  s.stage_channels.clear();
  CHECK_THROWS_AS(s.validate(), ck::DomainError);

  s = good;
  s.stage_channels[1] = 0;
  CHECK_THROWS_AS(s.validate(), ck::DomainError);

  s = good;
  s.num_classes = 1;
  CHECK_THROWS_AS(s.validate(), ck::DomainError);

  s = good;
  s.in_height = 15;  // cannot pool 15 rows in half
  CHECK_THROWS_AS(s.validate(), ck::DomainError);

  s = good;
  s.ccm_target_layers = {0, 3};
  CHECK_THROWS_AS(s.validate(), ck::DomainError);

  s = good;
  s.ccm_target_layers = {1, 0};
  CHECK_THROWS_AS(s.validate(), ck::DomainError);

  s = good;
  s.ccm_target_layers = {0, 0};
  CHECK_THROWS_AS(s.validate(), ck::DomainError);

  // A 1x1 single-stage net is fine without correlation targets but has too
  // few pixels to correlate anything.
  s = tiny_spec(1, 1, {2}, 2, {});
  CHECK_NOTHROW(s.validate());
  s.ccm_target_layers = {0};
  CHECK_THROWS_AS(s.validate(), ck::DomainError);
}

TEST_CASE("forward rejects inputs and parameters that do not match the spec") {
  ck::Rng rng(709);
  const ck::NetworkSpec spec = tiny_spec(1, 6, {3, 4}, 3, {0, 1});
  const ck::NetworkParams params = ck::init_params(spec, rng);

  CHECK_THROWS_AS(ck::forward(spec, params, ck::FeatureBatch(2, 2, 6, 6)), ck::DomainError);
  CHECK_THROWS_AS(ck::forward(spec, params, ck::FeatureBatch(2, 1, 8, 6)), ck::DomainError);
  CHECK_THROWS_AS(ck::forward(spec, params, ck::FeatureBatch{}), ck::DomainError);

  ck::NetworkParams bad = params;
  bad.conv_weight[0] = Eigen::MatrixXd::Zero(3, 18);  // kernel for 2 input channels, spec has 1
  CHECK_THROWS_AS(ck::forward(spec, bad, ck::FeatureBatch(1, 1, 6, 6)), ck::DomainError);

  bad = params;
  bad.fc_weight = Eigen::MatrixXd::Zero(3, 5);
  CHECK_THROWS_AS(ck::forward(spec, bad, ck::FeatureBatch(1, 1, 6, 6)), ck::DomainError);

  bad = params;
  bad.conv_bias.pop_back();
  CHECK_THROWS_AS(ck::forward(spec, bad, ck::FeatureBatch(1, 1, 6, 6)), ck::DomainError);
}

TEST_CASE("analytic parameter gradients match central finite differences") {
  ck::Rng rng(733);
  std::vector<ck::NetworkSpec> specs;
  specs.push_back(tiny_spec(1, 6, {4}, 3, {0}));
  specs.push_back(tiny_spec(2, 6, {3, 4}, 4, {0, 1}));
  specs.push_back(tiny_spec(1, 8, {2, 3}, 2, {1}));
  specs.push_back(tiny_spec(1, 6, {5}, 3, {}));

  const ck::TrainMode modes[3] = {ck::TrainMode::Minus, ck::TrainMode::Plus, ck::TrainMode::Off};
  int checked = 0;
  for (int round = 0; round < 20; ++round) {
    const ck::NetworkSpec& spec = specs[static_cast<std::size_t>(round % 4)];
    const ck::TrainMode mode = modes[round % 3];
    const double lambda = (round % 2 == 0) ? 0.01 : 0.12;
    const GradFixture fx = sample_fixture(rng, spec, 2);

    ck::Gradients grads = ck::zero_gradients(spec);
    const ck::ForwardTrace trace = ck::forward(spec, fx.params, fx.x);
    const ck::ObjectiveBreakdown bd =
        ck::backward(spec, fx.params, trace, fx.labels, lambda, mode, grads);
    CHECK(std::abs(bd.objective -
                   ck::objective_value(spec, fx.params, fx.x, fx.labels, lambda, mode)) <= 1e-14);

    const Eigen::VectorXd flat = flatten_params(spec, fx.params);
    auto f = [&](const Eigen::VectorXd& q) {
      return ck::objective_value(spec, unflatten_params(spec, q), fx.x, fx.labels, lambda, mode);
    };
    const Eigen::VectorXd fd = oracle::central_diff(f, flat, 1e-6);
    const Eigen::VectorXd an = flatten_params(spec, grads);
    REQUIRE(an.size() == fd.size());
    for (long i = 0; i < an.size(); ++i) {
      CHECK(oracle::close(an[i], fd[i], 1e-5, 1e-8));
      ++checked;
    }
  }
  CHECK(checked > 1500);
}

TEST_CASE("lambda zero makes every mode agree with the correlation term off") {
  ck::Rng rng(739);
  const ck::NetworkSpec spec = tiny_spec(2, 6, {3, 4}, 4, {0, 1});
  const GradFixture fx = sample_fixture(rng, spec, 3);
  const ck::ForwardTrace trace = ck::forward(spec, fx.params, fx.x);

  ck::Gradients g_minus = ck::zero_gradients(spec);
  ck::Gradients g_off = ck::zero_gradients(spec);
  const ck::ObjectiveBreakdown bd_minus =
      ck::backward(spec, fx.params, trace, fx.labels, 0.0, ck::TrainMode::Minus, g_minus);
  const ck::ObjectiveBreakdown bd_off =
      ck::backward(spec, fx.params, trace, fx.labels, 0.0, ck::TrainMode::Off, g_off);

  CHECK(bd_minus.objective == bd_off.objective);
  CHECK(bd_minus.ce == bd_off.ce);
  CHECK(bd_minus.objective == bd_minus.ce);
  REQUIRE(bd_minus.ccm_per_layer.size() == 2);
  for (std::size_t t = 0; t < 2; ++t) CHECK(bd_minus.ccm_per_layer[t] == bd_off.ccm_per_layer[t]);

  const Eigen::VectorXd a = flatten_params(spec, g_minus);
  const Eigen::VectorXd b = flatten_params(spec, g_off);
  REQUIRE(a.size() == b.size());
  for (long i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  CHECK(ck::objective_value(spec, fx.params, fx.x, fx.labels, 0.0, ck::TrainMode::Minus) ==
        ck::objective_value(spec, fx.params, fx.x, fx.labels, 0.0, ck::TrainMode::Off));
}

TEST_CASE("the correlation term enters gradients linearly") {
  ck::Rng rng(743);
  const ck::NetworkSpec spec = tiny_spec(2, 6, {3, 4}, 4, {0, 1});
  const GradFixture fx = sample_fixture(rng, spec, 2);
  const ck::ForwardTrace trace = ck::forward(spec, fx.params, fx.x);
  const double lambda = 0.05;

  ck::Gradients gm = ck::zero_gradients(spec);
  ck::Gradients gp = ck::zero_gradients(spec);
  ck::Gradients go = ck::zero_gradients(spec);
  const ck::ObjectiveBreakdown bm =
      ck::backward(spec, fx.params, trace, fx.labels, lambda, ck::TrainMode::Minus, gm);
  const ck::ObjectiveBreakdown bp =
      ck::backward(spec, fx.params, trace, fx.labels, lambda, ck::TrainMode::Plus, gp);
  const ck::ObjectiveBreakdown bo =
      ck::backward(spec, fx.params, trace, fx.labels, lambda, ck::TrainMode::Off, go);

  // Minus and Plus bracket Off symmetrically, so they must average to it.
  CHECK(oracle::close(bm.objective + bp.objective, 2.0 * bo.objective, 1e-12, 1e-14));
  CHECK(bm.ce == bo.ce);
  CHECK(bp.ce == bo.ce);
  for (std::size_t t = 0; t < 2; ++t) {
    CHECK(bm.ccm_per_layer[t] == bo.ccm_per_layer[t]);
    CHECK(bp.ccm_per_layer[t] == bo.ccm_per_layer[t]);
    CHECK(bo.ccm_per_layer[t] > 0.0);
  }

  const Eigen::VectorXd vm = flatten_params(spec, gm);
  const Eigen::VectorXd vp = flatten_params(spec, gp);
  const Eigen::VectorXd vo = flatten_params(spec, go);
  bool moved = false;
  for (long i = 0; i < vm.size(); ++i) {
    CHECK(oracle::close(vm[i] + vp[i], 2.0 * vo[i], 1e-10, 1e-12));
    if (vm[i] != vo[i]) moved = true;
  }
  CHECK(moved);  // the correlation term actually reaches the conv weights
}

TEST_CASE("cosine schedule starts at the base rate and decays without hitting zero") {
  const double base = 0.02;
  CHECK(ck::cosine_lr(base, 0, 40) == base);
  for (int e = 1; e < 40; ++e) CHECK(ck::cosine_lr(base, e, 40) < ck::cosine_lr(base, e - 1, 40));
  CHECK(ck::cosine_lr(base, 39, 40) > 0.0);
  CHECK(ck::cosine_lr(base, 20, 40) == doctest::Approx(0.5 * base).epsilon(1e-12));
  CHECK(ck::cosine_lr(base, 0, 1) == base);
  CHECK_THROWS_AS(ck::cosine_lr(base, 40, 40), ck::DomainError);
  CHECK_THROWS_AS(ck::cosine_lr(base, -1, 40), ck::DomainError);
  CHECK_THROWS_AS(ck::cosine_lr(base, 0, 0), ck::ConfigError);
}

TEST_CASE("two training epochs reproduce the momentum update rule step by step") {
  const ck::NetworkSpec spec = tiny_spec(1, 6, {3, 4}, 3, {0, 1});

  // One sample: every epoch is one batch and shuffling is a no-op, so the
  // whole run can be replayed by hand.
  ck::SynthDataset ds;
  ds.samples = 1;
  ds.channels = 1;
  ds.height = 6;
  ds.width = 6;
  ds.images.resize(36);
  ck::Rng drng(11);
  for (long i = 0; i < 36; ++i) ds.images[i] = drng.uniform(0.0, 1.0);
  ds.labels = {2};

  ck::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.learning_rate = 0.05;
  cfg.momentum = 0.9;
  cfg.weight_decay = 0.005;
  cfg.lambda = 0.01;
  cfg.mode = ck::TrainMode::Minus;
  cfg.seed = 7;

  const ck::TrainResult got = ck::train(spec, ds, cfg);

  ck::Rng ir(7);
  ck::NetworkParams w = ck::init_params(spec, ir);
  ck::Gradients vel = ck::zero_gradients(spec);
  ck::Gradients g = ck::zero_gradients(spec);
  const ck::FeatureBatch batch = ds.range_batch(0, 1);
  std::vector<ck::ObjectiveBreakdown> breakdowns;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = ck::cosine_lr(cfg.learning_rate, epoch, cfg.epochs);
    const ck::ForwardTrace trace = ck::forward(spec, w, batch);
    breakdowns.push_back(ck::backward(spec, w, trace, ds.labels, cfg.lambda, cfg.mode, g));
    auto step = [&](auto& wm, const auto& gm, auto& vm) {
      vm = cfg.momentum * vm + (gm + cfg.weight_decay * wm);
      wm -= lr * vm;
    };
    for (int s = 0; s < spec.stages(); ++s) {
      step(w.conv_weight[static_cast<std::size_t>(s)], g.conv_weight[static_cast<std::size_t>(s)],
           vel.conv_weight[static_cast<std::size_t>(s)]);
      step(w.conv_bias[static_cast<std::size_t>(s)], g.conv_bias[static_cast<std::size_t>(s)],
           vel.conv_bias[static_cast<std::size_t>(s)]);
    }
    step(w.fc_weight, g.fc_weight, vel.fc_weight);
    step(w.fc_bias, g.fc_bias, vel.fc_bias);
  }

  const Eigen::VectorXd a = flatten_params(spec, got.params);
  const Eigen::VectorXd b = flatten_params(spec, w);
  REQUIRE(a.size() == b.size());
  for (long i = 0; i < a.size(); ++i) CHECK(oracle::close(a[i], b[i], 1e-12, 1e-14));

  REQUIRE(got.history.size() == 2);
  CHECK(got.history[0].epoch == 0);
  CHECK(got.history[0].lr == cfg.learning_rate);
  CHECK(got.history[1].lr == ck::cosine_lr(cfg.learning_rate, 1, 2));
  CHECK(got.history[0].objective == breakdowns[0].objective);
  CHECK(got.history[0].ce == breakdowns[0].ce);
  REQUIRE(got.history[0].ccm_per_layer.size() == 2);
  for (std::size_t t = 0; t < 2; ++t)
    CHECK(got.history[0].ccm_per_layer[t] == breakdowns[0].ccm_per_layer[t]);
  CHECK(oracle::close(got.history[1].objective, breakdowns[1].objective, 1e-12, 1e-14));
  CHECK((got.history[0].accuracy == 0.0 || got.history[0].accuracy == 1.0));
}

TEST_CASE("training is bitwise deterministic for a fixed seed") {
  const ck::NetworkSpec spec = tiny_spec(1, 16, {4, 6}, 4, {0, 1});
  const ck::SynthDataset ds = ck::synth_dataset(404, 64);

  ck::TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.learning_rate = 0.02;
  cfg.mode = ck::TrainMode::Minus;
  cfg.seed = 21;

  const ck::TrainResult r1 = ck::train(spec, ds, cfg);
  const ck::TrainResult r2 = ck::train(spec, ds, cfg);

  const Eigen::VectorXd p1 = flatten_params(spec, r1.params);
  const Eigen::VectorXd p2 = flatten_params(spec, r2.params);
  REQUIRE(p1.size() == p2.size());
  CHECK((p1 - p2).cwiseAbs().maxCoeff() == 0.0);

  REQUIRE(r1.history.size() == 3);
  REQUIRE(r2.history.size() == 3);
  for (std::size_t e = 0; e < 3; ++e) {
    CHECK(r1.history[e].objective == r2.history[e].objective);
    CHECK(r1.history[e].ce == r2.history[e].ce);
    CHECK(r1.history[e].accuracy == r2.history[e].accuracy);
    CHECK(r1.history[e].lr == r2.history[e].lr);
    REQUIRE(r1.history[e].ccm_per_layer.size() == r2.history[e].ccm_per_layer.size());
    for (std::size_t t = 0; t < r1.history[e].ccm_per_layer.size(); ++t)
      CHECK(r1.history[e].ccm_per_layer[t] == r2.history[e].ccm_per_layer[t]);
  }

  ck::TrainConfig other = cfg;
  other.seed = 22;
  const ck::TrainResult r3 = ck::train(spec, ds, other);
  CHECK((p1 - flatten_params(spec, r3.params)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("synthetic dataset is deterministic, interleaved and bounded") {
  const ck::SynthDataset a = ck::synth_dataset(99, 101);
  CHECK(a.samples == 101);
  CHECK(a.channels == 1);
  CHECK(a.height == 16);
  CHECK(a.width == 16);
  REQUIRE(a.images.size() == 101 * 256);
  REQUIRE(a.labels.size() == 101);
  for (int i = 0; i < 101; ++i) CHECK(a.labels[static_cast<std::size_t>(i)] == i % 4);
  CHECK(a.images.minCoeff() >= 0.0);
  CHECK(a.images.maxCoeff() <= 1.0);
  CHECK(a.images.maxCoeff() > 0.6);  // foreground shapes are actually drawn
  CHECK(a.images.minCoeff() < 0.2);  // on a dim background

  const ck::SynthDataset b = ck::synth_dataset(99, 101);
  CHECK((a.images - b.images).cwiseAbs().maxCoeff() == 0.0);
  const ck::SynthDataset c = ck::synth_dataset(100, 101);
  CHECK((a.images - c.images).cwiseAbs().maxCoeff() > 0.0);

  CHECK_THROWS_AS(ck::synth_dataset(1, 0), ck::ConfigError);

  const ck::FeatureBatch fb = a.range_batch(4, 6);
  REQUIRE(fb.batch == 2);
  for (long i = 0; i < 256; ++i) {
    CHECK(fb.data[i] == a.images[4 * 256 + i]);
    CHECK(fb.data[256 + i] == a.images[5 * 256 + i]);
  }
  CHECK_THROWS_AS(a.range_batch(-1, 2), ck::DomainError);
  CHECK_THROWS_AS(a.range_batch(5, 5), ck::DomainError);
  CHECK_THROWS_AS(a.range_batch(100, 102), ck::DomainError);
  const int bad = 101;
  CHECK_THROWS_AS(a.gather(&bad, 1), ck::DomainError);
}

TEST_CASE("a linear probe separates the synthetic classes") {
  const ck::SynthDataset ds = ck::synth_dataset(2024, 400);
  const int n = ds.samples;
  const int d = ds.height * ds.width;
  Eigen::MatrixXd x(n, d);
  for (int s = 0; s < n; ++s) x.row(s) = ds.images.segment(static_cast<long>(s) * d, d).transpose();

  // Softmax regression on raw pixels, written out here so the check does not
  // depend on the network code at all.
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(4, d);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(4);
  for (int it = 0; it < 300; ++it) {
    Eigen::MatrixXd logits = x * w.transpose();
    logits.rowwise() += b.transpose();
    Eigen::MatrixXd p(n, 4);
    for (int i = 0; i < n; ++i) {
      const Eigen::ArrayXd e = (logits.row(i).array() - logits.row(i).maxCoeff()).exp();
      p.row(i) = (e / e.sum()).matrix();
      p(i, ds.labels[static_cast<std::size_t>(i)]) -= 1.0;
    }
    p /= static_cast<double>(n);
    w -= 0.5 * (p.transpose() * x);
    b -= 0.5 * p.colwise().sum().transpose();
  }

  int correct = 0;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd scores = w * x.row(i).transpose() + b;
    int arg = 0;
    for (int k = 1; k < 4; ++k)
      if (scores[k] > scores[arg]) arg = k;
    if (arg == ds.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  CHECK(static_cast<double>(correct) / n >= 0.9);
}

TEST_CASE("an all-zero network predicts the first class everywhere") {
  const ck::NetworkSpec spec;  // defaults: 16x16, three stages, four classes
  const ck::NetworkParams p = zero_params(spec);
  const ck::SynthDataset ds = ck::synth_dataset(5, 400);
  // All logits tie, argmax breaks to class 0, and labels cycle through four
  // classes evenly.
  CHECK(ck::evaluate(spec, p, ds) == 0.25);
}

TEST_CASE("training throws when the objective stops being finite") {
  const ck::NetworkSpec spec = tiny_spec(1, 16, {3}, 4, {0});
  const ck::SynthDataset ds = ck::synth_dataset(3, 8);
  // lr * weight_decay = 1e6 multiplies the weights every step, so the run
  // overflows to non-finite long before the epoch budget runs out.
  ck::TrainConfig cfg;
  cfg.epochs = 40;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e8;
  cfg.weight_decay = 0.01;
  cfg.mode = ck::TrainMode::Minus;
  cfg.seed = 2;
  CHECK_THROWS_AS(ck::train(spec, ds, cfg), ck::DomainError);
}

TEST_CASE("train rejects datasets that do not match the network input") {
  const ck::NetworkSpec spec = tiny_spec(1, 8, {3}, 4, {0});
  const ck::SynthDataset ds = ck::synth_dataset(1, 8);  // 16x16 images
  ck::TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(ck::train(spec, ds, cfg), ck::DomainError);
}

TEST_CASE("train config and mode strings validate their inputs") {
  ck::TrainConfig good;
  CHECK_NOTHROW(good.validate());

  ck::TrainConfig c = good;
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), ck::ConfigError);
  c = good;
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ck::ConfigError);
  c = good;
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(c.validate(), ck::ConfigError);
  c = good;
  c.momentum = 1.0;
  CHECK_THROWS_AS(c.validate(), ck::ConfigError);
  c = good;
  c.momentum = -0.1;
  CHECK_THROWS_AS(c.validate(), ck::ConfigError);
  c = good;
  c.weight_decay = -1.0;
  CHECK_THROWS_AS(c.validate(), ck::ConfigError);
  c = good;
  c.lambda = -0.01;
  CHECK_THROWS_AS(c.validate(), ck::ConfigError);

  CHECK(ck::train_mode_from_string("off") == ck::TrainMode::Off);
  CHECK(ck::train_mode_from_string("minus") == ck::TrainMode::Minus);
  CHECK(ck::train_mode_from_string("plus") == ck::TrainMode::Plus);
  CHECK(ck::to_string(ck::TrainMode::Off) == "off");
  CHECK(ck::to_string(ck::TrainMode::Minus) == "minus");
  CHECK(ck::to_string(ck::TrainMode::Plus) == "plus");
  CHECK_THROWS_AS(ck::train_mode_from_string("banana"), ck::ConfigError);
}

TEST_CASE("checkpoints round trip bitwise and reject corruption") {
  testutil::TempDir tmp("ckpt");
  ck::Rng rng(61);
  const ck::NetworkSpec spec = tiny_spec(1, 16, {5, 7}, 4, {0, 1});

  ck::Checkpoint ckpt;
  ckpt.spec = spec;
  ckpt.config.epochs = 9;
  ckpt.config.batch_size = 32;
  ckpt.config.learning_rate = 0.015;
  ckpt.config.momentum = 0.85;
  ckpt.config.weight_decay = 0.004;
  ckpt.config.lambda = 0.02;
  ckpt.config.mode = ck::TrainMode::Plus;
  ckpt.config.seed = 123;
  ckpt.epoch = 9;
  ck::EpochStats st;
  st.epoch = 8;
  st.objective = 1.0 / 3.0;
  st.ce = 0.31830988618379069;
  st.ccm_per_layer = {0.375, 1.0 / 7.0};
  st.accuracy = 0.875;
  st.lr = 0.0009;
  ckpt.history = {st};
  ckpt.params = ck::init_params(spec, rng);
  ckpt.provenance = "trained from scratch";

  ck::save_checkpoint(tmp.sub("a"), ckpt);

  SUBCASE("round trip") {
    const ck::Checkpoint back = ck::load_checkpoint(tmp.sub("a"));
    CHECK(back.spec.in_channels == spec.in_channels);
    CHECK(back.spec.in_height == spec.in_height);
    CHECK(back.spec.in_width == spec.in_width);
    CHECK(back.spec.stage_channels == spec.stage_channels);
    CHECK(back.spec.num_classes == spec.num_classes);
    CHECK(back.spec.ccm_target_layers == spec.ccm_target_layers);

    CHECK(back.config.epochs == ckpt.config.epochs);
    CHECK(back.config.batch_size == ckpt.config.batch_size);
    CHECK(back.config.learning_rate == ckpt.config.learning_rate);
    CHECK(back.config.momentum == ckpt.config.momentum);
    CHECK(back.config.weight_decay == ckpt.config.weight_decay);
    CHECK(back.config.lambda == ckpt.config.lambda);
    CHECK(back.config.mode == ckpt.config.mode);
    CHECK(back.config.seed == ckpt.config.seed);
    CHECK(back.epoch == 9);
    CHECK(back.provenance == "trained from scratch");

    REQUIRE(back.history.size() == 1);
    CHECK(back.history[0].epoch == st.epoch);
    CHECK(back.history[0].objective == st.objective);
    CHECK(back.history[0].ce == st.ce);
    CHECK(back.history[0].ccm_per_layer == st.ccm_per_layer);
    CHECK(back.history[0].accuracy == st.accuracy);
    CHECK(back.history[0].lr == st.lr);

    const Eigen::VectorXd a = flatten_params(spec, ckpt.params);
    const Eigen::VectorXd b = flatten_params(spec, back.params);
    REQUIRE(a.size() == b.size());
    CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("missing manifest") {
    CHECK_THROWS_AS(ck::load_checkpoint(tmp.sub("nope")), ck::IoError);
  }

  SUBCASE("garbage manifest") {
    testutil::spit(tmp.sub("a") + "/manifest.json", "{nope");
    CHECK_THROWS_AS(ck::load_checkpoint(tmp.sub("a")), ck::IoError);
  }

  SUBCASE("wrong format marker") {
    testutil::spit(tmp.sub("a") + "/manifest.json", "{\"format\": \"something-else\"}");
    CHECK_THROWS_AS(ck::load_checkpoint(tmp.sub("a")), ck::IoError);
  }

  SUBCASE("tensor with unexpected dims") {
    ck::write_tensor(tmp.sub("a") + "/conv0_bias.ckt", {6}, Eigen::VectorXd::Zero(6));
    CHECK_THROWS_AS(ck::load_checkpoint(tmp.sub("a")), ck::IoError);
  }

  SUBCASE("missing tensor file") {
    std::filesystem::remove(tmp.sub("a") + "/fc_weight.ckt");
    CHECK_THROWS_AS(ck::load_checkpoint(tmp.sub("a")), ck::IoError);
  }
}

TEST_CASE("history csv carries the header and digit-exact values") {
  testutil::TempDir tmp("hist");
  std::vector<ck::EpochStats> hist(2);
  hist[0].epoch = 0;
  hist[0].objective = 1.0 / 3.0;
  hist[0].ce = 0.9162907318741551;
  hist[0].ccm_per_layer = {0.2, 1.0 / 7.0};
  hist[0].accuracy = 0.4375;
  hist[0].lr = 0.01;
  hist[1].epoch = 1;
  hist[1].objective = 0.25;
  hist[1].ce = 0.251;
  hist[1].ccm_per_layer = {0.1};
  hist[1].accuracy = 1.0;
  hist[1].lr = 0.0052;

  const std::string path = tmp.sub("history.csv");
  ck::write_history_csv(path, hist);

  const std::string text = testutil::slurp(path);
  std::vector<std::string> lines;
  std::size_t at = 0;
  while (at < text.size()) {
    const std::size_t nl = text.find('\n', at);
    REQUIRE(nl != std::string::npos);
    lines.push_back(text.substr(at, nl - at));
    at = nl + 1;
  }
  REQUIRE(lines.size() == 3);
  CHECK(lines[0] == "epoch,objective,ce,ccm_sum,accuracy,lr");

  for (std::size_t row = 0; row < 2; ++row) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    const std::string& line = lines[row + 1];
    while (true) {
      const std::size_t comma = line.find(',', start);
      fields.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    REQUIRE(fields.size() == 6);
    const ck::EpochStats& want = hist[row];
    CHECK(std::atoi(fields[0].c_str()) == want.epoch);
    CHECK(std::strtod(fields[1].c_str(), nullptr) == want.objective);
    CHECK(std::strtod(fields[2].c_str(), nullptr) == want.ce);
    CHECK(std::strtod(fields[3].c_str(), nullptr) == want.ccm_sum());
    CHECK(std::strtod(fields[4].c_str(), nullptr) == want.accuracy);
    CHECK(std::strtod(fields[5].c_str(), nullptr) == want.lr);
  }

  CHECK_THROWS_AS(ck::write_history_csv(tmp.sub("no/such/dir/h.csv"), hist), ck::IoError);
}
