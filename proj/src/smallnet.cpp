#include <channelkit/smallnet.hpp>

#include <channelkit/common.hpp>

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace ck {

namespace {

using nlohmann::json;

void check_params_match(const NetworkSpec& spec, const NetworkParams& p) {
  if (static_cast<int>(p.conv_weight.size()) != spec.stages() ||
      static_cast<int>(p.conv_bias.size()) != spec.stages())
    throw DomainError("parameter set has the wrong number of stages");
  for (int s = 0; s < spec.stages(); ++s) {
    if (p.conv_weight[s].rows() != spec.stage_channels[s] ||
        p.conv_weight[s].cols() != spec.stage_in_channels(s) * 9)
      throw DomainError("stage " + std::to_string(s) + " kernel shape does not match the spec");
    if (p.conv_bias[s].size() != spec.stage_channels[s])
      throw DomainError("stage " + std::to_string(s) + " bias width does not match the spec");
  }
  if (p.fc_weight.rows() != spec.num_classes || p.fc_weight.cols() != spec.stage_channels.back() ||
      p.fc_bias.size() != spec.num_classes)
    throw DomainError("classifier shape does not match the spec");
}

void check_input_match(const NetworkSpec& spec, const FeatureBatch& x) {
  if (x.channels != spec.in_channels || x.height != spec.in_height || x.width != spec.in_width)
    throw DomainError("input batch dims do not match the network input");
  if (x.batch < 1) throw DomainError("input batch is empty");
}

Eigen::MatrixXd im2col(const FeatureBatch& x) {
  const int b_n = x.batch, c_n = x.channels, h = x.height, w = x.width;
  Eigen::MatrixXd col = Eigen::MatrixXd::Zero(static_cast<long>(c_n) * 9,
                                              static_cast<long>(b_n) * h * w);
  for (int b = 0; b < b_n; ++b)
    for (int oi = 0; oi < h; ++oi)
      for (int oj = 0; oj < w; ++oj) {
        const long cc = (static_cast<long>(b) * h + oi) * w + oj;
        for (int c = 0; c < c_n; ++c)
          for (int ki = 0; ki < 3; ++ki) {
            const int ii = oi + ki - 1;
            if (ii < 0 || ii >= h) continue;
            for (int kj = 0; kj < 3; ++kj) {
              const int jj = oj + kj - 1;
              if (jj < 0 || jj >= w) continue;
              col(static_cast<long>(c) * 9 + ki * 3 + kj, cc) = x.at(b, c, ii, jj);
            }
          }
      }
  return col;
}

void col2im_add(const Eigen::MatrixXd& dcol, FeatureBatch& dx) {
  const int b_n = dx.batch, c_n = dx.channels, h = dx.height, w = dx.width;
  for (int b = 0; b < b_n; ++b)
    for (int oi = 0; oi < h; ++oi)
      for (int oj = 0; oj < w; ++oj) {
        const long cc = (static_cast<long>(b) * h + oi) * w + oj;
        for (int c = 0; c < c_n; ++c)
          for (int ki = 0; ki < 3; ++ki) {
            const int ii = oi + ki - 1;
            if (ii < 0 || ii >= h) continue;
            for (int kj = 0; kj < 3; ++kj) {
              const int jj = oj + kj - 1;
              if (jj < 0 || jj >= w) continue;
              dx.at(b, c, ii, jj) += dcol(static_cast<long>(c) * 9 + ki * 3 + kj, cc);
            }
          }
      }
}

FeatureBatch pool2(const FeatureBatch& x) {
  FeatureBatch out(x.batch, x.channels, x.height / 2, x.width / 2);
  for (int b = 0; b < x.batch; ++b)
    for (int c = 0; c < x.channels; ++c)
      for (int i = 0; i < out.height; ++i)
        for (int j = 0; j < out.width; ++j)
          out.at(b, c, i, j) = 0.25 * (x.at(b, c, 2 * i, 2 * j) + x.at(b, c, 2 * i, 2 * j + 1) +
                                       x.at(b, c, 2 * i + 1, 2 * j) + x.at(b, c, 2 * i + 1, 2 * j + 1));
  return out;
}

FeatureBatch pool2_backward(const FeatureBatch& dout) {
  FeatureBatch dx(dout.batch, dout.channels, dout.height * 2, dout.width * 2);
  for (int b = 0; b < dout.batch; ++b)
    for (int c = 0; c < dout.channels; ++c)
      for (int i = 0; i < dout.height; ++i)
        for (int j = 0; j < dout.width; ++j) {
          const double v = 0.25 * dout.at(b, c, i, j);
          dx.at(b, c, 2 * i, 2 * j) = v;
          dx.at(b, c, 2 * i, 2 * j + 1) = v;
          dx.at(b, c, 2 * i + 1, 2 * j) = v;
          dx.at(b, c, 2 * i + 1, 2 * j + 1) = v;
        }
  return dx;
}

FeatureBatch z_to_batch(const Eigen::MatrixXd& z, int b_n, int h, int w) {
  FeatureBatch out(b_n, static_cast<int>(z.rows()), h, w);
  const long hw = static_cast<long>(h) * w;
  for (int b = 0; b < b_n; ++b)
    for (int o = 0; o < out.channels; ++o)
      out.plane(b, o) = z.row(o).segment(static_cast<long>(b) * hw, hw).transpose();
  return out;
}

Eigen::MatrixXd batch_to_z(const FeatureBatch& f) {
  Eigen::MatrixXd z(f.channels, static_cast<long>(f.batch) * f.plane_size());
  const long hw = f.plane_size();
  for (int b = 0; b < f.batch; ++b)
    for (int o = 0; o < f.channels; ++o)
      z.row(o).segment(static_cast<long>(b) * hw, hw) = f.plane(b, o).transpose();
  return z;
}

void check_labels(const std::vector<int>& labels, int batch, int classes) {
  if (static_cast<int>(labels.size()) != batch)
    throw DomainError("label count does not match batch size");
  for (int y : labels)
    if (y < 0 || y >= classes) throw DomainError("label out of range: " + std::to_string(y));
}

// Softmax gradient of the mean cross-entropy: (p - onehot) / batch.
Eigen::MatrixXd ce_dlogits(const Eigen::MatrixXd& logits, const std::vector<int>& labels) {
  Eigen::MatrixXd d(logits.rows(), logits.cols());
  for (long b = 0; b < logits.rows(); ++b) {
    const double m = logits.row(b).maxCoeff();
    Eigen::ArrayXd e = (logits.row(b).array() - m).exp();
    d.row(b) = (e / e.sum()).matrix();
    d(b, labels[static_cast<std::size_t>(b)]) -= 1.0;
  }
  return d / static_cast<double>(logits.rows());
}

void sgd_step(Eigen::Ref<Eigen::MatrixXd> w, const Eigen::Ref<const Eigen::MatrixXd>& g,
              Eigen::Ref<Eigen::MatrixXd> v, double lr, double mu, double wd) {
  v = mu * v + (g + wd * w);
  w -= lr * v;
}

std::vector<int> gather_labels(const SynthDataset& data, const int* idx, int count) {
  std::vector<int> out(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out[static_cast<std::size_t>(i)] = data.labels[static_cast<std::size_t>(idx[i])];
  return out;
}

}  // namespace

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::Off: return "off";
    case TrainMode::Minus: return "minus";
    case TrainMode::Plus: return "plus";
  }
  throw DomainError("unknown train mode");
}

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "off") return TrainMode::Off;
  if (s == "minus") return TrainMode::Minus;
  if (s == "plus") return TrainMode::Plus;
  throw ConfigError("unknown train mode \"" + s + "\" (expected off, minus or plus)");
}

void NetworkSpec::validate() const {
  if (in_channels < 1 || in_height < 1 || in_width < 1)
    throw DomainError("network input dims must all be >= 1");
  if (stage_channels.empty()) throw DomainError("network needs at least one conv stage");
  for (int c : stage_channels)
    if (c < 1) throw DomainError("every stage needs at least one channel");
  if (num_classes < 2) throw DomainError("classifier needs at least two classes");
  for (int s = 0; s + 1 < stages(); ++s)
    if (stage_height(s) % 2 != 0 || stage_width(s) % 2 != 0 || stage_height(s) < 2 ||
        stage_width(s) < 2)
      throw DomainError("stage " + std::to_string(s) +
                        " output cannot be pooled 2x2; adjust input dims or stage count");
  int prev = -1;
  for (int t : ccm_target_layers) {
    if (t < 0 || t >= stages())
      throw DomainError("correlation target stage out of range: " + std::to_string(t));
    if (t <= prev) throw DomainError("correlation target stages must be strictly increasing");
    if (static_cast<long>(stage_height(t)) * stage_width(t) < 2)
      throw DomainError("correlation target stage " + std::to_string(t) +
                        " has fewer than two pixels");
    prev = t;
  }
}

NetworkParams init_params(const NetworkSpec& spec, Rng& rng) {
  spec.validate();
  NetworkParams p;
  p.conv_weight.resize(static_cast<std::size_t>(spec.stages()));
  p.conv_bias.resize(static_cast<std::size_t>(spec.stages()));
  for (int s = 0; s < spec.stages(); ++s) {
    const int rows = spec.stage_channels[s];
    const int cols = spec.stage_in_channels(s) * 9;
    const double bound = std::sqrt(6.0 / cols);
    Eigen::MatrixXd w(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) w(r, c) = rng.uniform(-bound, bound);
    p.conv_weight[static_cast<std::size_t>(s)] = std::move(w);
    p.conv_bias[static_cast<std::size_t>(s)] = Eigen::VectorXd::Zero(rows);
  }
  const double bound = std::sqrt(6.0 / spec.stage_channels.back());
  p.fc_weight.resize(spec.num_classes, spec.stage_channels.back());
  for (int r = 0; r < spec.num_classes; ++r)
    for (int c = 0; c < spec.stage_channels.back(); ++c) p.fc_weight(r, c) = rng.uniform(-bound, bound);
  p.fc_bias = Eigen::VectorXd::Zero(spec.num_classes);
  return p;
}

Gradients zero_gradients(const NetworkSpec& spec) {
  Gradients g;
  g.conv_weight.resize(static_cast<std::size_t>(spec.stages()));
  g.conv_bias.resize(static_cast<std::size_t>(spec.stages()));
  for (int s = 0; s < spec.stages(); ++s) {
    g.conv_weight[static_cast<std::size_t>(s)] =
        Eigen::MatrixXd::Zero(spec.stage_channels[s], spec.stage_in_channels(s) * 9);
    g.conv_bias[static_cast<std::size_t>(s)] = Eigen::VectorXd::Zero(spec.stage_channels[s]);
  }
  g.fc_weight = Eigen::MatrixXd::Zero(spec.num_classes, spec.stage_channels.back());
  g.fc_bias = Eigen::VectorXd::Zero(spec.num_classes);
  return g;
}

ForwardTrace forward(const NetworkSpec& spec, const NetworkParams& params, const FeatureBatch& x) {
  spec.validate();
  check_params_match(spec, params);
  check_input_match(spec, x);

  ForwardTrace t;
  const int stages = spec.stages();
  t.cols.resize(static_cast<std::size_t>(stages));
  t.preact.resize(static_cast<std::size_t>(stages));
  t.features.resize(static_cast<std::size_t>(stages));

  FeatureBatch cur = x;
  for (int s = 0; s < stages; ++s) {
    Eigen::MatrixXd col = im2col(cur);
    Eigen::MatrixXd z = params.conv_weight[static_cast<std::size_t>(s)] * col;
    z.colwise() += params.conv_bias[static_cast<std::size_t>(s)];
    t.preact[static_cast<std::size_t>(s)] = z_to_batch(z, x.batch, cur.height, cur.width);
    FeatureBatch& feat = t.features[static_cast<std::size_t>(s)];
    feat = t.preact[static_cast<std::size_t>(s)];
    feat.data = feat.data.cwiseMax(0.0);
    t.cols[static_cast<std::size_t>(s)] = std::move(col);
    if (s + 1 < stages) cur = pool2(feat);
  }

  const FeatureBatch& last = t.features.back();
  t.pooled.resize(x.batch, last.channels);
  for (int b = 0; b < x.batch; ++b)
    for (int c = 0; c < last.channels; ++c) t.pooled(b, c) = last.plane(b, c).mean();

  t.logits = t.pooled * params.fc_weight.transpose();
  t.logits.rowwise() += params.fc_bias.transpose();
  return t;
}

Eigen::MatrixXd forward_logits(const NetworkSpec& spec, const NetworkParams& params,
                               const FeatureBatch& x) {
  return forward(spec, params, x).logits;
}

double cross_entropy(const Eigen::MatrixXd& logits, const std::vector<int>& labels) {
  check_labels(labels, static_cast<int>(logits.rows()), static_cast<int>(logits.cols()));
  double total = 0.0;
  for (long b = 0; b < logits.rows(); ++b) {
    const double m = logits.row(b).maxCoeff();
    const double lse = std::log((logits.row(b).array() - m).exp().sum());
    total -= logits(b, labels[static_cast<std::size_t>(b)]) - m - lse;
  }
  return total / static_cast<double>(logits.rows());
}

double ObjectiveBreakdown::ccm_sum() const {
  double s = 0.0;
  for (double v : ccm_per_layer) s += v;
  return s;
}

double EpochStats::ccm_sum() const {
  double s = 0.0;
  for (double v : ccm_per_layer) s += v;
  return s;
}

ObjectiveBreakdown backward(const NetworkSpec& spec, const NetworkParams& params,
                            const ForwardTrace& trace, const std::vector<int>& labels,
                            double lambda, TrainMode mode, Gradients& grads) {
  if (lambda < 0.0) throw ConfigError("lambda must be nonnegative");
  const int batch = static_cast<int>(trace.logits.rows());
  check_labels(labels, batch, spec.num_classes);

  ObjectiveBreakdown bd;
  bd.ce = cross_entropy(trace.logits, labels);
  bd.ccm_per_layer.assign(spec.ccm_target_layers.size(), 0.0);

  const Eigen::MatrixXd dlogits = ce_dlogits(trace.logits, labels);
  grads.fc_weight = dlogits.transpose() * trace.pooled;
  grads.fc_bias = dlogits.colwise().sum().transpose();

  // Global average pool backward: spread each pooled gradient over the plane.
  const Eigen::MatrixXd dpooled = dlogits * params.fc_weight;
  const FeatureBatch& last = trace.features.back();
  FeatureBatch dfeat(last.batch, last.channels, last.height, last.width);
  const double inv_hw = 1.0 / static_cast<double>(last.plane_size());
  for (int b = 0; b < last.batch; ++b)
    for (int c = 0; c < last.channels; ++c)
      dfeat.plane(b, c).setConstant(dpooled(b, c) * inv_hw);

  const double coeff = mode == TrainMode::Minus ? -lambda : lambda;
  for (int s = spec.stages() - 1; s >= 0; --s) {
    const FeatureBatch& feat = trace.features[static_cast<std::size_t>(s)];
    // The correlation term attaches to post-activation maps, so its gradient
    // joins the stream before the ReLU mask is applied.
    for (std::size_t ti = 0; ti < spec.ccm_target_layers.size(); ++ti) {
      if (spec.ccm_target_layers[ti] != s) continue;
      if (mode == TrainMode::Off) {
        bd.ccm_per_layer[ti] = ccm_loss(corr_matrix(flatten(batch_mean(feat))));
      } else {
        CcmValueGrad vg = ccm_loss_and_grad(feat);
        bd.ccm_per_layer[ti] = vg.loss;
        dfeat.data += coeff * vg.grad.data;
      }
    }

    const FeatureBatch& pre = trace.preact[static_cast<std::size_t>(s)];
    FeatureBatch dpre(pre.batch, pre.channels, pre.height, pre.width);
    dpre.data = (pre.data.array() > 0.0).select(dfeat.data, 0.0);

    const Eigen::MatrixXd dz = batch_to_z(dpre);
    grads.conv_weight[static_cast<std::size_t>(s)] =
        dz * trace.cols[static_cast<std::size_t>(s)].transpose();
    grads.conv_bias[static_cast<std::size_t>(s)] = dz.rowwise().sum();

    if (s > 0) {
      const Eigen::MatrixXd dcol = params.conv_weight[static_cast<std::size_t>(s)].transpose() * dz;
      FeatureBatch dpool(pre.batch, spec.stage_in_channels(s), pre.height, pre.width);
      col2im_add(dcol, dpool);
      dfeat = pool2_backward(dpool);
    }
  }

  LayerLossSet set;
  set.lambda = lambda;
  for (std::size_t ti = 0; ti < spec.ccm_target_layers.size(); ++ti)
    set.losses.push_back({spec.ccm_target_layers[ti], bd.ccm_per_layer[ti]});
  bd.objective = mode == TrainMode::Off
                     ? bd.ce
                     : combine_objective(bd.ce, set, mode == TrainMode::Minus ? CcmMode::Minus
                                                                              : CcmMode::Plus);
  return bd;
}

double objective_value(const NetworkSpec& spec, const NetworkParams& params, const FeatureBatch& x,
                       const std::vector<int>& labels, double lambda, TrainMode mode) {
  const ForwardTrace trace = forward(spec, params, x);
  const double ce = cross_entropy(trace.logits, labels);
  if (mode == TrainMode::Off) return ce;
  LayerLossSet set;
  set.lambda = lambda;
  for (int t : spec.ccm_target_layers)
    set.losses.push_back(
        {t, ccm_loss(corr_matrix(flatten(batch_mean(trace.features[static_cast<std::size_t>(t)]))))});
  return combine_objective(ce, set, mode == TrainMode::Minus ? CcmMode::Minus : CcmMode::Plus);
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be nonnegative");
  if (lambda < 0.0) throw ConfigError("lambda must be nonnegative");
}

FeatureBatch SynthDataset::gather(const int* idx, int count) const {
  if (count < 1) throw DomainError("empty batch requested");
  FeatureBatch out(count, channels, height, width);
  const long plane = static_cast<long>(channels) * height * width;
  for (int i = 0; i < count; ++i) {
    const int s = idx[i];
    if (s < 0 || s >= samples) throw DomainError("sample index out of range");
    out.data.segment(static_cast<long>(i) * plane, plane) = images.segment(static_cast<long>(s) * plane, plane);
  }
  return out;
}

FeatureBatch SynthDataset::range_batch(int begin, int end) const {
  if (begin < 0 || end > samples || begin >= end) throw DomainError("bad sample range");
  std::vector<int> idx(static_cast<std::size_t>(end - begin));
  std::iota(idx.begin(), idx.end(), begin);
  return gather(idx.data(), end - begin);
}

SynthDataset synth_dataset(std::uint64_t seed, int n_samples) {
  if (n_samples < 1) throw ConfigError("dataset needs at least one sample");
  SynthDataset d;
  d.samples = n_samples;
  d.seed = seed;
  d.images.resize(static_cast<long>(n_samples) * d.height * d.width);
  d.labels.resize(static_cast<std::size_t>(n_samples));

  Rng rng(seed);
  const int h = d.height, w = d.width;
  for (int s = 0; s < n_samples; ++s) {
    const int label = s % 4;
    d.labels[static_cast<std::size_t>(s)] = label;
    Eigen::Map<Eigen::MatrixXd> img(d.images.data() + static_cast<long>(s) * h * w, w, h);
    // img(j, i) addresses pixel (row i, column j) of the row-major plane.
    img.setConstant(0.1);
    switch (label) {
      case 0: {  // horizontal bar, two rows thick
        const int r0 = 2 + rng.below(11);
        for (int i = r0; i < r0 + 2; ++i)
          for (int j = 0; j < w; ++j) img(j, i) = 0.9;
        break;
      }
      case 1: {  // vertical bar, two columns thick
        const int c0 = 2 + rng.below(11);
        for (int i = 0; i < h; ++i)
          for (int j = c0; j < c0 + 2; ++j) img(j, i) = 0.9;
        break;
      }
      case 2: {  // three-pixel-wide diagonal stripe, either orientation
        const bool anti = rng.below(2) == 1;
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) {
            const int dist = anti ? std::abs(i + j - (h - 1)) : std::abs(i - j);
            if (dist <= 1) img(j, i) = 0.9;
          }
        break;
      }
      default: {  // round blob away from the border
        const int cy = 5 + rng.below(6);
        const int cx = 5 + rng.below(6);
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j)
            if ((i - cy) * (i - cy) + (j - cx) * (j - cx) <= 10) img(j, i) = 0.9;
        break;
      }
    }
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double v = img(j, i) + rng.uniform(-0.1, 0.1);
        img(j, i) = std::min(1.0, std::max(0.0, v));
      }
  }
  return d;
}

double cosine_lr(double base, int epoch, int total_epochs) {
  if (total_epochs < 1) throw ConfigError("total epochs must be >= 1");
  if (epoch < 0 || epoch >= total_epochs) throw DomainError("epoch outside the schedule");
  return base * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(epoch) / static_cast<double>(total_epochs)));
}

TrainResult train(const NetworkSpec& spec, const SynthDataset& data, const TrainConfig& config) {
  spec.validate();
  config.validate();
  Rng rng(config.seed);
  return train_from(spec, init_params(spec, rng), data, config);
}

TrainResult train_from(const NetworkSpec& spec, NetworkParams start, const SynthDataset& data,
                       const TrainConfig& config) {
  spec.validate();
  config.validate();
  check_params_match(spec, start);
  if (data.channels != spec.in_channels || data.height != spec.in_height ||
      data.width != spec.in_width)
    throw DomainError("dataset dims do not match the network input");
  if (data.samples < 1) throw DomainError("dataset is empty");

  TrainResult result;
  result.params = std::move(start);

  // Separate stream from init_params so warm starts (finetuning) shuffle the
  // same way a fresh run at this seed would.
  Rng rng(config.seed ^ 0x5bf0f3a88ea9c2f1ull);
  Gradients vel = zero_gradients(spec);
  Gradients grads = zero_gradients(spec);

  std::vector<int> order(static_cast<std::size_t>(data.samples));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = cosine_lr(config.learning_rate, epoch, config.epochs);
    rng.shuffle(order);

    double obj_sum = 0.0, ce_sum = 0.0;
    std::vector<double> ccm_sums(spec.ccm_target_layers.size(), 0.0);
    for (int at = 0; at < data.samples; at += config.batch_size) {
      const int count = std::min(config.batch_size, data.samples - at);
      const FeatureBatch fb = data.gather(order.data() + at, count);
      const std::vector<int> labels = gather_labels(data, order.data() + at, count);

      const ForwardTrace trace = forward(spec, result.params, fb);
      const ObjectiveBreakdown bd =
          backward(spec, result.params, trace, labels, config.lambda, config.mode, grads);
      if (!std::isfinite(bd.objective))
        throw DomainError("training diverged at epoch " + std::to_string(epoch) +
                          ": objective is not finite");

      for (int s = 0; s < spec.stages(); ++s) {
        sgd_step(result.params.conv_weight[static_cast<std::size_t>(s)],
                 grads.conv_weight[static_cast<std::size_t>(s)],
                 vel.conv_weight[static_cast<std::size_t>(s)], lr, config.momentum,
                 config.weight_decay);
        sgd_step(result.params.conv_bias[static_cast<std::size_t>(s)],
                 grads.conv_bias[static_cast<std::size_t>(s)],
                 vel.conv_bias[static_cast<std::size_t>(s)], lr, config.momentum,
                 config.weight_decay);
      }
      sgd_step(result.params.fc_weight, grads.fc_weight, vel.fc_weight, lr, config.momentum,
               config.weight_decay);
      sgd_step(result.params.fc_bias, grads.fc_bias, vel.fc_bias, lr, config.momentum,
               config.weight_decay);

      obj_sum += bd.objective * count;
      ce_sum += bd.ce * count;
      for (std::size_t i = 0; i < ccm_sums.size(); ++i) ccm_sums[i] += bd.ccm_per_layer[i] * count;
    }

    EpochStats st;
    st.epoch = epoch;
    st.objective = obj_sum / data.samples;
    st.ce = ce_sum / data.samples;
    st.ccm_per_layer.resize(ccm_sums.size());
    for (std::size_t i = 0; i < ccm_sums.size(); ++i)
      st.ccm_per_layer[i] = ccm_sums[i] / data.samples;
    st.accuracy = evaluate(spec, result.params, data);
    st.lr = lr;
    result.history.push_back(std::move(st));
  }
  return result;
}

double evaluate(const NetworkSpec& spec, const NetworkParams& params, const SynthDataset& data) {
  if (data.samples < 1) throw DomainError("dataset is empty");
  constexpr int kChunk = 256;
  long correct = 0;
  for (int at = 0; at < data.samples; at += kChunk) {
    const int end = std::min(data.samples, at + kChunk);
    const Eigen::MatrixXd logits = forward_logits(spec, params, data.range_batch(at, end));
    for (long b = 0; b < logits.rows(); ++b) {
      int arg = 0;
      for (int k = 1; k < spec.num_classes; ++k)
        if (logits(b, k) > logits(b, arg)) arg = k;
      if (arg == data.labels[static_cast<std::size_t>(at + b)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.samples);
}

namespace {

json spec_to_json(const NetworkSpec& spec) {
  return json{{"in_channels", spec.in_channels},
              {"in_height", spec.in_height},
              {"in_width", spec.in_width},
              {"stage_channels", spec.stage_channels},
              {"num_classes", spec.num_classes},
              {"ccm_target_layers", spec.ccm_target_layers}};
}

NetworkSpec spec_from_json(const json& j) {
  NetworkSpec spec;
  spec.in_channels = j.at("in_channels").get<int>();
  spec.in_height = j.at("in_height").get<int>();
  spec.in_width = j.at("in_width").get<int>();
  spec.stage_channels = j.at("stage_channels").get<std::vector<int>>();
  spec.num_classes = j.at("num_classes").get<int>();
  spec.ccm_target_layers = j.at("ccm_target_layers").get<std::vector<int>>();
  return spec;
}

json config_to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"momentum", c.momentum},
              {"weight_decay", c.weight_decay},
              {"lambda", c.lambda},
              {"mode", to_string(c.mode)},
              {"seed", c.seed}};
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.lambda = j.at("lambda").get<double>();
  c.mode = train_mode_from_string(j.at("mode").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

json history_to_json(const std::vector<EpochStats>& history) {
  json arr = json::array();
  for (const EpochStats& st : history)
    arr.push_back(json{{"epoch", st.epoch},
                       {"objective", st.objective},
                       {"ce", st.ce},
                       {"ccm_per_layer", st.ccm_per_layer},
                       {"accuracy", st.accuracy},
                       {"lr", st.lr}});
  return arr;
}

std::vector<EpochStats> history_from_json(const json& arr) {
  std::vector<EpochStats> out;
  for (const json& j : arr) {
    EpochStats st;
    st.epoch = j.at("epoch").get<int>();
    st.objective = j.at("objective").get<double>();
    st.ce = j.at("ce").get<double>();
    st.ccm_per_layer = j.at("ccm_per_layer").get<std::vector<double>>();
    st.accuracy = j.at("accuracy").get<double>();
    st.lr = j.at("lr").get<double>();
    out.push_back(std::move(st));
  }
  return out;
}

Eigen::VectorXd matrix_rowmajor(const Eigen::MatrixXd& m) {
  Eigen::VectorXd v(m.size());
  long at = 0;
  for (long r = 0; r < m.rows(); ++r)
    for (long c = 0; c < m.cols(); ++c) v[at++] = m(r, c);
  return v;
}

Eigen::MatrixXd rowmajor_matrix(const Eigen::VectorXd& v, long rows, long cols) {
  Eigen::MatrixXd m(rows, cols);
  long at = 0;
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) m(r, c) = v[at++];
  return m;
}

}  // namespace

void save_checkpoint(const std::string& dir, const Checkpoint& ckpt) {
  ckpt.spec.validate();
  check_params_match(ckpt.spec, ckpt.params);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory: " + dir);

  json tensors = json::object();
  for (int s = 0; s < ckpt.spec.stages(); ++s) {
    const std::string wname = "conv" + std::to_string(s) + "_weight";
    const std::string bname = "conv" + std::to_string(s) + "_bias";
    const Eigen::MatrixXd& w = ckpt.params.conv_weight[static_cast<std::size_t>(s)];
    write_tensor(dir + "/" + wname + ".ckt",
                 {static_cast<std::uint32_t>(ckpt.spec.stage_channels[s]),
                  static_cast<std::uint32_t>(ckpt.spec.stage_in_channels(s)), 3u, 3u},
                 matrix_rowmajor(w));
    write_tensor(dir + "/" + bname + ".ckt",
                 {static_cast<std::uint32_t>(ckpt.spec.stage_channels[s])},
                 ckpt.params.conv_bias[static_cast<std::size_t>(s)]);
    tensors[wname] = wname + ".ckt";
    tensors[bname] = bname + ".ckt";
  }
  write_tensor(dir + "/fc_weight.ckt",
               {static_cast<std::uint32_t>(ckpt.spec.num_classes),
                static_cast<std::uint32_t>(ckpt.spec.stage_channels.back())},
               matrix_rowmajor(ckpt.params.fc_weight));
  write_tensor(dir + "/fc_bias.ckt", {static_cast<std::uint32_t>(ckpt.spec.num_classes)},
               ckpt.params.fc_bias);
  tensors["fc_weight"] = "fc_weight.ckt";
  tensors["fc_bias"] = "fc_bias.ckt";

  json manifest{{"format", "channelkit-checkpoint"},
                {"version", 1},
                {"spec", spec_to_json(ckpt.spec)},
                {"config", config_to_json(ckpt.config)},
                {"epoch", ckpt.epoch},
                {"history", history_to_json(ckpt.history)},
                {"tensors", tensors},
                {"provenance", ckpt.provenance}};
  std::ofstream out(dir + "/manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint manifest for writing: " + dir);
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("short write on checkpoint manifest: " + dir);
}

Checkpoint load_checkpoint(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw IoError("cannot open checkpoint manifest: " + dir + "/manifest.json");
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw IoError("corrupt checkpoint manifest: " + dir + ": " + e.what());
  }

  Checkpoint ckpt;
  try {
    if (manifest.at("format").get<std::string>() != "channelkit-checkpoint")
      throw IoError("not a checkpoint manifest: " + dir);
    if (manifest.at("version").get<int>() != 1)
      throw IoError("unsupported checkpoint version in " + dir);
    ckpt.spec = spec_from_json(manifest.at("spec"));
    ckpt.spec.validate();
    ckpt.config = config_from_json(manifest.at("config"));
    ckpt.epoch = manifest.at("epoch").get<int>();
    ckpt.history = history_from_json(manifest.at("history"));
    ckpt.provenance = manifest.value("provenance", std::string());
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw IoError("corrupt checkpoint manifest: " + dir + ": " + e.what());
  }

  auto load = [&](const std::string& name, const std::vector<std::uint32_t>& want) {
    auto [dims, data] = read_tensor(dir + "/" + name + ".ckt");
    if (dims != want) throw IoError("tensor " + name + " in " + dir + " has unexpected dims");
    return data;
  };

  for (int s = 0; s < ckpt.spec.stages(); ++s) {
    const int rows = ckpt.spec.stage_channels[s];
    const int cols = ckpt.spec.stage_in_channels(s);
    Eigen::VectorXd w = load("conv" + std::to_string(s) + "_weight",
                             {static_cast<std::uint32_t>(rows), static_cast<std::uint32_t>(cols), 3u, 3u});
    ckpt.params.conv_weight.push_back(rowmajor_matrix(w, rows, static_cast<long>(cols) * 9));
    ckpt.params.conv_bias.push_back(
        load("conv" + std::to_string(s) + "_bias", {static_cast<std::uint32_t>(rows)}));
  }
  Eigen::VectorXd fw = load("fc_weight", {static_cast<std::uint32_t>(ckpt.spec.num_classes),
                                          static_cast<std::uint32_t>(ckpt.spec.stage_channels.back())});
  ckpt.params.fc_weight = rowmajor_matrix(fw, ckpt.spec.num_classes, ckpt.spec.stage_channels.back());
  ckpt.params.fc_bias = load("fc_bias", {static_cast<std::uint32_t>(ckpt.spec.num_classes)});
  return ckpt;
}

void write_history_csv(const std::string& path, const std::vector<EpochStats>& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open history CSV for writing: " + path);
  out << "epoch,objective,ce,ccm_sum,accuracy,lr\n";
  for (const EpochStats& st : history)
    out << st.epoch << ',' << g17(st.objective) << ',' << g17(st.ce) << ',' << g17(st.ccm_sum())
        << ',' << g17(st.accuracy) << ',' << g17(st.lr) << '\n';
  if (!out) throw IoError("short write on history CSV: " + path);
}

}  // namespace ck
