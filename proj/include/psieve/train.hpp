#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "psieve/common.hpp"
#include "psieve/dataset.hpp"
#include "psieve/net.hpp"

namespace psieve::net {

struct TrainConfig {
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  int max_epochs = 100;
  int patience = 20;
  int batch_size = 32;
  bool aug_crop = true;    // random-resized-crop, area scale 0.8..1.0
  bool aug_rotate = true;  // rotation within +-10 degrees
  bool aug_jitter = true;  // brightness within +-10%

  void validate() const {
    if (max_epochs < 1 || max_epochs > 100)
      throw ParameterError("max_epochs must be 1..100, got " + std::to_string(max_epochs));
    if (patience < 1 || patience >= max_epochs)
      throw ParameterError("patience must be in [1, max_epochs), got " + std::to_string(patience));
    if (batch_size < 1) throw ParameterError("batch size must be positive");
    if (lr <= 0) throw ParameterError("learning rate must be positive");
  }
};

struct EpochStats {
  double train_loss = 0, train_acc = 0, val_loss = 0, val_acc = 0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  int best_epoch = -1;
};

// Divergence during training; carries everything finite seen so far.
struct DivergenceError : TrainingError {
  TrainHistory history;
  DivergenceError(const std::string& msg, TrainHistory h)
      : TrainingError(msg), history(std::move(h)) {}
};

namespace detail {

// Crop + rotate + brightness, one bilinear resample, clamped at borders.
// Draw order is fixed so augmentation is a pure function of the stream.
template <typename Real>
void augment_into(const data::Image& src, Rng& rng, const TrainConfig& cfg, Real* dst) {
  constexpr int S = data::kImageSide;
  double zoom = 1.0, angle = 0.0, cy = S / 2.0, cx = S / 2.0, bright = 1.0;
  if (cfg.aug_crop) {
    zoom = std::sqrt(0.8 + 0.2 * rng.next_double());
    double slack = (1.0 - zoom) * (S / 2.0);
    cy += (rng.next_double() * 2.0 - 1.0) * slack;
    cx += (rng.next_double() * 2.0 - 1.0) * slack;
  }
  if (cfg.aug_rotate) angle = (rng.next_double() * 2.0 - 1.0) * (10.0 * M_PI / 180.0);
  if (cfg.aug_jitter) bright = 0.9 + 0.2 * rng.next_double();

  const double ca = std::cos(angle), sa = std::sin(angle);
  for (int ch = 0; ch < data::kChannels; ++ch) {
    for (int r = 0; r < S; ++r) {
      for (int c = 0; c < S; ++c) {
        double py = (r + 0.5 - S / 2.0) * zoom;
        double px = (c + 0.5 - S / 2.0) * zoom;
        double sy = cy + ca * py - sa * px - 0.5;
        double sx = cx + sa * py + ca * px - 0.5;
        sy = std::clamp(sy, 0.0, double(S - 1));
        sx = std::clamp(sx, 0.0, double(S - 1));
        int y0 = int(sy), x0 = int(sx);
        int y1 = std::min(y0 + 1, S - 1), x1 = std::min(x0 + 1, S - 1);
        double fy = sy - y0, fx = sx - x0;
        double v = (1 - fy) * ((1 - fx) * src.unit(y0, x0, ch) + fx * src.unit(y0, x1, ch)) +
                   fy * ((1 - fx) * src.unit(y1, x0, ch) + fx * src.unit(y1, x1, ch));
        v = std::clamp(v * bright, 0.0, 1.0);
        dst[(size_t(ch) * S + r) * S + c] = Real(v);
      }
    }
  }
}

struct AdamState {
  Params<float> m, v;
  int64_t t = 0;
};

inline void fill_zero(Params<float>& p) {
  for (auto& lp : p.at) {
    std::fill(lp.w.begin(), lp.w.end(), 0.0f);
    std::fill(lp.b.begin(), lp.b.end(), 0.0f);
    std::fill(lp.gamma.begin(), lp.gamma.end(), 0.0f);
    std::fill(lp.beta.begin(), lp.beta.end(), 0.0f);
  }
}

inline void adam_step(Params<float>& p, const Params<float>& g, AdamState& st,
                      const TrainConfig& cfg) {
  st.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(st.t));
  for (size_t i = 0; i < p.at.size(); ++i) {
    auto upd = [&](std::vector<float>& w, const std::vector<float>& gw, std::vector<float>& m,
                   std::vector<float>& v) {
      for (size_t j = 0; j < w.size(); ++j) {
        m[j] = float(cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gw[j]);
        v[j] = float(cfg.beta2 * v[j] + (1.0 - cfg.beta2) * double(gw[j]) * gw[j]);
        double mh = m[j] / bc1, vh = v[j] / bc2;
        w[j] -= float(cfg.lr * mh / (std::sqrt(vh) + cfg.adam_eps));
      }
    };
    upd(p.at[i].w, g.at[i].w, st.m.at[i].w, st.v.at[i].w);
    upd(p.at[i].b, g.at[i].b, st.m.at[i].b, st.v.at[i].b);
    upd(p.at[i].gamma, g.at[i].gamma, st.m.at[i].gamma, st.v.at[i].gamma);
    upd(p.at[i].beta, g.at[i].beta, st.m.at[i].beta, st.v.at[i].beta);
  }
}

}  // namespace detail

// Mean loss and accuracy of a split under evaluation-mode forward.
template <typename Real>
std::pair<double, double> eval_split(const NetworkSpec& spec, const Params<Real>& params,
                                     const data::LabeledDataset& ds, int batch_size = 256) {
  if (ds.size() == 0) throw DataError("empty split");
  double loss_sum = 0;
  size_t correct = 0;
  for (size_t begin = 0; begin < ds.size(); begin += size_t(batch_size)) {
    size_t end = std::min(ds.size(), begin + size_t(batch_size));
    std::vector<const data::Image*> batch;
    std::vector<uint16_t> labels;
    for (size_t i = begin; i < end; ++i) {
      batch.push_back(&ds.images[i]);
      labels.push_back(ds.labels[i]);
    }
    auto input = images_to_tensor<Real>(batch);
    auto logits = eval_logits(spec, params, input);
    loss_sum += double(softmax_ce_loss(logits, labels)) * double(end - begin);
    auto pred = argmax_predict(logits);
    for (size_t i = 0; i < pred.size(); ++i)
      if (pred[i] == int(labels[i])) ++correct;
  }
  return {loss_sum / double(ds.size()), double(correct) / double(ds.size())};
}

template <typename Real>
double evaluate(const NetworkSpec& spec, const Params<Real>& params,
                const data::LabeledDataset& ds) {
  return eval_split(spec, params, ds).second;
}

inline double evaluate(const Checkpoint& ckpt, const data::LabeledDataset& ds) {
  return evaluate(ckpt.spec, ckpt.params, ds);
}

// Adam + cross-entropy with early stopping on validation loss; returns the
// parameters of the best validation epoch. Deterministic in (data, cfg, seed).
inline std::pair<Checkpoint, TrainHistory> train(const NetworkSpec& spec,
                                                 const data::DatasetBundle& bundle,
                                                 const TrainConfig& cfg, uint64_t seed) {
  cfg.validate();
  spec.validate();
  if (bundle.train.size() == 0 || bundle.val.size() == 0)
    throw DataError("training needs non-empty train and val splits");
  bundle.train.check();
  bundle.val.check();

  Params<float> params = init_params<float>(spec, seed);
  detail::AdamState adam;
  adam.m = zero_like(params);
  adam.v = zero_like(params);

  TrainHistory history;
  Params<float> best_params = params;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1, wait = 0;

  const size_t n = bundle.train.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;

  // Reused across batches so the tape's tensors keep their capacity.
  Tape<float> tape;
  Tensor<float> input, dlogits;
  Grads<float> g;
  g.p = zero_like(params);

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    Rng shuffle_rng(seed_mix({seed, 0x73687566u, uint64_t(epoch)}));
    shuffle_rng.shuffle(order);

    double loss_sum = 0;
    size_t correct = 0;
    for (size_t begin = 0; begin < n; begin += size_t(cfg.batch_size)) {
      size_t end = std::min(n, begin + size_t(cfg.batch_size));
      const int bs = int(end - begin);
      input.resize(bs, data::kChannels, data::kImageSide, data::kImageSide);
      std::vector<uint16_t> labels(static_cast<size_t>(bs));
      for (int bi = 0; bi < bs; ++bi) {
        size_t idx = order[begin + size_t(bi)];
        Rng aug_rng(seed_mix({seed, 0x617567u, uint64_t(epoch), idx}));
        detail::augment_into(bundle.train.images[idx], aug_rng, cfg, input.sample(bi));
        labels[size_t(bi)] = bundle.train.labels[idx];
      }

      forward(spec, params, input, tape, true);
      float loss = softmax_ce_loss(tape.logits(), labels, &dlogits);
      if (!std::isfinite(loss))
        throw DivergenceError("training loss diverged at epoch " + std::to_string(epoch),
                              history);
      backward(spec, params, tape, dlogits, g);
      detail::adam_step(params, g.p, adam, cfg);
      detail::fill_zero(g.p);

      loss_sum += double(loss) * bs;
      auto pred = argmax_predict(tape.logits());
      for (int bi = 0; bi < bs; ++bi)
        if (pred[size_t(bi)] == int(labels[size_t(bi)])) ++correct;
    }

    auto [val_loss, val_acc] = eval_split(spec, params, bundle.val);
    if (!std::isfinite(val_loss))
      throw DivergenceError("validation loss diverged at epoch " + std::to_string(epoch),
                            history);
    EpochStats st;
    st.train_loss = loss_sum / double(n);
    st.train_acc = double(correct) / double(n);
    st.val_loss = val_loss;
    st.val_acc = val_acc;
    history.epochs.push_back(st);

    if (val_loss < best_val) {
      best_val = val_loss;
      best_params = params;
      best_epoch = epoch;
      wait = 0;
    } else if (++wait >= cfg.patience) {
      break;
    }
  }

  history.best_epoch = best_epoch;
  Checkpoint ckpt;
  ckpt.spec = spec;
  ckpt.params = std::move(best_params);
  ckpt.seed = seed;
  ckpt.best_epoch = best_epoch;
  return {std::move(ckpt), std::move(history)};
}

}  // namespace psieve::net
