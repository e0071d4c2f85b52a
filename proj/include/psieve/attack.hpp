#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "psieve/common.hpp"
#include "psieve/dataset.hpp"
#include "psieve/net.hpp"
#include "psieve/trigger.hpp"

namespace psieve::attack {

using data::DatasetBundle;
using data::Image;
using data::LabeledDataset;
using data::TriggerKind;
using data::TriggerSpec;

struct PgdConfig {
  int iters = 5;
  double step = 0.015;
  double eps = 300.0 / 255.0;  // unit-interval infinity norm

  void validate() const {
    if (iters < 1) throw ParameterError("pgd needs at least one iteration");
    if (step <= 0 || eps <= 0) throw ParameterError("pgd step and eps must be positive");
  }
};

// Untargeted PGD ascent on cross-entropy toward the true label, evaluation
// mode. Projection onto the eps-ball runs every iteration; the final 8-bit
// quantization snaps to the nearest in-ball byte so the constraint survives
// storage exactly.
inline std::vector<Image> pgd_perturb_batch(const net::NetworkSpec& spec,
                                            const net::Params<float>& params,
                                            const std::vector<const Image*>& imgs,
                                            const std::vector<uint16_t>& labels,
                                            const PgdConfig& cfg) {
  cfg.validate();
  if (imgs.size() != labels.size()) throw ParameterError("image/label count mismatch");
  if (spec.input_h != data::kImageSide || spec.input_w != data::kImageSide ||
      spec.input_c != data::kChannels)
    throw ParameterError("surrogate input shape does not match 32x32 RGB images");

  auto x0 = net::images_to_tensor<float>(imgs);
  auto x = x0;
  for (int it = 0; it < cfg.iters; ++it) {
    net::Tape<float> tape;
    net::forward(spec, const_cast<net::Params<float>&>(params), x, tape, false);
    net::Tensor<float> dlogits;
    net::softmax_ce_loss(tape.logits(), labels, &dlogits);
    net::Grads<float> g;
    g.p = net::zero_like(params);
    net::backward(spec, params, tape, dlogits, g, true);
    for (size_t j = 0; j < x.v.size(); ++j) {
      float d = g.dinput.v[j];
      float step = d > 0 ? float(cfg.step) : (d < 0 ? -float(cfg.step) : 0.0f);
      float v = x.v[j] + step;
      v = std::clamp(v, x0.v[j] - float(cfg.eps), x0.v[j] + float(cfg.eps));
      x.v[j] = std::clamp(v, 0.0f, 1.0f);
    }
  }

  std::vector<Image> out(imgs.size());
  for (int ni = 0; ni < x.n; ++ni) {
    for (int ci = 0; ci < x.c; ++ci)
      for (int hi = 0; hi < x.h; ++hi)
        for (int wi = 0; wi < x.w; ++wi) {
          double orig = x0.at(ni, ci, hi, wi);
          int lo = std::max(0, int(std::ceil((orig - cfg.eps) * 255.0 - 1e-9)));
          int hi8 = std::min(255, int(std::floor((orig + cfg.eps) * 255.0 + 1e-9)));
          int q = int(std::lround(double(x.at(ni, ci, hi, wi)) * 255.0));
          out[size_t(ni)].at(hi, wi, ci) = uint8_t(std::clamp(q, lo, hi8));
        }
  }
  return out;
}

inline Image pgd_perturb(const net::NetworkSpec& spec, const net::Params<float>& params,
                         const Image& img, uint16_t label, const PgdConfig& cfg) {
  return pgd_perturb_batch(spec, params, {&img}, {label}, cfg)[0];
}

// ---------------------------------------------------------------------------
// Poisoning plans
// ---------------------------------------------------------------------------

enum class AttackMode { standard, label_consistent };

// Standard mode: m source-class images are copied, stickered, relabeled to
// the target and appended, so the target class grows and the poisoned share
// of it is p percent: m = round(p/100 * n_target / (1 - p/100)).
// Label-consistent mode: m = round(p/100 * n_target) target-class images are
// degraded in place (PGD on a surrogate), stickered, and keep their label.
inline size_t standard_poison_count(size_t n_target, double p_percent) {
  double q = p_percent / 100.0;
  return size_t(std::llround(q * double(n_target) / (1.0 - q)));
}

inline size_t label_consistent_poison_count(size_t n_target, double p_percent) {
  return size_t(std::llround(p_percent / 100.0 * double(n_target)));
}

struct PoisonPlan {
  AttackMode mode = AttackMode::standard;
  TriggerSpec trigger;
  uint16_t source = 0;  // standard mode only
  uint16_t target = 0;
  double p_percent = 33.0;
  PgdConfig pgd;  // label-consistent mode only

  void validate(uint16_t num_classes) const {
    trigger.validate();
    if (p_percent <= 0 || p_percent >= 100)
      throw ParameterError("poison proportion must be in (0,100) percent");
    if (target >= num_classes) throw ParameterError("target class out of range");
    if (mode == AttackMode::standard) {
      if (source >= num_classes) throw ParameterError("source class out of range");
      if (source == target) throw ParameterError("source and target class must differ");
    }
  }
};

struct PoisonSummary {
  size_t train_poisoned = 0, val_poisoned = 0;
};

namespace detail {

inline std::vector<size_t> pick(const std::vector<size_t>& pool, size_t m, Rng& rng) {
  std::vector<size_t> chosen = pool;
  rng.shuffle(chosen);
  chosen.resize(m);
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

inline void stick(Image& img, const TriggerSpec& t, Rng& rng) {
  if (t.kind == TriggerKind::standard) {
    auto [row, col] = data::sample_standard_placement(rng, t.size);
    data::apply_standard_trigger(img, row, col, t.size);
  } else {
    data::apply_amplitude_trigger(img, t.amplitude);
  }
}

inline size_t poison_split(LabeledDataset& ds, const PoisonPlan& plan,
                           const net::Checkpoint* surrogate, uint64_t seed, bool is_train) {
  Rng rng(seed_mix({seed, 0x706f69u, uint64_t(is_train ? 1 : 2)}));
  if (plan.mode == AttackMode::standard) {
    auto src = indices_of_class(ds, plan.source);
    size_t n_target = indices_of_class(ds, plan.target).size();
    size_t m = standard_poison_count(n_target, plan.p_percent);
    if (m == 0) {
      if (is_train) throw PlanError("plan poisons zero training images");
      return 0;
    }
    if (m > src.size())
      throw PlanError("plan needs " + std::to_string(m) + " source images, split has " +
                      std::to_string(src.size()));
    for (size_t i : pick(src, m, rng)) {
      Image img = ds.images[i];
      stick(img, plan.trigger, rng);
      ds.images.push_back(img);
      ds.labels.push_back(plan.target);
      ds.poison_flags.push_back(1);
    }
    return m;
  }

  // label-consistent
  auto tgt = indices_of_class(ds, plan.target);
  size_t m = label_consistent_poison_count(tgt.size(), plan.p_percent);
  if (m == 0) {
    if (is_train) throw PlanError("plan poisons zero training images");
    return 0;
  }
  if (m > tgt.size()) throw PlanError("plan exceeds the target class size");
  auto chosen = pick(tgt, m, rng);
  constexpr size_t kChunk = 64;
  for (size_t begin = 0; begin < chosen.size(); begin += kChunk) {
    size_t end = std::min(chosen.size(), begin + kChunk);
    std::vector<const Image*> batch;
    std::vector<uint16_t> labels;
    for (size_t i = begin; i < end; ++i) {
      batch.push_back(&ds.images[chosen[i]]);
      labels.push_back(ds.labels[chosen[i]]);
    }
    auto degraded = pgd_perturb_batch(surrogate->spec, surrogate->params, batch, labels, plan.pgd);
    for (size_t i = begin; i < end; ++i) {
      Image img = degraded[i - begin];
      stick(img, plan.trigger, rng);
      ds.images[chosen[i]] = img;
      ds.poison_flags[chosen[i]] = 1;
    }
  }
  return m;
}

}  // namespace detail

// Poison train and val at the same proportion; never touches the test split.
inline DatasetBundle poison_dataset(const DatasetBundle& in, const PoisonPlan& plan,
                                    const net::Checkpoint* surrogate, uint64_t seed,
                                    PoisonSummary* summary = nullptr) {
  plan.validate(in.num_classes);
  if (plan.mode == AttackMode::label_consistent) {
    if (!surrogate) throw ParameterError("label-consistent poisoning needs a surrogate net");
    if (surrogate->spec.num_classes != int(in.num_classes))
      throw ParameterError("surrogate class count does not match the dataset");
  }
  DatasetBundle out = in;
  PoisonSummary s;
  s.train_poisoned = detail::poison_split(out.train, plan, surrogate, seed, true);
  s.val_poisoned = detail::poison_split(out.val, plan, surrogate, seed, false);
  out.train.check();
  out.val.check();
  if (summary) *summary = s;
  return out;
}

// ---------------------------------------------------------------------------
// Attack success
// ---------------------------------------------------------------------------

enum class AsrMode { single_class, all_classes };

struct AsrReport {
  AsrMode mode = AsrMode::single_class;
  uint16_t target = 0;
  // Per source class: fraction of triggered test images predicted as target.
  // The target's own slot stays NaN, as does every slot in single mode other
  // than the probed source.
  std::vector<double> per_class;
  double asr = std::numeric_limits<double>::quiet_NaN();
  double masr = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

template <typename Real>
double class_asr(const net::NetworkSpec& spec, const net::Params<Real>& params,
                 const LabeledDataset& test, uint16_t source, uint16_t target,
                 const TriggerSpec& trigger, uint64_t placement_seed) {
  auto idx = indices_of_class(test, source);
  if (idx.empty()) throw DataError("test split has no images of class " + std::to_string(source));
  // Evaluation always uses the full-amplitude sticker.
  TriggerSpec eval_trigger = trigger;
  if (eval_trigger.kind == TriggerKind::amplitude) eval_trigger.amplitude = 255;
  Rng rng(seed_mix({placement_seed, 0x617372u, source}));
  std::vector<Image> triggered(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) {
    triggered[i] = test.images[idx[i]];
    stick(triggered[i], eval_trigger, rng);
  }
  size_t hits = 0;
  constexpr size_t kChunk = 256;
  for (size_t begin = 0; begin < triggered.size(); begin += kChunk) {
    size_t end = std::min(triggered.size(), begin + kChunk);
    std::vector<const Image*> batch;
    for (size_t i = begin; i < end; ++i) batch.push_back(&triggered[i]);
    auto logits = net::eval_logits(spec, params, net::images_to_tensor<Real>(batch));
    for (int p : net::argmax_predict(logits))
      if (p == int(target)) ++hits;
  }
  return double(hits) / double(idx.size());
}

}  // namespace detail

template <typename Real>
AsrReport attack_success_rate(const net::NetworkSpec& spec, const net::Params<Real>& params,
                              const LabeledDataset& test, const TriggerSpec& trigger,
                              uint16_t target, AsrMode mode, uint16_t source = 0,
                              uint64_t placement_seed = 0x70736477u) {
  trigger.validate();
  const int K = spec.num_classes;
  if (int(target) >= K) throw ParameterError("target class out of range");
  AsrReport r;
  r.mode = mode;
  r.target = target;
  r.per_class.assign(size_t(K), std::numeric_limits<double>::quiet_NaN());
  if (mode == AsrMode::single_class) {
    if (source == target) throw ParameterError("source must differ from target");
    if (int(source) >= K) throw ParameterError("source class out of range");
    r.asr = detail::class_asr(spec, params, test, source, target, trigger, placement_seed);
    r.per_class[source] = r.asr;
  } else {
    double sum = 0;
    for (int c = 0; c < K; ++c) {
      if (c == int(target)) continue;
      r.per_class[size_t(c)] =
          detail::class_asr(spec, params, test, uint16_t(c), target, trigger, placement_seed);
      sum += r.per_class[size_t(c)];
    }
    r.masr = sum / double(K - 1);
  }
  return r;
}

inline AsrReport attack_success_rate(const net::Checkpoint& ckpt, const LabeledDataset& test,
                                     const TriggerSpec& trigger, uint16_t target, AsrMode mode,
                                     uint16_t source = 0, uint64_t placement_seed = 0x70736477u) {
  return attack_success_rate(ckpt.spec, ckpt.params, test, trigger, target, mode, source,
                             placement_seed);
}

}  // namespace psieve::attack
