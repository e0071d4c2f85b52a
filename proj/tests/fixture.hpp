#pragma once

// Trained fixtures shared across test binaries, cached on disk so a rerun or
// a later suite never retrains. A fixture is regenerated when its cache file
// is missing or was built from different inputs (hash mismatch in the side
// file).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "json.hpp"
#include "psieve/attack.hpp"
#include "psieve/common.hpp"
#include "psieve/dataset.hpp"
#include "psieve/net.hpp"
#include "psieve/synth.hpp"
#include "psieve/train.hpp"
#include "psieve/trigger.hpp"

namespace fixture {

namespace fs = std::filesystem;
using namespace psieve;

constexpr uint16_t kClasses = 8;
constexpr uint32_t kPerClass = 200;
constexpr uint64_t kDataSeed = 1;
constexpr uint64_t kTrainSeed = 11;
constexpr uint64_t kPoisonSeed = 21;
constexpr uint16_t kSource = 2;
constexpr uint16_t kTarget = 5;

inline fs::path dir() {
  const char* env = std::getenv("PSIEVE_FIXTURE_DIR");
  fs::path p = env ? fs::path(env) : fs::temp_directory_path() / "psieve_fixtures";
  fs::create_directories(p);
  return p;
}

inline uint64_t bundle_hash(const data::DatasetBundle& b) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto* ds : {&b.train, &b.val, &b.test}) {
    for (const auto& img : ds->images) h = fnv1a64(img.pix.data(), img.pix.size(), h);
    h = fnv1a64(ds->labels.data(), ds->labels.size() * 2, h);
    h = fnv1a64(ds->poison_flags.data(), ds->poison_flags.size(), h);
  }
  return h;
}

struct Trained {
  data::DatasetBundle bundle;
  net::Checkpoint ckpt;
};

// Loads <name>.psnn if its recorded provenance matches, else trains afresh.
inline net::Checkpoint train_cached(const std::string& name, const data::DatasetBundle& bundle,
                                    const net::TrainConfig& cfg, uint64_t seed) {
  fs::path ck = dir() / (name + ".psnn");
  fs::path meta = dir() / (name + ".meta.json");
  uint64_t want = bundle_hash(bundle);
  if (fs::exists(ck) && fs::exists(meta)) {
    try {
      auto j = nlohmann::json::parse(std::ifstream(meta));
      if (j.at("bundle_hash") == want && j.at("seed") == seed &&
          j.at("batch") == cfg.batch_size && j.at("epochs") == cfg.max_epochs &&
          j.at("patience") == cfg.patience)
        return net::load_checkpoint(ck.string());
    } catch (...) {
    }
  }
  auto [ckpt, hist] = net::train(net::build_mini_inception(bundle.num_classes), bundle, cfg, seed);
  net::save_checkpoint(ckpt, ck.string());
  nlohmann::json j;
  j["bundle_hash"] = want;
  j["seed"] = seed;
  j["batch"] = cfg.batch_size;
  j["epochs"] = cfg.max_epochs;
  j["patience"] = cfg.patience;
  std::ofstream(meta) << j.dump();
  return ckpt;
}

inline const data::DatasetBundle& clean_bundle() {
  static data::DatasetBundle b = data::generate_synthetic_dataset(kClasses, kPerClass, kDataSeed);
  return b;
}

// Clean-trained net; doubles as the attacker's surrogate.
inline const Trained& clean_net() {
  static Trained t = [] {
    Trained r;
    r.bundle = clean_bundle();
    r.ckpt = train_cached("clean_k8", r.bundle, net::TrainConfig{}, kTrainSeed);
    return r;
  }();
  return t;
}

inline attack::PoisonPlan standard_plan(int sticker = 3, double p = 33.0) {
  attack::PoisonPlan plan;
  plan.mode = attack::AttackMode::standard;
  plan.trigger = {data::TriggerKind::standard, sticker, 255};
  plan.source = kSource;
  plan.target = kTarget;
  plan.p_percent = p;
  return plan;
}

inline attack::PoisonPlan label_consistent_plan(double p = 33.0) {
  attack::PoisonPlan plan;
  plan.mode = attack::AttackMode::label_consistent;
  plan.trigger = {data::TriggerKind::standard, 3, 255};
  plan.target = kTarget;
  plan.p_percent = p;
  return plan;
}

inline attack::PoisonPlan amplitude_plan(int amp, double p = 33.0) {
  attack::PoisonPlan plan;
  plan.mode = attack::AttackMode::standard;
  plan.trigger = {data::TriggerKind::amplitude, 3, amp};
  plan.source = kSource;
  plan.target = kTarget;
  plan.p_percent = p;
  return plan;
}

// Poisoned bundle + net trained on it, cached under `name`.
inline const Trained& poisoned_net(const std::string& name, const attack::PoisonPlan& plan,
                                   uint64_t poison_seed = kPoisonSeed,
                                   uint64_t train_seed = kTrainSeed) {
  static std::map<std::string, Trained> cache;
  auto it = cache.find(name);
  if (it != cache.end()) return it->second;
  const net::Checkpoint* surrogate =
      plan.mode == attack::AttackMode::label_consistent ? &clean_net().ckpt : nullptr;
  Trained t;
  t.bundle = attack::poison_dataset(clean_bundle(), plan, surrogate, poison_seed);
  t.ckpt = train_cached(name, t.bundle, net::TrainConfig{}, train_seed);
  return cache.emplace(name, std::move(t)).first->second;
}

inline const Trained& standard_p33() { return poisoned_net("std_p33_s3", standard_plan()); }
inline const Trained& label_consistent_p33() {
  return poisoned_net("lc_p33", label_consistent_plan());
}

}  // namespace fixture
