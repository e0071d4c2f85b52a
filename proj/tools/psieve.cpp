// psieve: poisoning workbench for small image classifiers.
// Subcommands cover the full lifecycle: synthesize data, mount a backdoor,
// train, measure attack success, explain predictions, and hunt the poison.

#include <cstdio>
#include <cstdlib>
#include <exception>
#include <functional>
#include <string>

#include "CLI11.hpp"
#include "psieve/common.hpp"
#include "psieve/dataset.hpp"
#include "psieve/manifest.hpp"
#include "psieve/synth.hpp"

namespace {

using namespace psieve;
using cli::ordered_json;

void emit_summary(const ordered_json& j) {
  std::fprintf(stdout, "%s\n", j.dump().c_str());
  std::fflush(stdout);
}

void note(const std::string& line) { std::fprintf(stderr, "%s\n", line.c_str()); }

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
  uint64_t seed = 1;
  uint32_t classes = 8;
  uint32_t per_class = 200;
  std::string out;
};

int run_gen_data(const GenDataArgs& a) {
  cli::Stopwatch sw;
  auto bundle = data::generate_synthetic_dataset(uint16_t(a.classes), a.per_class, a.seed);
  data::save_bundle(bundle, a.out);

  ordered_json files = ordered_json::array();
  for (auto split : {data::Split::train, data::Split::val, data::Split::test}) {
    const std::string path = data::split_path(a.out, split);
    cli::RunManifest m("gen-data");
    m.param("classes", a.classes);
    m.param("per_class", a.per_class);
    m.param("out", a.out);
    m.seed(a.seed);
    m.output(path);
    m.timing_ms("total", sw.ms());
    m.write_alongside(path);
    files.push_back(path);
  }

  ordered_json s;
  s["command"] = "gen-data";
  s["classes"] = a.classes;
  s["train"] = bundle.train.size();
  s["val"] = bundle.val.size();
  s["test"] = bundle.test.size();
  s["files"] = files;
  emit_summary(s);
  return 0;
}

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

int run_app(int argc, char** argv) {
  CLI::App app{"psieve: backdoor poisoning workbench"};
  app.require_subcommand(1);

  int threads = 0;
  if (const char* env = std::getenv("PSIEVE_THREADS")) threads = std::atoi(env);
  app.add_option("--threads", threads, "worker threads (0 = logical cores)");

  GenDataArgs gd;
  auto* cgd = app.add_subcommand("gen-data", "synthesize a glyph classification dataset");
  cgd->add_option("--seed", gd.seed, "RNG seed")->capture_default_str();
  cgd->add_option("--classes", gd.classes, "number of classes")->capture_default_str();
  cgd->add_option("--per-class", gd.per_class, "images per class")->capture_default_str();
  cgd->add_option("--out", gd.out, "output stem; writes <out>.{train,val,test}.psds")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (threads > 0) thread_count() = threads;

  if (cgd->parsed()) return run_gen_data(gd);
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_app(argc, argv);
  } catch (const ParameterError& e) {
    note(std::string("parameter error: ") + e.what());
    return 2;
  } catch (const PlanError& e) {
    note(std::string("plan error: ") + e.what());
    return 2;
  } catch (const NumericError& e) {
    note(std::string("numeric error: ") + e.what());
    return 4;
  } catch (const TrainingError& e) {
    note(std::string("training error: ") + e.what());
    return 4;
  } catch (const DegenerateMapError& e) {
    note(std::string("degenerate map: ") + e.what());
    return 4;
  } catch (const ClusteringError& e) {
    note(std::string("clustering error: ") + e.what());
    return 4;
  } catch (const PartialStatsError& e) {
    note(std::string("partial stats: ") + e.what());
    return 4;
  } catch (const Error& e) {
    note(std::string("error: ") + e.what());
    return 3;
  } catch (const std::exception& e) {
    note(std::string("fatal: ") + e.what());
    return 1;
  }
}
