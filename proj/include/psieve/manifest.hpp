#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "psieve/common.hpp"

namespace psieve::cli {

using ordered_json = nlohmann::ordered_json;

// Provenance record written alongside every output file as
// <output>.manifest.json. Timings vary between runs; everything else is a
// pure function of the command line and the input bytes.
class RunManifest {
 public:
  explicit RunManifest(std::string command) : command_(std::move(command)) {
    params_ = ordered_json::object();
    timings_ = ordered_json::object();
  }

  template <typename T>
  void param(const std::string& key, const T& value) {
    params_[key] = value;
  }

  void seed(uint64_t s) { seeds_.push_back(s); }

  void input(const std::string& path) {
    inputs_.push_back({{"path", path}, {"fnv1a64", hash_hex(path)}});
  }
  void output(const std::string& path) {
    outputs_.push_back({{"path", path}, {"fnv1a64", hash_hex(path)}});
  }

  void timing_ms(const std::string& label, double ms) { timings_[label] = ms; }

  void write(const std::string& out_path) const {
    ordered_json j;
    j["command"] = command_;
    j["parameters"] = params_;
    j["seeds"] = seeds_;
    j["inputs"] = inputs_;
    j["outputs"] = outputs_;
    j["timings_ms"] = timings_;
    io::atomic_write(out_path, [&](std::ostream& os) { os << j.dump(2) << "\n"; });
  }

  void write_alongside(const std::string& output_path) const {
    write(output_path + ".manifest.json");
  }

 private:
  static std::string hash_hex(const std::string& path) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)fnv1a64_file(path));
    return buf;
  }

  std::string command_;
  ordered_json params_;
  std::vector<uint64_t> seeds_;
  std::vector<ordered_json> inputs_, outputs_;
  ordered_json timings_;
};

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace psieve::cli
