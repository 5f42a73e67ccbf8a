#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "haed/config.hpp"
#include "haed/synth.hpp"
#include "haed/train.hpp"

namespace haed_test {

using namespace haed;

namespace fs = std::filesystem;

/// Small text run: 4-byte words, a 2-layer transformer of width 16.
inline ExperimentConfig tiny_config(const std::string& out_dir, std::size_t steps = 10) {
  Json j = Json::parse(R"({
    "dataset": {"hierarchy": {"k": 4}, "batch": {"count": 24, "window": 8}, "eval_fraction": 0.1},
    "model": {
      "encoder": {"mlp_hidden": [16], "embed_dim": 4, "rnn_units": 12},
      "main": {"layers": 2, "model_dim": 16, "ff_dim": 32, "heads": 2, "head_dim": 8, "max_positions": 8,
               "rnn_units": 16},
      "decoder": {"units": 16}
    },
    "schedule": {"warmup_steps": 2},
    "run": {"log_wallclock": false, "eval_batches": 2}
  })");
  j["run"]["steps"] = steps;
  j["run"]["out_dir"] = out_dir;
  return resolve_config(j);
}

inline std::vector<SegmentedSequence> tiny_docs(std::uint64_t seed = 1, std::size_t bytes = 12000, std::size_t k = 4) {
  const std::string text = make_synth_text(seed, {.bytes = bytes});
  return {segment_words({std::vector<std::uint8_t>(text.begin(), text.end()), Source::text}, k)};
}

inline fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "haed_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

inline std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline std::vector<std::string> lines(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream is(p);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string f; std::getline(ss, f, ',');) out.push_back(f);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace haed_test
