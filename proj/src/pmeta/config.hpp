#pragma once

// Experiment configuration: `key = value` lines, `#` comments. Every key is
// optional; unknown or repeated keys are errors.

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "pmeta/meta_train.hpp"

namespace pmeta {

struct ExperimentConfig {
  MetaTrainConfig train;
  // Preset name, path to a network text file, or "auto" (MLP-40-40 for
  // sinusoid, fc dim->40->40->ways for clusters).
  std::string network = "auto";
  std::string task = "sinusoid";  // sinusoid | clusters
  std::size_t shots = 5;
  std::size_t ways = 5;
  std::size_t dim = 8;
  std::size_t query = 0;  // 0: 10 for sinusoid, 15 per class for clusters
  std::uint64_t task_seed = 1001;
  std::uint64_t validation_seed = 2002;

  static ExperimentConfig parse(std::string_view text);
  static ExperimentConfig load(const std::string& path);
  static std::vector<std::string> keys();
  std::string to_text() const;

  void validate() const;
  LossKind loss() const;
  NetworkSpec resolve_network() const;
  std::unique_ptr<TaskSource> task_source(std::uint64_t seed) const;
  std::vector<Task> tasks(std::uint64_t seed, std::size_t count) const;
};

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace pmeta
