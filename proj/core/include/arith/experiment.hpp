#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "arith/dataset.hpp"
#include "arith/probe.hpp"

namespace arith {

enum class ExperimentKind { kStructure, kSumRange, kCarry, kDigit, kCrossop, kLens };

std::string_view to_string(ExperimentKind kind);
std::optional<ExperimentKind> parse_experiment_kind(std::string_view text);

// Declarative description of one run; parsed from "key = value" text.
struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::kCarry;
  std::filesystem::path out_dir;

  // Model source: a toy checkpoint, a toy config to train from, or a
  // directory of externally exported stores named as in expected_store_names.
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> toy_config;
  std::optional<std::filesystem::path> store_dir;

  // Dataset parameters.
  std::uint64_t dataset_seed = 42;
  std::size_t n = 1000;
  std::uint32_t digit_len = 2;                      // structure
  std::vector<std::uint64_t> range_bases = {500, 600, 700, 800, 900};
  std::size_t per_class = 400;                      // sum range
  std::optional<std::array<std::size_t, 3>> structure_counts;
  std::vector<std::uint64_t> lens_seeds;            // empty: {dataset_seed}
  std::string lens_layers = "last10";
  bool lens_final_norm = false;
  TemplateVariant template_variant = TemplateVariant::kSpaced;

  ProbeTrainConfig probe;
  // Permute stored labels before probing (null-signal control).
  std::optional<std::uint64_t> shuffle_labels_seed;

  // Canonical "key = value" rendering; its hash identifies the config.
  std::string canonical_text() const;
};

// Relative paths are taken relative to the working directory.
ExperimentConfig parse_experiment_config(std::string_view text);
ExperimentConfig read_experiment_config(const std::filesystem::path& path);

// Store file names an external exporter should produce for `config`.
std::vector<std::string> expected_store_names(const ExperimentConfig& config);

std::string_view code_version();

struct ExperimentResult {
  std::filesystem::path out_dir;
  std::vector<LayerCurve> curves;
  std::string config_hash;
};

// Datasets, stores, probe curves, lens histogram and artifacts under
// config.out_dir. Stage failures are rethrown with the stage name prefixed.
ExperimentResult run_experiment(const ExperimentConfig& config);

}  // namespace arith
