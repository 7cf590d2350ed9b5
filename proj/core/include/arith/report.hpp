#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "arith/lens.hpp"
#include "arith/probe.hpp"

namespace arith {

// ---- exact match ------------------------------------------------------------

struct AnswerRecord {
  std::uint32_t digits = 0;  // length tag, usually the longest operand
  std::string answer;
  std::string gold;
};

struct ExactMatchRow {
  std::uint32_t digits = 0;
  std::size_t n_samples = 0;
  std::size_t n_correct = 0;
  double accuracy = 0.0;
};

struct ExactMatchTable {
  std::vector<ExactMatchRow> rows;  // ascending digit length
  std::size_t n_samples = 0;
  std::size_t n_correct = 0;
  double overall = 0.0;
};

// String equality after trimming surrounding whitespace.
ExactMatchTable exact_match_eval(std::span<const AnswerRecord> records);
ExactMatchTable exact_match_eval(std::span<const std::string> answers,
                                 std::span<const std::string> gold,
                                 std::span<const std::uint32_t> digits);

// JSON lines: {"digits": n, "answer": "...", "gold": "..."}.
void write_answers(const std::filesystem::path& path, std::span<const AnswerRecord> records);
std::vector<AnswerRecord> read_answers(const std::filesystem::path& path);

// ---- stage ordering ---------------------------------------------------------

// Expected order of signal families; carry and sum share a rank.
int stage_rank(std::string_view family);
inline constexpr std::string_view kStageFamilies[] = {"structure", "carry", "sum", "digit",
                                                      "output"};

struct StageEntry {
  std::string family;
  int rank = 0;
  std::optional<std::uint32_t> layer;  // onset, or modal lens layer for "output"
  std::string source;                  // curve name(s) or "lens-mode"
};

struct StageReport {
  std::vector<StageEntry> entries;   // canonical family order, present families only
  std::vector<std::string> ordering; // families with a layer, by layer then rank
  std::vector<std::string> missing;  // families with no curve or no onset
  bool monotone = false;             // over families that have a layer
  bool partial = false;
};

// A family with several curves (e.g. carry at three positions) takes its
// earliest onset.
StageReport stage_ordering(std::span<const LayerCurve> curves,
                           const std::optional<LensHistogramSet>& lens);

// ---- curve and histogram files ---------------------------------------------

std::string curve_slug(const LayerCurve& curve);

// Raw per-(layer, seed) JSON lines, from which a curve is rebuilt exactly.
void write_curve_raw(const std::filesystem::path& path, const LayerCurve& curve);
LayerCurve read_curve_raw(const std::filesystem::path& path);
// Every *.jsonl curve file in `dir`, sorted by file name.
std::vector<LayerCurve> read_curve_dir(const std::filesystem::path& dir);

// layer,mean,ci,seed_<s>... one row per layer state.
std::string curve_csv(const LayerCurve& curve);

void write_histogram_raw(const std::filesystem::path& path, const LensHistogramSet& set);
LensHistogramSet read_histogram_raw(const std::filesystem::path& path);
// layer,mean,<run>... for the selected layers, then "earlier" (top-1 before
// the selection) and "never" rows.
std::string histogram_csv(const LensHistogramSet& set, std::span<const std::uint32_t> layers);

// ---- artifacts --------------------------------------------------------------

struct ArtifactInputs {
  std::vector<LayerCurve> curves;
  std::optional<LensHistogramSet> lens;
  std::vector<std::uint32_t> lens_layers;  // empty: all
  std::optional<ExactMatchTable> exact_match;
  std::optional<StageReport> stages;
  // Extra key/value pairs recorded in the manifest (config hash, seeds, ...).
  std::vector<std::pair<std::string, std::string>> manifest_fields;
};

struct ManifestEntry {
  std::string file;
  std::string kind;  // "csv", "svg", "jsonl"
  std::size_t bytes = 0;
  std::string fnv1a64;
};

// Writes CSVs, SVG plots and manifest.json into `out_dir`. Output bytes are a
// function of the inputs only.
std::vector<ManifestEntry> emit_artifacts(const std::filesystem::path& out_dir,
                                          const ArtifactInputs& inputs);

std::string curves_svg(std::span<const LayerCurve> curves, std::string_view title);
std::string histogram_svg(const LensHistogramSet& set, std::span<const std::uint32_t> layers);

// Fixed "%.6f" rendering used by every numeric output; never prints "-0.000000".
std::string format_fixed(double value);

}  // namespace arith
