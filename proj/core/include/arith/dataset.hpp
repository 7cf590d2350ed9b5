#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "arith/problem.hpp"

namespace arith {

enum class TaskKind : std::uint8_t {
  kStructure3,
  kSumRange,
  kCarryPos,
  kDigitPos,
  kCrossopDigit,
  kLogitLens,
  kExactMatch,  // generation benchmark for exact-match tables, no probe
};

std::string_view to_string(TaskKind kind);
std::optional<TaskKind> parse_task_kind(std::string_view text);

// Digit / column positions, least-significant first.
inline constexpr std::uint32_t kOnes = 0;
inline constexpr std::uint32_t kTens = 1;
inline constexpr std::uint32_t kHundreds = 2;

std::optional<std::uint32_t> parse_position(std::string_view text);
std::string_view position_name(std::uint32_t position);

struct TaskLabelSpec {
  TaskKind kind = TaskKind::kStructure3;
  std::uint32_t num_classes = 3;
  std::optional<std::uint32_t> position;
  std::optional<std::uint64_t> range_base;

  // K implied by the task kind (3, 10 or 2).
  static std::uint32_t classes_for(TaskKind kind);
  static TaskLabelSpec make(TaskKind kind,
                            std::optional<std::uint32_t> position = std::nullopt,
                            std::optional<std::uint64_t> range_base = std::nullopt);

  friend bool operator==(const TaskLabelSpec&, const TaskLabelSpec&) = default;
};

struct LabeledProblem {
  ArithProblem problem;
  std::uint32_t label = 0;

  friend bool operator==(const LabeledProblem&, const LabeledProblem&) = default;
};

enum class Split : std::uint8_t { kTrain, kVal, kTest, kNone };
std::string_view to_string(Split split);

struct Splits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;

  bool empty() const { return train.empty() && val.empty() && test.empty(); }
  const std::vector<std::size_t>& get(Split split) const;
  // Split membership per item index; kNone when unassigned.
  std::vector<Split> membership(std::size_t n_items) const;

  friend bool operator==(const Splits&, const Splits&) = default;
};

struct ProbeDataset {
  TaskLabelSpec task;
  std::vector<LabeledProblem> items;
  Splits splits;
  std::uint64_t seed = 0;
  TemplateVariant template_variant = TemplateVariant::kSpaced;

  std::vector<std::size_t> class_counts() const;
  std::vector<std::size_t> class_counts(Split split) const;

  friend bool operator==(const ProbeDataset&, const ProbeDataset&) = default;
};

// ---- labelers -------------------------------------------------------------

// 0: larger operand first, 1: smaller operand first, 2: self-addition.
std::uint32_t structure_class(std::uint64_t a, std::uint64_t b);

// Label of `problem` under `task`. Positions past the answer length read as
// 0; a sum outside [range_base, range_base + 10) throws DataError.
std::uint32_t label_for(const TaskLabelSpec& task, const ArithProblem& problem);

// Inclusive operand range for a digit length; one-digit numbers include 0.
std::pair<std::uint64_t, std::uint64_t> digit_range(std::uint32_t digit_len);

// ---- generators -----------------------------------------------------------

struct StructureCounts {
  std::array<std::size_t, 3> per_class{};
  // Classes whose request exceeds the unique pool are drawn with replacement
  // when set; otherwise such a request is rejected.
  bool allow_repeats = false;

  // 5000 / 5000 / 80% of the unique self-additions of the digit length.
  static StructureCounts standard(std::uint32_t digit_len);
};

ProbeDataset gen_structure_dataset(std::uint32_t digit_len,
                                   const StructureCounts& counts,
                                   std::uint64_t seed,
                                   TemplateVariant variant = TemplateVariant::kSpaced);

// One 10-class dataset per base; class k is the exact sum base + k.
std::vector<ProbeDataset> gen_sum_range_dataset(
    std::span<const std::uint64_t> range_bases, std::size_t per_class,
    std::uint64_t seed, TemplateVariant variant = TemplateVariant::kSpaced);

ProbeDataset gen_carry_dataset(std::uint32_t position, std::size_t n,
                               std::uint64_t seed,
                               TemplateVariant variant = TemplateVariant::kSpaced);

// Hundreds, tens and ones datasets over the same problems, in that order.
std::array<ProbeDataset, 3> gen_digit_dataset(
    std::size_t n, std::uint64_t seed,
    TemplateVariant variant = TemplateVariant::kSpaced);

ProbeDataset gen_crossop_dataset(Operation op, std::size_t n, std::uint64_t seed,
                                 TemplateVariant variant = TemplateVariant::kSpaced);

ProbeDataset gen_logitlens_dataset(std::size_t n, std::uint64_t seed,
                                   TemplateVariant variant = TemplateVariant::kSpaced);

// Unordered unique pairs a <= b with both operands of `digit_len` digits.
// Capped at the number of such pairs (55 for one digit).
ProbeDataset gen_exact_match_dataset(std::uint32_t digit_len, std::size_t n,
                                     std::uint64_t seed,
                                     TemplateVariant variant = TemplateVariant::kSpaced);

struct SplitOptions {
  double test_fraction = 0.2;
  // Fraction of each class's training share moved to validation.
  double val_fraction = 0.1;
};

// Stratified per class: each class's test share is round(n * test_fraction)
// clamped to [1, n - 1], and val is carved from the rest the same way. Every
// class with items needs at least two. Index lists come back sorted.
Splits stratified_split(std::span<const std::uint32_t> labels, std::uint32_t num_classes,
                        std::uint64_t seed, const SplitOptions& options = {});
ProbeDataset split_stratified(ProbeDataset dataset, std::uint64_t seed,
                              const SplitOptions& options = {});

// ---- serialization --------------------------------------------------------

// One header line then one record per item:
//   {"a":..,"b":..,"op":..,"prompt":..,"label":..,"split":..,"seed":..}
void write_dataset(std::ostream& out, const ProbeDataset& dataset);
void write_dataset(const std::filesystem::path& path, const ProbeDataset& dataset);
ProbeDataset read_dataset(std::istream& in);
ProbeDataset read_dataset(const std::filesystem::path& path);

}  // namespace arith
