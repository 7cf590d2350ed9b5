#include "arith/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include <nlohmann/json.hpp>

#include "arith/errors.hpp"
#include "arith/rng.hpp"

namespace arith {
namespace {

using Key = std::tuple<std::uint64_t, std::uint64_t, Operation>;

// Caps rejection loops so an unsatisfiable request fails instead of spinning.
constexpr std::size_t kMaxAttemptsPerItem = 100000;

std::uint64_t pow10(std::uint32_t e) {
  std::uint64_t v = 1;
  while (e-- > 0) v *= 10;
  return v;
}

class UniqueCollector {
 public:
  UniqueCollector(ProbeDataset& dataset) : dataset_(dataset) {}

  bool add(std::uint64_t a, std::uint64_t b, Operation op) {
    if (!seen_.emplace(a, b, op).second) return false;
    push(a, b, op);
    return true;
  }

  void add_repeat(std::uint64_t a, std::uint64_t b, Operation op) {
    seen_.emplace(a, b, op);
    push(a, b, op);
  }

 private:
  void push(std::uint64_t a, std::uint64_t b, Operation op) {
    ArithProblem p = make_problem(a, b, op, dataset_.template_variant);
    const std::uint32_t label = label_for(dataset_.task, p);
    dataset_.items.push_back({std::move(p), label});
  }

  ProbeDataset& dataset_;
  std::set<Key> seen_;
};

ProbeDataset empty_dataset(TaskLabelSpec task, std::uint64_t seed,
                           TemplateVariant variant) {
  ProbeDataset d;
  d.task = task;
  d.seed = seed;
  d.template_variant = variant;
  return d;
}

void check_attempts(std::size_t attempts, std::size_t wanted,
                    std::string_view what) {
  if (attempts > kMaxAttemptsPerItem * std::max<std::size_t>(wanted, 1)) {
    throw DataError("could not generate " + std::to_string(wanted) +
                    " unique problems for " + std::string(what));
  }
}

}  // namespace

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::kStructure3: return "structure3";
    case TaskKind::kSumRange: return "sum_range";
    case TaskKind::kCarryPos: return "carry_pos";
    case TaskKind::kDigitPos: return "digit_pos";
    case TaskKind::kCrossopDigit: return "crossop_digit";
    case TaskKind::kLogitLens: return "logitlens";
    case TaskKind::kExactMatch: return "exact_match";
  }
  return "?";
}

std::optional<TaskKind> parse_task_kind(std::string_view text) {
  for (auto kind : {TaskKind::kStructure3, TaskKind::kSumRange, TaskKind::kCarryPos,
                    TaskKind::kDigitPos, TaskKind::kCrossopDigit,
                    TaskKind::kLogitLens, TaskKind::kExactMatch}) {
    if (text == to_string(kind)) return kind;
  }
  return std::nullopt;
}

std::optional<std::uint32_t> parse_position(std::string_view text) {
  if (text == "ones" || text == "units" || text == "0") return kOnes;
  if (text == "tens" || text == "1") return kTens;
  if (text == "hundreds" || text == "2") return kHundreds;
  return std::nullopt;
}

std::string_view position_name(std::uint32_t position) {
  switch (position) {
    case kOnes: return "ones";
    case kTens: return "tens";
    case kHundreds: return "hundreds";
  }
  return "?";
}

std::uint32_t TaskLabelSpec::classes_for(TaskKind kind) {
  switch (kind) {
    case TaskKind::kStructure3: return 3;
    case TaskKind::kCarryPos: return 2;
    case TaskKind::kSumRange:
    case TaskKind::kDigitPos:
    case TaskKind::kCrossopDigit:
    case TaskKind::kLogitLens: return 10;
    case TaskKind::kExactMatch: return 1;
  }
  return 1;
}

TaskLabelSpec TaskLabelSpec::make(TaskKind kind, std::optional<std::uint32_t> position,
                                  std::optional<std::uint64_t> range_base) {
  TaskLabelSpec spec;
  spec.kind = kind;
  spec.num_classes = classes_for(kind);
  spec.position = position;
  spec.range_base = range_base;
  return spec;
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
    case Split::kNone: return "none";
  }
  return "none";
}

const std::vector<std::size_t>& Splits::get(Split split) const {
  switch (split) {
    case Split::kTrain: return train;
    case Split::kVal: return val;
    case Split::kTest: return test;
    case Split::kNone: break;
  }
  throw UsageError("no index set for split 'none'");
}

std::vector<Split> Splits::membership(std::size_t n_items) const {
  std::vector<Split> out(n_items, Split::kNone);
  for (auto split : {Split::kTrain, Split::kVal, Split::kTest}) {
    for (std::size_t i : get(split)) {
      if (i >= n_items) throw DataError("split index out of range");
      if (out[i] != Split::kNone) throw DataError("split index sets overlap");
      out[i] = split;
    }
  }
  return out;
}

std::vector<std::size_t> ProbeDataset::class_counts() const {
  std::vector<std::size_t> counts(task.num_classes, 0);
  for (const auto& item : items) ++counts.at(item.label);
  return counts;
}

std::vector<std::size_t> ProbeDataset::class_counts(Split split) const {
  std::vector<std::size_t> counts(task.num_classes, 0);
  for (std::size_t i : splits.get(split)) ++counts.at(items.at(i).label);
  return counts;
}

std::uint32_t structure_class(std::uint64_t a, std::uint64_t b) {
  if (a == b) return 2;
  return a > b ? 0 : 1;
}

std::uint32_t label_for(const TaskLabelSpec& task, const ArithProblem& problem) {
  const std::uint32_t pos = task.position.value_or(kOnes);
  switch (task.kind) {
    case TaskKind::kStructure3:
      return structure_class(problem.op_a, problem.op_b);
    case TaskKind::kSumRange: {
      const std::uint64_t base = task.range_base.value_or(0);
      const auto sum = static_cast<std::uint64_t>(problem.answer);
      if (problem.answer < 0 || sum < base || sum - base >= 10) {
        throw DataError("sum " + std::to_string(problem.answer) + " lies outside the range " +
                        std::to_string(base) + "-" + std::to_string(base + 9));
      }
      return static_cast<std::uint32_t>(sum - base);
    }
    case TaskKind::kCarryPos:
      return pos < problem.carry_bits.size() ? problem.carry_bits[pos] : 0;
    case TaskKind::kDigitPos:
    case TaskKind::kCrossopDigit:
    case TaskKind::kLogitLens:
      return problem.answer_digit(pos);
    case TaskKind::kExactMatch:
      return 0;
  }
  throw DataError("unknown task kind");
}

std::pair<std::uint64_t, std::uint64_t> digit_range(std::uint32_t digit_len) {
  if (digit_len == 0 || digit_len > 18) {
    throw DataError("digit length must be in [1, 18], got " +
                    std::to_string(digit_len));
  }
  const std::uint64_t lo = digit_len == 1 ? 0 : pow10(digit_len - 1);
  return {lo, pow10(digit_len) - 1};
}

StructureCounts StructureCounts::standard(std::uint32_t digit_len) {
  const auto [lo, hi] = digit_range(digit_len);
  const std::size_t self_pairs = hi - lo + 1;
  StructureCounts c;
  c.per_class = {5000, 5000, (self_pairs * 8) / 10};
  c.allow_repeats = true;
  return c;
}

ProbeDataset gen_structure_dataset(std::uint32_t digit_len,
                                   const StructureCounts& counts,
                                   std::uint64_t seed, TemplateVariant variant) {
  if (digit_len < 1 || digit_len > 4) {
    throw DataError("structure datasets support digit lengths 1-4");
  }
  const auto [lo, hi] = digit_range(digit_len);
  const std::uint64_t values = hi - lo + 1;
  const std::uint64_t ordered_pool = values * (values - 1) / 2;
  const std::array<std::uint64_t, 3> pool = {ordered_pool, ordered_pool, values};

  ProbeDataset out =
      empty_dataset(TaskLabelSpec::make(TaskKind::kStructure3), seed, variant);
  UniqueCollector collect(out);
  Rng rng(seed);

  for (std::uint32_t label = 0; label < 3; ++label) {
    const std::size_t wanted = counts.per_class[label];
    const bool repeats = wanted > pool[label];
    if (repeats && (!counts.allow_repeats || label == 2)) {
      throw DataError("structure class " + std::to_string(label) + " requests " +
                      std::to_string(wanted) + " items but only " +
                      std::to_string(pool[label]) + " unique " +
                      std::to_string(digit_len) + "-digit problems exist");
    }
    std::size_t made = 0;
    std::size_t attempts = 0;
    while (made < wanted) {
      check_attempts(++attempts, wanted, "structure class");
      std::uint64_t x = rng.uniform(lo, hi);
      std::uint64_t y = x;
      if (label != 2) {
        y = rng.uniform(lo, hi);
        if (x == y) continue;
        const std::uint64_t big = std::max(x, y);
        const std::uint64_t small = std::min(x, y);
        x = label == 0 ? big : small;
        y = label == 0 ? small : big;
      }
      if (repeats) {
        collect.add_repeat(x, y, Operation::kAdd);
        ++made;
      } else if (collect.add(x, y, Operation::kAdd)) {
        ++made;
      }
    }
  }
  return out;
}

std::vector<ProbeDataset> gen_sum_range_dataset(
    std::span<const std::uint64_t> range_bases, std::size_t per_class,
    std::uint64_t seed, TemplateVariant variant) {
  std::vector<ProbeDataset> out;
  Rng rng(seed);
  for (std::uint64_t base : range_bases) {
    ProbeDataset d = empty_dataset(
        TaskLabelSpec::make(TaskKind::kSumRange, std::nullopt, base), seed, variant);
    for (std::uint32_t k = 0; k < 10; ++k) {
      const std::uint64_t sum = base + k;
      if (per_class > sum + 1) {
        throw DataError("sum " + std::to_string(sum) + " has only " +
                        std::to_string(sum + 1) + " addend pairs, " +
                        std::to_string(per_class) + " requested");
      }
      // Partial Fisher-Yates over the first addend.
      std::vector<std::uint64_t> firsts(sum + 1);
      for (std::uint64_t a = 0; a <= sum; ++a) firsts[a] = a;
      for (std::size_t i = 0; i < per_class; ++i) {
        const std::size_t j = rng.uniform(i, firsts.size() - 1);
        std::swap(firsts[i], firsts[j]);
        const std::uint64_t a = firsts[i];
        ArithProblem p = make_problem(a, sum - a, Operation::kAdd, variant);
        const std::uint32_t label = label_for(d.task, p);
        d.items.push_back({std::move(p), label});
      }
    }
    out.push_back(std::move(d));
  }
  return out;
}

ProbeDataset gen_carry_dataset(std::uint32_t position, std::size_t n,
                               std::uint64_t seed, TemplateVariant variant) {
  if (position > kHundreds) throw DataError("carry position must be 0, 1 or 2");
  if (n % 2 != 0) throw DataError("balanced carry datasets need an even size");
  ProbeDataset out =
      empty_dataset(TaskLabelSpec::make(TaskKind::kCarryPos, position), seed, variant);
  UniqueCollector collect(out);
  Rng rng(seed);
  std::array<std::size_t, 2> filled{0, 0};
  const std::size_t half = n / 2;
  std::size_t attempts = 0;
  while (filled[0] < half || filled[1] < half) {
    check_attempts(++attempts, n, "carry dataset");
    const std::uint64_t a = rng.uniform(100, 999);
    const std::uint64_t b = rng.uniform(100, 999);
    const std::uint32_t label = carry_bits(a, b)[position];
    if (filled[label] >= half) continue;
    if (collect.add(a, b, Operation::kAdd)) ++filled[label];
  }
  return out;
}

std::array<ProbeDataset, 3> gen_digit_dataset(std::size_t n, std::uint64_t seed,
                                              TemplateVariant variant) {
  std::array<ProbeDataset, 3> out = {
      empty_dataset(TaskLabelSpec::make(TaskKind::kDigitPos, kHundreds), seed, variant),
      empty_dataset(TaskLabelSpec::make(TaskKind::kDigitPos, kTens), seed, variant),
      empty_dataset(TaskLabelSpec::make(TaskKind::kDigitPos, kOnes), seed, variant)};
  std::set<std::pair<std::uint64_t, std::uint64_t>> seen;
  Rng rng(seed);
  std::size_t attempts = 0;
  // Drawing the sum first keeps every digit position close to uniform.
  while (out[0].items.size() < n) {
    check_attempts(++attempts, n, "digit dataset");
    const std::uint64_t sum = rng.uniform(100, 999);
    const std::uint64_t a = rng.uniform(0, sum);
    if (!seen.emplace(a, sum - a).second) continue;
    const ArithProblem p = make_problem(a, sum - a, Operation::kAdd, variant);
    for (auto& d : out) d.items.push_back({p, label_for(d.task, p)});
  }
  return out;
}

ProbeDataset gen_crossop_dataset(Operation op, std::size_t n, std::uint64_t seed,
                                 TemplateVariant variant) {
  if (op == Operation::kAdd) {
    throw DataError("cross-operation sets cover sub and mul; use the digit set for add");
  }
  ProbeDataset out = empty_dataset(
      TaskLabelSpec::make(TaskKind::kCrossopDigit, kHundreds), seed, variant);
  UniqueCollector collect(out);
  Rng rng(seed);
  std::size_t attempts = 0;
  std::vector<std::uint64_t> divisors;
  while (out.items.size() < n) {
    check_attempts(++attempts, n, "cross-operation dataset");
    const std::uint64_t result = rng.uniform(100, 999);
    std::uint64_t a = 0;
    std::uint64_t b = 0;
    if (op == Operation::kSub) {
      b = rng.uniform(0, 999 - result);
      a = result + b;
    } else {
      divisors.clear();
      for (std::uint64_t f = 2; f * 2 <= result; ++f) {
        if (result % f == 0) divisors.push_back(f);
      }
      if (divisors.empty()) continue;  // prime: only 1 x result
      a = divisors[rng.uniform(0, divisors.size() - 1)];
      b = result / a;
    }
    collect.add(a, b, op);
  }
  return out;
}

ProbeDataset gen_logitlens_dataset(std::size_t n, std::uint64_t seed,
                                   TemplateVariant variant) {
  ProbeDataset out = empty_dataset(
      TaskLabelSpec::make(TaskKind::kLogitLens, kHundreds), seed, variant);
  UniqueCollector collect(out);
  Rng rng(seed);
  std::size_t attempts = 0;
  while (out.items.size() < n) {
    check_attempts(++attempts, n, "logit-lens dataset");
    const std::uint64_t a = rng.uniform(100, 999);
    const std::uint64_t b = rng.uniform(100, 999);
    if (a + b > 999) continue;
    collect.add(a, b, Operation::kAdd);
  }
  return out;
}

ProbeDataset gen_exact_match_dataset(std::uint32_t digit_len, std::size_t n,
                                     std::uint64_t seed, TemplateVariant variant) {
  const auto [lo, hi] = digit_range(digit_len);
  const std::uint64_t values = hi - lo + 1;
  const std::uint64_t pool = values * (values + 1) / 2;
  ProbeDataset out = empty_dataset(TaskLabelSpec::make(TaskKind::kExactMatch), seed, variant);
  UniqueCollector collect(out);
  Rng rng(seed);
  if (pool <= n) {
    for (std::uint64_t a = lo; a <= hi; ++a) {
      for (std::uint64_t b = a; b <= hi; ++b) collect.add(a, b, Operation::kAdd);
    }
    return out;
  }
  std::size_t attempts = 0;
  while (out.items.size() < n) {
    check_attempts(++attempts, n, "exact-match dataset");
    const std::uint64_t x = rng.uniform(lo, hi);
    const std::uint64_t y = rng.uniform(lo, hi);
    collect.add(std::min(x, y), std::max(x, y), Operation::kAdd);
  }
  return out;
}

Splits stratified_split(std::span<const std::uint32_t> labels, std::uint32_t num_classes,
                        std::uint64_t seed, const SplitOptions& options) {
  if (options.test_fraction <= 0.0 || options.test_fraction >= 1.0) {
    throw UsageError("test fraction must lie in (0, 1)");
  }
  if (options.val_fraction < 0.0 || options.val_fraction >= 1.0) {
    throw UsageError("validation fraction must lie in [0, 1)");
  }
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) throw DataError("label out of range");
    by_class[labels[i]].push_back(i);
  }
  Rng rng(seed);
  Splits splits;
  for (std::size_t k = 0; k < by_class.size(); ++k) {
    auto& members = by_class[k];
    if (members.empty()) continue;
    if (members.size() < 2) {
      throw DataError("class " + std::to_string(k) +
                      " has a single item and cannot be stratified");
    }
    rng.shuffle(std::span<std::size_t>(members));
    const auto n = static_cast<double>(members.size());
    auto n_test = static_cast<std::size_t>(std::llround(n * options.test_fraction));
    n_test = std::clamp<std::size_t>(n_test, 1, members.size() - 1);
    const std::size_t n_train_all = members.size() - n_test;
    auto n_val = static_cast<std::size_t>(
        std::llround(static_cast<double>(n_train_all) * options.val_fraction));
    n_val = std::min(n_val, n_train_all - 1);
    const std::size_t n_train = n_train_all - n_val;

    auto it = members.begin();
    splits.test.insert(splits.test.end(), it, it + static_cast<std::ptrdiff_t>(n_test));
    it += static_cast<std::ptrdiff_t>(n_test);
    splits.val.insert(splits.val.end(), it, it + static_cast<std::ptrdiff_t>(n_val));
    it += static_cast<std::ptrdiff_t>(n_val);
    splits.train.insert(splits.train.end(), it, it + static_cast<std::ptrdiff_t>(n_train));
  }
  std::ranges::sort(splits.train);
  std::ranges::sort(splits.val);
  std::ranges::sort(splits.test);
  return splits;
}

ProbeDataset split_stratified(ProbeDataset dataset, std::uint64_t seed,
                              const SplitOptions& options) {
  std::vector<std::uint32_t> labels;
  labels.reserve(dataset.items.size());
  for (const auto& item : dataset.items) labels.push_back(item.label);
  dataset.splits = stratified_split(labels, dataset.task.num_classes, seed, options);
  dataset.seed = seed;
  return dataset;
}

// ---- serialization --------------------------------------------------------

void write_dataset(std::ostream& out, const ProbeDataset& dataset) {
  using nlohmann::ordered_json;
  ordered_json header;
  header["format"] = "arith-dataset";
  header["version"] = 1;
  header["task"] = to_string(dataset.task.kind);
  header["num_classes"] = dataset.task.num_classes;
  header["position"] = dataset.task.position ? ordered_json(*dataset.task.position)
                                             : ordered_json(nullptr);
  header["range_base"] = dataset.task.range_base
                             ? ordered_json(*dataset.task.range_base)
                             : ordered_json(nullptr);
  header["template"] = to_string(dataset.template_variant);
  header["seed"] = dataset.seed;
  header["n_items"] = dataset.items.size();
  out << header.dump() << '\n';

  const auto membership = dataset.splits.membership(dataset.items.size());
  for (std::size_t i = 0; i < dataset.items.size(); ++i) {
    const auto& item = dataset.items[i];
    ordered_json rec;
    rec["a"] = item.problem.op_a;
    rec["b"] = item.problem.op_b;
    rec["op"] = to_string(item.problem.operation);
    rec["prompt"] = item.problem.prompt;
    rec["label"] = item.label;
    rec["split"] = to_string(membership[i]);
    rec["seed"] = dataset.seed;
    out << rec.dump() << '\n';
  }
}

void write_dataset(const std::filesystem::path& path, const ProbeDataset& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  write_dataset(out, dataset);
  if (!out) throw DataError("failed writing " + path.string());
}

ProbeDataset read_dataset(std::istream& in) {
  using nlohmann::json;
  std::string line;
  if (!std::getline(in, line)) throw DataError("dataset file is empty");
  ProbeDataset d;
  std::size_t expected = 0;
  try {
    const json header = json::parse(line);
    if (header.value("format", "") != "arith-dataset") {
      throw DataError("not an arith-dataset file");
    }
    if (header.at("version").get<int>() != 1) {
      throw DataError("unsupported dataset version");
    }
    const auto kind = parse_task_kind(header.at("task").get<std::string>());
    if (!kind) throw DataError("unknown task kind in dataset header");
    d.task.kind = *kind;
    d.task.num_classes = header.at("num_classes").get<std::uint32_t>();
    if (!header.at("position").is_null()) {
      d.task.position = header.at("position").get<std::uint32_t>();
    }
    if (!header.at("range_base").is_null()) {
      d.task.range_base = header.at("range_base").get<std::uint64_t>();
    }
    const auto variant = parse_template_variant(header.at("template").get<std::string>());
    if (!variant) throw DataError("unknown template variant in dataset header");
    d.template_variant = *variant;
    d.seed = header.at("seed").get<std::uint64_t>();
    expected = header.at("n_items").get<std::size_t>();
  } catch (const json::exception& e) {
    throw DataError(std::string("bad dataset header: ") + e.what());
  }

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json rec = json::parse(line);
      const auto op = parse_operation(rec.at("op").get<std::string>());
      if (!op) throw DataError("unknown operation");
      LabeledProblem item{make_problem(rec.at("a").get<std::uint64_t>(),
                                       rec.at("b").get<std::uint64_t>(), *op,
                                       d.template_variant),
                          rec.at("label").get<std::uint32_t>()};
      if (item.problem.prompt != rec.at("prompt").get<std::string>()) {
        throw DataError("prompt does not match operands and template");
      }
      if (item.label >= d.task.num_classes) throw DataError("label out of range");
      if (item.label != label_for(d.task, item.problem)) {
        throw DataError("label " + std::to_string(item.label) + " disagrees with the problem");
      }
      const std::string split = rec.at("split").get<std::string>();
      const std::size_t index = d.items.size();
      if (split == "train") {
        d.splits.train.push_back(index);
      } else if (split == "val") {
        d.splits.val.push_back(index);
      } else if (split == "test") {
        d.splits.test.push_back(index);
      } else if (split != "none") {
        throw DataError("unknown split '" + split + "'");
      }
      d.items.push_back(std::move(item));
    } catch (const json::exception& e) {
      throw DataError("dataset line " + std::to_string(line_no) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (d.items.size() != expected) {
    throw DataError("dataset truncated: header declares " + std::to_string(expected) +
                    " items, found " + std::to_string(d.items.size()));
  }
  return d;
}

ProbeDataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset " + path.string());
  return read_dataset(in);
}

}  // namespace arith
