// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails. Tolerances are fixed here, not taken from flags.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "arith/activation_store.hpp"
#include "arith/dataset.hpp"
#include "arith/errors.hpp"
#include "arith/lens.hpp"
#include "arith/probe.hpp"
#include "arith/problem.hpp"
#include "arith/report.hpp"
#include "arith/rng.hpp"
#include "arith/toy_export.hpp"
#include "arith/toy_lm.hpp"
#include "oracle.hpp"

namespace fs = std::filesystem;
using namespace arith;

namespace {

constexpr double kLabelOracleSeconds = 60.0;
constexpr std::size_t kRandomLargePairs = 100'000;
constexpr double kGradRelTol = 1e-5;
constexpr int kGradInstances = 20;
constexpr double kNullSigmas = 3.0;
constexpr double kNullCellFraction = 0.95;
constexpr double kHeldoutEmGate = 0.99;
constexpr double kOnesFinalMin = 0.90;
constexpr double kOnesL0MarginMax = 0.15;
constexpr int kSplitDatasets = 100;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path checkpoint;
  fs::path work;
  fs::path cli;
  ToyLM model{ToyLMConfig{}, CharTokenizer{}.size()};
  CharTokenizer tokenizer;
  std::optional<std::string> digit_runs;  // set once run; empty on success
};

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), format, a, b, c);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Every label the pipeline derives from a problem, checked against the
// decimal-string oracle. Returns the number of disagreements.
std::size_t check_pair(std::uint64_t a, std::uint64_t b, bool check_structure) {
  std::size_t bad = 0;
  const std::string sa = std::to_string(a), sb = std::to_string(b);
  const ArithProblem add = make_problem(a, b, Operation::kAdd, TemplateVariant::kSpaced);
  const std::string sum = oracle::add(sa, sb);
  bad += canonical_answer(add.answer) != sum;
  const auto carries = oracle::carries(sa, sb);
  for (std::uint32_t pos : {kOnes, kTens, kHundreds}) {
    const auto want_carry = pos < carries.size() ? static_cast<std::uint32_t>(carries[pos]) : 0u;
    bad += label_for(TaskLabelSpec::make(TaskKind::kCarryPos, pos), add) != want_carry;
    bad += label_for(TaskLabelSpec::make(TaskKind::kDigitPos, pos), add) !=
           static_cast<std::uint32_t>(oracle::digit_at(sum, pos));
  }
  if (check_structure) {
    bad += label_for(TaskLabelSpec::make(TaskKind::kStructure3), add) !=
           static_cast<std::uint32_t>(oracle::structure_class(sa, sb));
  }
  const std::string product = oracle::mul(sa, sb);
  const ArithProblem mul = make_problem(a, b, Operation::kMul, TemplateVariant::kSpaced);
  bad += canonical_answer(mul.answer) != product;
  bad += label_for(TaskLabelSpec::make(TaskKind::kCrossopDigit, kTens), mul) !=
         static_cast<std::uint32_t>(oracle::digit_at(product, kTens));
  if (!oracle::less(sa, sb)) {
    const std::string diff = oracle::sub(sa, sb);
    const ArithProblem sub = make_problem(a, b, Operation::kSub, TemplateVariant::kSpaced);
    bad += canonical_answer(sub.answer) != diff;
    bad += label_for(TaskLabelSpec::make(TaskKind::kCrossopDigit, kOnes), sub) !=
           static_cast<std::uint32_t>(oracle::digit_at(diff, kOnes));
  }
  return bad;
}

Outcome label_oracle(Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t bad = 0, pairs = 0;
  for (std::uint64_t a = 0; a < 1000; ++a) {
    for (std::uint64_t b = 0; b < 1000; ++b, ++pairs) bad += check_pair(a, b, true);
  }
  Rng rng(20240601);
  for (std::size_t i = 0; i < kRandomLargePairs; ++i, ++pairs) {
    // Products of operands below 1e9 fit the signed 64-bit answer.
    const std::uint64_t a = rng.uniform(1000, 999'999'999);
    const std::uint64_t b = rng.uniform(1000, 999'999'999);
    bad += check_pair(a, b, false);
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {bad == 0 && secs < kLabelOracleSeconds,
          std::to_string(pairs) + " pairs, " + std::to_string(bad) + " mismatches, " +
              fmt("%.1fs (limit %.0fs)", secs, kLabelOracleSeconds)};
}

Outcome probe_gradient(Context&) {
  Rng rng(99);
  constexpr double kEps = 1e-6;
  double worst = 0.0;
  for (int instance = 0; instance < kGradInstances; ++instance) {
    const Eigen::Index k = 3, d = 8, n = 16;
    Eigen::MatrixXd w(k, d), x(n, d);
    Eigen::VectorXd b(k);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < k; ++i) b(i) = rng.normal();
    std::vector<std::uint32_t> y(n);
    for (auto& v : y) v = static_cast<std::uint32_t>(rng.uniform(0, k - 1));
    const ProbeLoss an = probe_loss_and_grad(w, b, x, y);
    Eigen::MatrixXd fw(k, d);
    Eigen::VectorXd fb(k);
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      Eigen::MatrixXd up = w, dn = w;
      up.data()[i] += kEps;
      dn.data()[i] -= kEps;
      fw.data()[i] =
          (probe_loss_and_grad(up, b, x, y).loss - probe_loss_and_grad(dn, b, x, y).loss) /
          (2 * kEps);
    }
    for (Eigen::Index i = 0; i < k; ++i) {
      Eigen::VectorXd up = b, dn = b;
      up(i) += kEps;
      dn(i) -= kEps;
      fb(i) = (probe_loss_and_grad(w, up, x, y).loss - probe_loss_and_grad(w, dn, x, y).loss) /
              (2 * kEps);
    }
    const double err =
        std::sqrt((fw - an.grad_weights).squaredNorm() + (fb - an.grad_bias).squaredNorm());
    const double scale = std::sqrt(fw.squaredNorm() + fb.squaredNorm());
    worst = std::max(worst, err / scale);
  }
  return {worst <= kGradRelTol, std::to_string(kGradInstances) + " instances K=3 d=8, " +
                                    fmt("max rel err %.2e (tol %.0e)", worst, kGradRelTol)};
}

ActivationStore export_task(Context& ctx, const ProbeDataset& d) {
  return export_activations(ctx.model, ctx.tokenizer, d);
}

Outcome null_signal(Context& ctx) {
  std::vector<ActivationStore> stores;
  for (std::uint32_t pos : {kOnes, kTens, kHundreds}) {
    stores.push_back(export_task(ctx, split_stratified(gen_carry_dataset(pos, 1000, 42), 42)));
  }
  for (auto& d : gen_digit_dataset(1000, 42)) {
    stores.push_back(export_task(ctx, split_stratified(std::move(d), 42)));
  }
  std::size_t cells = 0, ok = 0;
  double worst_z = 0.0;
  for (std::size_t i = 0; i < stores.size(); ++i) {
    const ActivationStore shuffled = shuffle_labels(stores[i], 1000 + i);
    const ProbeTrainConfig cfg;
    const LayerCurve c = layer_sweep(shuffled, shuffled.header.task, cfg);
    const std::size_t n_test = static_cast<std::size_t>(
        std::llround(cfg.split.test_fraction * static_cast<double>(shuffled.samples.size())));
    const double sd = std::sqrt(c.chance * (1.0 - c.chance) / static_cast<double>(n_test));
    for (const auto& p : c.points) {
      ++cells;
      const double z = p.error ? INFINITY : std::abs(p.mean - c.chance) / sd;
      worst_z = std::max(worst_z, z);
      ok += z <= kNullSigmas;
    }
  }
  const double frac = static_cast<double>(ok) / static_cast<double>(cells);
  return {frac >= kNullCellFraction,
          std::to_string(ok) + "/" + std::to_string(cells) + " layer x task cells within " +
              fmt("%.0f SD of chance (need %.0f%%), max |z| %.2f", kNullSigmas,
                  100 * kNullCellFraction, worst_z)};
}

Outcome lens_identity(Context& ctx) {
  const ProbeDataset d = gen_logitlens_dataset(1000, 42);
  const ActivationStore store = export_activations(ctx.model, ctx.tokenizer, d);
  const LensAnalysis a = earliest_top1(store);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < d.items.size(); ++i) {
    const Generation g = generate_answer(ctx.model, ctx.tokenizer, d.items[i].problem.prompt, 1);
    const TokenId greedy = g.emitted.empty() ? ctx.tokenizer.eos() : ctx.tokenizer.id_of(g.emitted[0]);
    agree += a.results[i].top1.back() == greedy;
  }
  return {agree == d.items.size(),
          std::to_string(agree) + "/" + std::to_string(d.items.size()) +
              " final-layer lens argmax equal to the greedy token"};
}

int run_cli(const Context& ctx, const std::vector<std::string>& args) {
  std::string cmd = "\"" + ctx.cli.string() + "\"";
  for (const auto& a : args) cmd += " \"" + a + "\"";
  cmd += " > \"" + (ctx.work / "cli.log").string() + "\" 2>&1";
  return std::system(cmd.c_str());
}

fs::path digit_run_dir(const Context& ctx, const std::string& name) {
  return ctx.work / ("digit_" + name);
}

std::string launch_digit_runs(const Context& ctx) {
  const fs::path config = ctx.work / "toy_digit.conf";
  std::ofstream(config) << "experiment = digit\ncheckpoint = " << ctx.checkpoint.string()
                        << "\nout_dir = unused\nn = 1000\ndataset_seed = 42\n"
                        << "probe_seeds = 42..46\n";
  for (const char* name : {"a", "b"}) {
    fs::remove_all(digit_run_dir(ctx, name));
    if (run_cli(ctx, {"run", "--config", config.string(), "--out",
                      digit_run_dir(ctx, name).string()}) != 0) {
      return "arith-probe run failed; see " + (ctx.work / "cli.log").string();
    }
  }
  return "";
}

// Two separate CLI processes run the same digit experiment, once per
// acceptance run; the first run's curves also feed the toy pipeline check.
const std::string& digit_runs(Context& ctx) {
  if (!ctx.digit_runs) ctx.digit_runs = launch_digit_runs(ctx);
  return *ctx.digit_runs;
}

Outcome toy_pipeline(Context& ctx) {
  const double em = heldout_exact_match(ctx.model, ctx.tokenizer, AdditionCorpus(ctx.model.config()));
  std::string detail = fmt("held-out 2-digit EM %.4f", em);
  if (em < kHeldoutEmGate) return {false, detail + fmt(" < %.2f gate", kHeldoutEmGate)};
  if (const std::string& error = digit_runs(ctx); !error.empty()) return {false, detail + ", " + error};
  for (const LayerCurve& c : read_curve_dir(digit_run_dir(ctx, "a") / "curves")) {
    if (c.task.position != kOnes) continue;
    const double l0 = c.points.front().mean, last = c.points.back().mean;
    const bool pass = last >= kOnesFinalMin && l0 <= c.chance + kOnesL0MarginMax;
    return {pass, detail + fmt(", ones probe L0 %.3f (max %.3f), ", l0,
                               c.chance + kOnesL0MarginMax) +
                      fmt("final %.3f (min %.2f)", last, kOnesFinalMin)};
  }
  return {false, detail + ", no ones-digit curve in the run"};
}

Outcome determinism(Context& ctx) {
  if (const std::string& error = digit_runs(ctx); !error.empty()) return {false, error};
  std::size_t files = 0, differ = 0;
  std::string first_diff;
  const fs::path a = digit_run_dir(ctx, "a"), b = digit_run_dir(ctx, "b");
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file() || e.path().extension() != ".csv") continue;
    ++files;
    const fs::path rel = fs::relative(e.path(), a);
    if (slurp(e.path()) != slurp(b / rel)) {
      ++differ;
      if (first_diff.empty()) first_diff = rel.string();
    }
  }
  const bool manifest_same = slurp(a / "manifest.json") == slurp(b / "manifest.json");
  return {files > 0 && differ == 0 && manifest_same,
          std::to_string(files) + " CSVs compared across two processes, " +
              std::to_string(differ) + " differ" + (first_diff.empty() ? "" : " (" + first_diff + ")") +
              (manifest_same ? ", manifest identical" : ", manifest differs")};
}

Outcome store_round_trip(Context& ctx) {
  Rng rng(5);
  ActivationStore s;
  s.header.model_name = "acceptance";
  s.header.d_model = 6;
  s.header.n_layer_states = 3;
  s.header.n_samples = 40;
  s.header.task = TaskLabelSpec::make(TaskKind::kDigitPos, kOnes);
  s.header.set_meta("note", "round trip");
  auto random_float = [&] {
    const auto bits = static_cast<std::uint32_t>(rng.uniform(0, 0xFFFF'FFFFULL));
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    return f;
  };
  for (std::uint64_t i = 0; i < s.header.n_samples; ++i) {
    StoreSample smp;
    smp.id = i;
    smp.label = static_cast<std::uint32_t>(i % 10);
    smp.gold_token = static_cast<std::uint32_t>(i % 4);
    for (int j = 0; j < 18; ++j) smp.states.push_back(random_float());
    s.samples.push_back(std::move(smp));
  }
  std::vector<float> w(4 * 6);
  for (float& f : w) f = random_float();
  s.unembedding = Unembedding{{"a", "b", "c", "d"}, w};
  const fs::path path = ctx.work / "round_trip.store";
  write_store(path, s);
  const ActivationStore back = read_store(path);
  bool bits_equal = back.samples.size() == s.samples.size() && back.unembedding &&
                    std::memcmp(back.unembedding->weights.data(), w.data(), w.size() * 4) == 0;
  for (std::size_t i = 0; bits_equal && i < s.samples.size(); ++i) {
    bits_equal = back.samples[i].label == s.samples[i].label &&
                 back.samples[i].gold_token == s.samples[i].gold_token &&
                 std::memcmp(back.samples[i].states.data(), s.samples[i].states.data(),
                             s.samples[i].states.size() * 4) == 0;
  }
  const std::vector<std::uint8_t> bytes = encode_store(s);
  std::size_t detected = 0;
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    std::vector<std::uint8_t> bad = bytes;
    bad[i] ^= static_cast<std::uint8_t>(1u << (i % 8));
    try {
      decode_store(bad);
    } catch (const DataError&) {
      ++detected;
    }
  }
  return {bits_equal && detected == bytes.size(),
          std::string(bits_equal ? "float bits identical" : "float bits differ") + ", " +
              std::to_string(detected) + "/" + std::to_string(bytes.size()) +
              " single-byte corruptions detected"};
}

Outcome stratified_splits(Context&) {
  Rng rng(77);
  int bad = 0;
  for (int t = 0; t < kSplitDatasets; ++t) {
    const auto k = static_cast<std::uint32_t>(rng.uniform(2, 10));
    const std::size_t n = rng.uniform(10 * k, 400);
    std::vector<std::uint32_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = i < 2 * k ? static_cast<std::uint32_t>(i % k)
                            : static_cast<std::uint32_t>(rng.uniform(0, k - 1));
    }
    SplitOptions opt;
    opt.val_fraction = 0.0;
    const Splits s = stratified_split(labels, k, rng.uniform(0, 1'000'000), opt);
    std::vector<double> total(k), test(k);
    for (auto l : labels) total[l] += 1;
    for (auto i : s.test) test[labels[i]] += 1;
    for (std::uint32_t c = 0; c < k; ++c) {
      if (std::abs(test[c] - 0.2 * total[c]) > 1.0) ++bad;
    }
    if (s.train.size() + s.test.size() != n) ++bad;
  }
  return {bad == 0, std::to_string(kSplitDatasets) + " random datasets, " + std::to_string(bad) +
                        " classes off 80/20 by more than one item"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  Context ctx;
  app.add_option("--checkpoint", ctx.checkpoint, "Trained toy model checkpoint")->required();
  app.add_option("--work", ctx.work, "Scratch directory")->required();
  app.add_option("--cli", ctx.cli, "arith-probe executable")->required();
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(ctx.work);

  const std::vector<std::pair<std::string, std::function<Outcome(Context&)>>> checks = {
      {"label_oracle", label_oracle},   {"probe_gradient", probe_gradient},
      {"null_signal", null_signal},     {"lens_identity", lens_identity},
      {"toy_pipeline", toy_pipeline},   {"determinism", determinism},
      {"store_round_trip", store_round_trip}, {"stratified_splits", stratified_splits},
  };
  bool have_model = true;
  try {
    ctx.model = read_checkpoint(ctx.checkpoint);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "cannot load %s: %s\n", ctx.checkpoint.string().c_str(), e.what());
    have_model = false;
  }
  int failures = 0;
  for (const auto& [name, fn] : checks) {
    Outcome o;
    const bool model_check = name == "null_signal" || name == "lens_identity" ||
                             name == "toy_pipeline" || name == "determinism";
    if (model_check && !have_model) {
      o = {false, "no checkpoint"};
    } else {
      try {
        o = fn(ctx);
      } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
      }
    }
    failures += !o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
