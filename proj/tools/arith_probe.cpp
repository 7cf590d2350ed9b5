// arith-probe: dataset generation, toy model training, probing, logit lens
// and reporting from one binary.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "arith/activation_store.hpp"
#include "arith/dataset.hpp"
#include "arith/errors.hpp"
#include "arith/experiment.hpp"
#include "arith/lens.hpp"
#include "arith/probe.hpp"
#include "arith/report.hpp"
#include "arith/toy_export.hpp"
#include "arith/toy_lm.hpp"

namespace fs = std::filesystem;
using namespace arith;

namespace {

template <typename T>
T required(std::optional<T> value, const std::string& what) {
  if (!value) throw UsageError("unknown " + what);
  return *value;
}

TemplateVariant template_from(const std::string& text) {
  return required(parse_template_variant(text), "template '" + text + "'");
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

void write_text(const fs::path& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

// ---- gen --------------------------------------------------------------------

struct GenArgs {
  std::string task;
  std::size_t n = 1000;
  std::uint64_t seed = 42;
  std::string out;
  std::string position = "ones";
  std::uint64_t range_base = 500;
  std::uint32_t digits = 2;
  std::string op = "add";
  std::string template_name = "spaced";
  std::vector<std::size_t> counts;
  double test_fraction = 0.2;
  double val_fraction = 0.1;
};

void run_gen(const GenArgs& a) {
  const TaskKind kind = required(parse_task_kind(a.task), "task '" + a.task + "'");
  const TemplateVariant v = template_from(a.template_name);
  const std::uint32_t pos = required(parse_position(a.position), "position '" + a.position + "'");
  ProbeDataset d;
  switch (kind) {
    case TaskKind::kStructure3: {
      StructureCounts counts = StructureCounts::standard(a.digits);
      if (!a.counts.empty()) {
        if (a.counts.size() != 3) throw UsageError("--counts takes three values");
        std::copy(a.counts.begin(), a.counts.end(), counts.per_class.begin());
      }
      d = gen_structure_dataset(a.digits, counts, a.seed, v);
      break;
    }
    case TaskKind::kSumRange: {
      const std::uint64_t base[] = {a.range_base};
      d = std::move(gen_sum_range_dataset(base, a.n, a.seed, v).front());
      break;
    }
    case TaskKind::kCarryPos:
      d = gen_carry_dataset(pos, a.n, a.seed, v);
      break;
    case TaskKind::kDigitPos: {
      auto sets = gen_digit_dataset(a.n, a.seed, v);
      const auto it = std::find_if(sets.begin(), sets.end(),
                                   [&](const ProbeDataset& s) { return s.task.position == pos; });
      d = std::move(*it);
      break;
    }
    case TaskKind::kCrossopDigit: {
      const Operation op = required(parse_operation(a.op), "operation '" + a.op + "'");
      d = op == Operation::kAdd ? std::move(gen_digit_dataset(a.n, a.seed, v)[0])
                                : gen_crossop_dataset(op, a.n, a.seed, v);
      break;
    }
    case TaskKind::kLogitLens:
      d = gen_logitlens_dataset(a.n, a.seed, v);
      break;
    case TaskKind::kExactMatch:
      d = gen_exact_match_dataset(a.digits, a.n, a.seed, v);
      break;
  }
  if (kind != TaskKind::kExactMatch) {
    d = split_stratified(std::move(d), a.seed, {a.test_fraction, a.val_fraction});
  }
  ensure_parent(a.out);
  write_dataset(fs::path(a.out), d);
  const auto counts = d.class_counts();
  std::printf("wrote %zu items (%s, %u classes) to %s\n", d.items.size(),
              std::string(to_string(d.task.kind)).c_str(), d.task.num_classes, a.out.c_str());
  std::printf("train %zu  val %zu  test %zu\n", d.splits.train.size(), d.splits.val.size(),
              d.splits.test.size());
  for (std::size_t k = 0; k < counts.size(); ++k) std::printf("class %zu: %zu\n", k, counts[k]);
}

// ---- toylm ------------------------------------------------------------------

void run_toylm_train(const std::string& config_path, const std::string& out,
                     const std::string& log_path) {
  const ToyLMConfig config = read_toylm_config(config_path);
  std::string log = "step,loss,learning_rate\n";
  TrainResult r = train_toy_lm(config, [&](const TrainLogEntry& e) {
    std::printf("step %6u  loss %.4f  lr %.2e\n", e.step, e.loss, e.learning_rate);
    std::fflush(stdout);
    log += std::to_string(e.step) + "," + format_fixed(e.loss) + "," +
           format_fixed(e.learning_rate) + "\n";
  });
  ensure_parent(out);
  write_checkpoint(out, r.model, CharTokenizer{});
  if (!log_path.empty()) write_text(log_path, log);
  std::printf("held-out exact match %.4f\nwrote %s\n", r.heldout_exact_match, out.c_str());
}

void run_toylm_eval(const std::string& ckpt, const std::string& dataset_path,
                    const std::string& answers_path, const std::string& out_dir) {
  const ToyLM model = read_checkpoint(ckpt);
  const ProbeDataset d = read_dataset(fs::path(dataset_path));
  std::vector<std::string> prompts;
  prompts.reserve(d.items.size());
  for (const auto& item : d.items) prompts.push_back(item.problem.prompt);
  const auto gens = generate_answers(model, CharTokenizer{}, prompts);
  std::vector<AnswerRecord> records;
  records.reserve(gens.size());
  for (std::size_t i = 0; i < gens.size(); ++i) {
    const auto& p = d.items[i].problem;
    records.push_back({static_cast<std::uint32_t>(
                           std::max(digit_count(p.op_a), digit_count(p.op_b))),
                       gens[i].text, canonical_answer(p.answer)});
  }
  if (!answers_path.empty()) {
    ensure_parent(answers_path);
    write_answers(answers_path, records);
  }
  const ExactMatchTable table = exact_match_eval(records);
  for (const auto& row : table.rows) {
    std::printf("digits %u  n %zu  exact match %.4f\n", row.digits, row.n_samples, row.accuracy);
  }
  std::printf("overall exact match %.4f (%zu/%zu)\n", table.overall, table.n_correct,
              table.n_samples);
  if (!out_dir.empty()) {
    ArtifactInputs inputs;
    inputs.exact_match = table;
    emit_artifacts(out_dir, inputs);
  }
}

void run_toylm_export(const std::string& ckpt, const std::string& dataset_path,
                      const std::string& out, bool no_unembedding) {
  const ToyLM model = read_checkpoint(ckpt);
  const ProbeDataset d = read_dataset(fs::path(dataset_path));
  ExportOptions opts;
  opts.embed_unembedding = !no_unembedding;
  const ActivationStore store = export_activations(model, CharTokenizer{}, d, opts);
  ensure_parent(out);
  write_store(out, store);
  std::printf("wrote %zu samples x %u layer states x %u to %s\n", store.size(),
              store.header.n_layer_states, store.header.d_model, out.c_str());
}

// ---- store inspect ----------------------------------------------------------

void run_store_inspect(const std::string& path) {
  const ActivationStore store = read_store(path);
  const StoreHeader& h = store.header;
  std::printf("model            %s\n", h.model_name.c_str());
  std::printf("d_model          %u\n", h.d_model);
  std::printf("layer states     %u\n", h.n_layer_states);
  std::printf("samples          %llu\n", static_cast<unsigned long long>(h.n_samples));
  std::printf("template         %s\n", h.template_variant.c_str());
  std::printf("tokenizer        %s\n", h.tokenizer_fingerprint.c_str());
  std::printf("task             %s (%u classes)", std::string(to_string(h.task.kind)).c_str(),
              h.task.num_classes);
  if (h.task.position) std::printf(" position %s", std::string(position_name(*h.task.position)).c_str());
  if (h.task.range_base) std::printf(" range base %llu", static_cast<unsigned long long>(*h.task.range_base));
  std::printf("\nunembedding      %s\n",
              store.unembedding ? (std::to_string(store.unembedding->vocab.size()) + " tokens").c_str()
                                : "absent");
  std::printf("final norm       %s\n",
              !store.final_norm ? "absent"
              : store.final_norm->kind == FinalNorm::Kind::kRmsNorm ? "rms"
                                                                     : "layer");
  for (const auto& [k, v] : h.metadata) std::printf("meta %-11s %s\n", k.c_str(), v.c_str());
  const auto counts = store.class_counts();
  for (std::size_t k = 0; k < counts.size(); ++k) std::printf("class %zu: %zu\n", k, counts[k]);
}

// ---- probe ------------------------------------------------------------------

struct ProbeArgs {
  std::string task;
  std::string position;
  std::optional<std::uint64_t> range_base;
  std::string seeds = "42..46";
  std::uint32_t epochs = 10;
  double learning_rate = 1e-3;
  std::uint32_t batch_size = 32;
  bool standardize = false;
  std::uint32_t jobs = 1;
  std::optional<std::uint64_t> shuffle_seed;
  std::string out;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--task", task, "Task kind (default: the store's task)");
    cmd->add_option("--position", position, "Digit position: ones, tens or hundreds");
    cmd->add_option("--range-base", range_base, "Sum-range base");
    cmd->add_option("--seeds", seeds, "Seeds, 'a..b' or comma list")->capture_default_str();
    cmd->add_option("--epochs", epochs, "Training epochs")->capture_default_str();
    cmd->add_option("--lr", learning_rate, "Adam learning rate")->capture_default_str();
    cmd->add_option("--batch-size", batch_size, "Minibatch size; 0 = full batch")
        ->capture_default_str();
    cmd->add_flag("--standardize", standardize, "Standardize features with train statistics");
    cmd->add_option("--jobs", jobs, "Parallel (layer, seed) jobs")->capture_default_str();
    cmd->add_option("--shuffle-labels", shuffle_seed, "Permute labels with this seed (control)");
    cmd->add_option("--out", out, "Output directory")->required();
  }

  ProbeTrainConfig config() const {
    ProbeTrainConfig c;
    c.seeds = parse_seed_list(seeds);
    c.epochs = epochs;
    c.learning_rate = learning_rate;
    c.batch_size = batch_size;
    c.standardize = standardize;
    c.jobs = std::max<std::uint32_t>(jobs, 1);
    return c;
  }

  TaskLabelSpec task_for(const StoreHeader& header) const {
    TaskLabelSpec spec = header.task;
    if (!task.empty()) {
      const TaskKind kind = required(parse_task_kind(task), "task '" + task + "'");
      std::optional<std::uint32_t> pos = header.task.position;
      if (!position.empty()) pos = required(parse_position(position), "position '" + position + "'");
      spec = TaskLabelSpec::make(kind, pos, range_base ? range_base : header.task.range_base);
    }
    return spec;
  }
};

void save_curve(const LayerCurve& curve, const fs::path& dir) {
  fs::create_directories(dir);
  const std::string slug = curve_slug(curve);
  write_curve_raw(dir / (slug + ".jsonl"), curve);
  write_text(dir / (slug + ".csv"), curve_csv(curve));
  std::printf("%s\n", curve.name.c_str());
  for (const auto& p : curve.points) {
    if (p.error) {
      std::printf("  L%-3u error: %s\n", p.layer, p.error->c_str());
    } else {
      std::printf("  L%-3u %.4f +- %.4f\n", p.layer, p.mean, p.ci95);
    }
  }
  std::printf("chance %.4f  onset %s\nwrote %s/%s.{csv,jsonl}\n", curve.chance,
              curve.onset ? ("L" + std::to_string(*curve.onset)).c_str() : "none",
              dir.string().c_str(), slug.c_str());
}

void run_probe_sweep(const std::string& store_path, const ProbeArgs& a) {
  const ProbeTrainConfig config = a.config();
  ActivationStore store = read_store(store_path);
  if (a.shuffle_seed) store = shuffle_labels(store, *a.shuffle_seed);
  LayerCurve curve = layer_sweep(store, a.task_for(store.header), config);
  if (a.shuffle_seed) curve.name += "/shuffled";
  save_curve(curve, a.out);
}

void run_probe_transfer(const std::string& train_path, const std::string& test_path,
                        const ProbeArgs& a) {
  const ProbeTrainConfig config = a.config();
  const ActivationStore train = read_store(train_path);
  const ActivationStore test = read_store(test_path);
  LayerCurve curve = crossop_transfer(train, test, a.task_for(train.header), config);
  curve.name = "crossop/" + fs::path(train_path).stem().string() + "_to_" +
               fs::path(test_path).stem().string();
  save_curve(curve, a.out);
}

// ---- lens -------------------------------------------------------------------

void run_lens_hist(const std::vector<std::string>& paths, const std::string& layers,
                   bool final_norm, const std::string& out) {
  std::vector<ActivationStore> stores;
  for (const auto& p : paths) stores.push_back(read_store(p));
  LensOptions opts;
  opts.apply_final_norm = final_norm;
  const LensHistogramSet set = earliest_top1_runs(stores, opts);
  const auto selected = parse_layer_selection(layers, set.n_layer_states());
  fs::create_directories(out);
  write_histogram_raw(fs::path(out) / "lens_hist.jsonl", set);
  write_text(fs::path(out) / "lens_hist.csv", histogram_csv(set, selected));
  write_text(fs::path(out) / "lens_hist.svg", histogram_svg(set, selected));
  const auto mean = set.mean_counts();
  for (std::uint32_t l : selected) std::printf("L%-3u %.2f\n", l, mean[l]);
  std::printf("never %.2f\n", set.mean_never());
  const auto mode = set.modal_layer();
  std::printf("modal layer %s\nwrote %s/lens_hist.{csv,jsonl,svg}\n",
              mode ? ("L" + std::to_string(*mode)).c_str() : "none", out.c_str());
}

// ---- report -----------------------------------------------------------------

void run_report_stages(const std::string& curves_dir, const std::string& hist_path,
                       const std::string& layers, const std::string& out) {
  ArtifactInputs inputs;
  if (!fs::is_directory(curves_dir)) throw DataError("curve directory " + curves_dir + " does not exist");
  inputs.curves = read_curve_dir(curves_dir);
  if (!hist_path.empty()) {
    inputs.lens = read_histogram_raw(hist_path);
    inputs.lens_layers = parse_layer_selection(layers, inputs.lens->n_layer_states());
  }
  const StageReport report = stage_ordering(inputs.curves, inputs.lens);
  inputs.stages = report;
  emit_artifacts(out, inputs);
  for (const auto& e : report.entries) {
    std::printf("%-10s rank %d  layer %-5s %s\n", e.family.c_str(), e.rank,
                e.layer ? ("L" + std::to_string(*e.layer)).c_str() : "-", e.source.c_str());
  }
  std::string order;
  for (const auto& f : report.ordering) order += (order.empty() ? "" : " < ") + f;
  std::printf("ordering: %s\nmonotone: %s%s\n", order.c_str(), report.monotone ? "yes" : "no",
              report.partial ? " (partial)" : "");
}

void run_report_table(const std::string& answers, const std::string& out) {
  ArtifactInputs inputs;
  inputs.exact_match = exact_match_eval(read_answers(answers));
  emit_artifacts(out, inputs);
  for (const auto& row : inputs.exact_match->rows) {
    std::printf("digits %u  n %zu  exact match %.4f\n", row.digits, row.n_samples, row.accuracy);
  }
  std::printf("overall %.4f\n", inputs.exact_match->overall);
}

// ---- run --------------------------------------------------------------------

void run_run(const std::string& config_path, const std::string& out_override) {
  ExperimentConfig config = read_experiment_config(config_path);
  if (!out_override.empty()) config.out_dir = fs::absolute(out_override);
  if (config.out_dir.empty()) throw UsageError("no output directory: set out_dir or --out");
  const ExperimentResult r = run_experiment(config);
  for (const auto& c : r.curves) {
    std::printf("%-28s onset %s\n", c.name.c_str(),
                c.onset ? ("L" + std::to_string(*c.onset)).c_str() : "none");
  }
  std::printf("config hash %s\nwrote %s\n", r.config_hash.c_str(), r.out_dir.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer-wise probing and logit-lens analysis of arithmetic in language models",
               "arith-probe"};
  app.set_version_flag("--version", std::string(code_version()));
  app.require_subcommand(1);
  std::function<void()> action;

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a labeled dataset");
  gen_cmd->add_option("--task", gen.task,
                      "structure, sum_range, carry_pos, digit_pos, crossop_digit, logitlens, "
                      "exact_match")->required();
  gen_cmd->add_option("--n", gen.n, "Items (per class for sum_range)")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generation and split seed")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output dataset file")->required();
  gen_cmd->add_option("--position", gen.position, "Digit position: ones, tens, hundreds")
      ->capture_default_str();
  gen_cmd->add_option("--range-base", gen.range_base, "Sum-range base")->capture_default_str();
  gen_cmd->add_option("--digits", gen.digits, "Operand length (structure, exact_match)")
      ->capture_default_str();
  gen_cmd->add_option("--op", gen.op, "Operation for crossop_digit: add, sub, mul")
      ->capture_default_str();
  gen_cmd->add_option("--template", gen.template_name, "Prompt template: spaced or compact")
      ->capture_default_str();
  gen_cmd->add_option("--counts", gen.counts, "Structure class counts (three values)")
      ->expected(3);
  gen_cmd->add_option("--test-fraction", gen.test_fraction, "Test fraction per class")
      ->capture_default_str();
  gen_cmd->add_option("--val-fraction", gen.val_fraction, "Validation fraction of train")
      ->capture_default_str();
  gen_cmd->callback([&] { action = [&] { run_gen(gen); }; });

  auto* toylm = app.add_subcommand("toylm", "Train, evaluate and export the toy model");
  toylm->require_subcommand(1);
  std::string t_config, t_out, t_log, t_ckpt, t_dataset, t_answers, t_eval_out, t_store;
  bool t_no_unembed = false;
  auto* train = toylm->add_subcommand("train", "Train a toy model from a config file");
  train->add_option("--config", t_config, "Toy model config")->required();
  train->add_option("--out", t_out, "Checkpoint to write")->required();
  train->add_option("--log", t_log, "Training curve CSV");
  train->callback([&] { action = [&] { run_toylm_train(t_config, t_out, t_log); }; });
  auto* eval = toylm->add_subcommand("eval", "Greedy-decode a dataset and score exact match");
  eval->add_option("--ckpt", t_ckpt, "Checkpoint")->required();
  eval->add_option("--dataset", t_dataset, "Dataset file")->required();
  eval->add_option("--answers", t_answers, "Write generated answers (JSON lines)");
  eval->add_option("--out", t_eval_out, "Write exact-match artifacts to this directory");
  eval->callback([&] { action = [&] { run_toylm_eval(t_ckpt, t_dataset, t_answers, t_eval_out); }; });
  auto* exp = toylm->add_subcommand("export", "Write an activation store for a dataset");
  exp->add_option("--ckpt", t_ckpt, "Checkpoint")->required();
  exp->add_option("--dataset", t_dataset, "Dataset file")->required();
  exp->add_option("--out", t_store, "Store to write")->required();
  exp->add_flag("--no-unembedding", t_no_unembed, "Omit the unembedding matrix");
  exp->callback([&] { action = [&] { run_toylm_export(t_ckpt, t_dataset, t_store, t_no_unembed); }; });

  auto* store = app.add_subcommand("store", "Activation store utilities");
  store->require_subcommand(1);
  std::string s_path;
  auto* inspect = store->add_subcommand("inspect", "Print the header and class counts");
  inspect->add_option("path", s_path, "Store file")->required();
  inspect->callback([&] { action = [&] { run_store_inspect(s_path); }; });

  auto* probe = app.add_subcommand("probe", "Linear probe sweeps");
  probe->require_subcommand(1);
  ProbeArgs sweep_args, transfer_args;
  std::string p_store, p_train, p_test;
  auto* sweep = probe->add_subcommand("sweep", "Train probes at every layer state");
  sweep->add_option("--store", p_store, "Activation store")->required();
  sweep_args.add_to(sweep);
  sweep->callback([&] { action = [&] { run_probe_sweep(p_store, sweep_args); }; });
  auto* transfer = probe->add_subcommand("transfer", "Train on one store, test on another");
  transfer->add_option("--train-store", p_train, "Store to train on")->required();
  transfer->add_option("--test-store", p_test, "Store to evaluate on")->required();
  transfer_args.add_to(transfer);
  transfer->callback([&] { action = [&] { run_probe_transfer(p_train, p_test, transfer_args); }; });

  auto* lens = app.add_subcommand("lens", "Logit-lens analysis");
  lens->require_subcommand(1);
  std::vector<std::string> l_stores;
  std::string l_layers = "last10", l_out;
  bool l_norm = false;
  auto* hist = lens->add_subcommand("hist", "Earliest top-1 layer histogram");
  hist->add_option("--store", l_stores, "Logit-lens store; repeat for several runs")->required();
  hist->add_option("--layers", l_layers, "all, lastN, a..b or one layer")->capture_default_str();
  hist->add_flag("--final-norm", l_norm, "Apply the stored final norm before unembedding");
  hist->add_option("--out", l_out, "Output directory")->required();
  hist->callback([&] { action = [&] { run_lens_hist(l_stores, l_layers, l_norm, l_out); }; });

  auto* report = app.add_subcommand("report", "Stage ordering and exact-match tables");
  report->require_subcommand(1);
  std::string r_curves, r_hist, r_layers = "last10", r_out, r_answers;
  auto* stages = report->add_subcommand("stages", "Order signal families by onset layer");
  stages->add_option("--curves", r_curves, "Directory of curve .jsonl files")->required();
  stages->add_option("--hist", r_hist, "Lens histogram .jsonl");
  stages->add_option("--layers", r_layers, "Lens layers to plot")->capture_default_str();
  stages->add_option("--out", r_out, "Output directory")->required();
  stages->callback([&] { action = [&] { run_report_stages(r_curves, r_hist, r_layers, r_out); }; });
  auto* table = report->add_subcommand("table", "Exact-match table by operand length");
  table->add_option("--answers", r_answers, "Answers file (JSON lines)")->required();
  table->add_option("--out", r_out, "Output directory")->required();
  table->callback([&] { action = [&] { run_report_table(r_answers, r_out); }; });

  std::string run_config, run_out;
  auto* run = app.add_subcommand("run", "Run an experiment config end to end");
  run->add_option("--config", run_config, "Experiment config")->required();
  run->add_option("--out", run_out, "Override the output directory");
  run->callback([&] { action = [&] { run_run(run_config, run_out); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ExitCode::kUsage);
  }

  try {
    action();
    return static_cast<int>(ExitCode::kOk);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return static_cast<int>(ExitCode::kUsage);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return static_cast<int>(ExitCode::kNumeric);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(ExitCode::kData);
  }
}
