#include "arith/experiment.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "arith/activation_store.hpp"
#include "arith/binio.hpp"
#include "arith/errors.hpp"
#include "arith/kv_config.hpp"
#include "arith/lens.hpp"
#include "arith/report.hpp"
#include "arith/toy_export.hpp"
#include "arith/toy_lm.hpp"

#ifndef ARITH_VERSION
#define ARITH_VERSION "unknown"
#endif

namespace arith {
namespace {

std::vector<std::uint64_t> parse_u64_list(const KeyValue& kv) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(kv.value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    KeyValue one{kv.key, item, kv.line};
    const auto first = item.find_first_not_of(' ');
    const auto last = item.find_last_not_of(' ');
    if (first == std::string::npos) throw UsageError("key '" + kv.key + "' has an empty entry");
    one.value = item.substr(first, last - first + 1);
    out.push_back(kv_to_u64(one));
  }
  if (out.empty()) throw UsageError("key '" + kv.key + "' needs at least one value");
  return out;
}

std::string join(const std::vector<std::uint64_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// Rethrows any failure inside `fn` with the stage name in front.
template <typename Fn>
auto stage(std::string_view name, Fn&& fn) -> decltype(fn()) {
  const std::string prefix = "stage '" + std::string(name) + "': ";
  try {
    return fn();
  } catch (const UsageError& e) {
    throw UsageError(prefix + e.what());
  } catch (const NumericError& e) {
    throw NumericError(prefix + e.what());
  } catch (const std::exception& e) {
    throw DataError(prefix + e.what());
  }
}

struct NamedDataset {
  std::string name;
  ProbeDataset dataset;
};

std::vector<NamedDataset> build_datasets(const ExperimentConfig& c) {
  std::vector<NamedDataset> out;
  const auto v = c.template_variant;
  const std::uint64_t seed = c.dataset_seed;
  const std::array<std::string, 3> digit_names = {"hundreds", "tens", "ones"};
  switch (c.kind) {
    case ExperimentKind::kStructure: {
      StructureCounts counts = StructureCounts::standard(c.digit_len);
      if (c.structure_counts) counts.per_class = *c.structure_counts;
      out.push_back({"structure", gen_structure_dataset(c.digit_len, counts, seed, v)});
      break;
    }
    case ExperimentKind::kSumRange: {
      auto sets = gen_sum_range_dataset(c.range_bases, c.per_class, seed, v);
      for (std::size_t i = 0; i < sets.size(); ++i) {
        out.push_back({"sum_range_" + std::to_string(c.range_bases[i]), std::move(sets[i])});
      }
      break;
    }
    case ExperimentKind::kCarry:
      for (std::uint32_t pos : {kOnes, kTens, kHundreds}) {
        out.push_back({"carry_" + std::string(position_name(pos)),
                       gen_carry_dataset(pos, c.n, seed, v)});
      }
      break;
    case ExperimentKind::kDigit: {
      auto sets = gen_digit_dataset(c.n, seed, v);
      for (std::size_t i = 0; i < 3; ++i) {
        out.push_back({"digit_" + digit_names[i], std::move(sets[i])});
      }
      break;
    }
    case ExperimentKind::kCrossop: {
      auto add = gen_digit_dataset(c.n, seed, v);
      out.push_back({"crossop_add", std::move(add[0])});
      out.push_back({"crossop_sub", gen_crossop_dataset(Operation::kSub, c.n, seed, v)});
      out.push_back({"crossop_mul", gen_crossop_dataset(Operation::kMul, c.n, seed, v)});
      break;
    }
    case ExperimentKind::kLens: {
      const auto seeds = c.lens_seeds.empty() ? std::vector<std::uint64_t>{seed} : c.lens_seeds;
      for (std::uint64_t s : seeds) {
        out.push_back({"logitlens_seed" + std::to_string(s), gen_logitlens_dataset(c.n, s, v)});
      }
      break;
    }
  }
  for (auto& d : out) {
    d.dataset = split_stratified(std::move(d.dataset), d.dataset.seed, c.probe.split);
  }
  return out;
}

std::string curve_name_for(const ExperimentConfig& c, const NamedDataset& d,
                           const LayerCurve& curve) {
  std::string name = c.kind == ExperimentKind::kCrossop
                         ? "crossop/add_to_" + d.name.substr(std::string("crossop_").size())
                         : curve.name;
  if (c.shuffle_labels_seed) name += "/shuffled";
  return name;
}

}  // namespace

std::string_view to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::kStructure: return "structure";
    case ExperimentKind::kSumRange: return "sum_range";
    case ExperimentKind::kCarry: return "carry";
    case ExperimentKind::kDigit: return "digit";
    case ExperimentKind::kCrossop: return "crossop";
    case ExperimentKind::kLens: return "lens";
  }
  return "?";
}

std::optional<ExperimentKind> parse_experiment_kind(std::string_view text) {
  for (auto k : {ExperimentKind::kStructure, ExperimentKind::kSumRange, ExperimentKind::kCarry,
                 ExperimentKind::kDigit, ExperimentKind::kCrossop, ExperimentKind::kLens}) {
    if (text == to_string(k)) return k;
  }
  if (text == "sum-range") return ExperimentKind::kSumRange;
  return std::nullopt;
}

std::string_view code_version() { return ARITH_VERSION; }

namespace {

// Shortest text that parses back to the same double.
std::string shortest(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return {buf, r.ptr};
}

}  // namespace

std::string ExperimentConfig::canonical_text() const {
  std::string s;
  auto put = [&](std::string_view k, const std::string& v) {
    s += std::string(k) + " = " + v + "\n";
  };
  put("experiment", std::string(to_string(kind)));
  if (checkpoint) put("checkpoint", checkpoint->generic_string());
  if (toy_config) put("toy_config", toy_config->generic_string());
  if (store_dir) put("store_dir", store_dir->generic_string());
  put("dataset_seed", std::to_string(dataset_seed));
  put("n", std::to_string(n));
  put("digit_len", std::to_string(digit_len));
  if (!range_bases.empty()) put("range_bases", join(range_bases));
  put("per_class", std::to_string(per_class));
  if (structure_counts) {
    put("structure_counts", join({(*structure_counts)[0], (*structure_counts)[1],
                                  (*structure_counts)[2]}));
  }
  if (!lens_seeds.empty()) put("lens_seeds", join(lens_seeds));
  put("lens_layers", lens_layers);
  put("lens_final_norm", lens_final_norm ? "true" : "false");
  put("template", std::string(to_string(template_variant)));
  put("probe_seeds", join(probe.seeds));
  put("probe_epochs", std::to_string(probe.epochs));
  put("probe_learning_rate", shortest(probe.learning_rate));
  put("probe_batch_size", std::to_string(probe.batch_size));
  put("probe_standardize", probe.standardize ? "true" : "false");
  put("test_fraction", shortest(probe.split.test_fraction));
  put("val_fraction", shortest(probe.split.val_fraction));
  if (shuffle_labels_seed) put("shuffle_labels_seed", std::to_string(*shuffle_labels_seed));
  return s;
}

ExperimentConfig parse_experiment_config(std::string_view text) {
  ExperimentConfig c;
  bool have_kind = false;
  const std::map<std::string, std::function<void(const KeyValue&)>, std::less<>> setters = {
      {"experiment", [&](const KeyValue& kv) {
         const auto k = parse_experiment_kind(kv.value);
         if (!k) throw UsageError("unknown experiment '" + kv.value + "'");
         c.kind = *k;
         have_kind = true;
       }},
      {"out_dir", [&](const KeyValue& kv) { c.out_dir = kv.value; }},
      {"checkpoint", [&](const KeyValue& kv) { c.checkpoint = kv.value; }},
      {"toy_config", [&](const KeyValue& kv) { c.toy_config = kv.value; }},
      {"store_dir", [&](const KeyValue& kv) { c.store_dir = kv.value; }},
      {"dataset_seed", [&](const KeyValue& kv) { c.dataset_seed = kv_to_u64(kv); }},
      {"n", [&](const KeyValue& kv) { c.n = kv_to_u64(kv); }},
      {"digit_len", [&](const KeyValue& kv) { c.digit_len = static_cast<std::uint32_t>(kv_to_u64(kv)); }},
      {"range_bases", [&](const KeyValue& kv) { c.range_bases = parse_u64_list(kv); }},
      {"per_class", [&](const KeyValue& kv) { c.per_class = kv_to_u64(kv); }},
      {"structure_counts", [&](const KeyValue& kv) {
         const auto v = parse_u64_list(kv);
         if (v.size() != 3) throw UsageError("structure_counts needs three values");
         c.structure_counts = std::array<std::size_t, 3>{v[0], v[1], v[2]};
       }},
      {"lens_seeds", [&](const KeyValue& kv) { c.lens_seeds = parse_seed_list(kv.value); }},
      {"lens_layers", [&](const KeyValue& kv) { c.lens_layers = kv.value; }},
      {"lens_final_norm", [&](const KeyValue& kv) { c.lens_final_norm = kv_to_bool(kv); }},
      {"template", [&](const KeyValue& kv) {
         const auto v = parse_template_variant(kv.value);
         if (!v) throw UsageError("template must be 'compact' or 'spaced'");
         c.template_variant = *v;
       }},
      {"probe_seeds", [&](const KeyValue& kv) { c.probe.seeds = parse_seed_list(kv.value); }},
      {"probe_epochs", [&](const KeyValue& kv) { c.probe.epochs = static_cast<std::uint32_t>(kv_to_u64(kv)); }},
      {"probe_learning_rate", [&](const KeyValue& kv) { c.probe.learning_rate = kv_to_double(kv); }},
      {"probe_batch_size", [&](const KeyValue& kv) { c.probe.batch_size = static_cast<std::uint32_t>(kv_to_u64(kv)); }},
      {"probe_standardize", [&](const KeyValue& kv) { c.probe.standardize = kv_to_bool(kv); }},
      {"probe_jobs", [&](const KeyValue& kv) { c.probe.jobs = static_cast<std::uint32_t>(kv_to_u64(kv)); }},
      {"test_fraction", [&](const KeyValue& kv) { c.probe.split.test_fraction = kv_to_double(kv); }},
      {"val_fraction", [&](const KeyValue& kv) { c.probe.split.val_fraction = kv_to_double(kv); }},
      {"shuffle_labels_seed", [&](const KeyValue& kv) { c.shuffle_labels_seed = kv_to_u64(kv); }},
  };
  for (const auto& kv : parse_key_values(text)) {
    const auto it = setters.find(kv.key);
    if (it == setters.end()) {
      throw UsageError("line " + std::to_string(kv.line) + ": unknown experiment key '" +
                       kv.key + "'");
    }
    it->second(kv);
  }
  if (!have_kind) throw UsageError("experiment config needs an 'experiment' key");
  if (c.out_dir.empty()) throw UsageError("experiment config needs an 'out_dir' key");
  const int sources = (c.checkpoint ? 1 : 0) + (c.toy_config ? 1 : 0) + (c.store_dir ? 1 : 0);
  if (sources != 1) {
    throw UsageError("exactly one of checkpoint, toy_config or store_dir must be set");
  }
  if (c.probe.seeds.empty()) throw UsageError("probe_seeds is empty");
  return c;
}

ExperimentConfig read_experiment_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw DataError("experiment config " + path.string() + " does not exist");
  }
  return parse_experiment_config(read_text_file(path.string()));
}

std::vector<std::string> expected_store_names(const ExperimentConfig& config) {
  std::vector<std::string> names;
  // Names only depend on the kind and the seed/base lists.
  switch (config.kind) {
    case ExperimentKind::kStructure: names = {"structure"}; break;
    case ExperimentKind::kSumRange:
      for (auto b : config.range_bases) names.push_back("sum_range_" + std::to_string(b));
      break;
    case ExperimentKind::kCarry: names = {"carry_ones", "carry_tens", "carry_hundreds"}; break;
    case ExperimentKind::kDigit: names = {"digit_hundreds", "digit_tens", "digit_ones"}; break;
    case ExperimentKind::kCrossop: names = {"crossop_add", "crossop_sub", "crossop_mul"}; break;
    case ExperimentKind::kLens: {
      const auto seeds = config.lens_seeds.empty()
                             ? std::vector<std::uint64_t>{config.dataset_seed}
                             : config.lens_seeds;
      for (auto s : seeds) names.push_back("logitlens_seed" + std::to_string(s));
      break;
    }
  }
  for (auto& n : names) n += ".store";
  return names;
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  namespace fs = std::filesystem;
  ExperimentResult result;
  result.out_dir = config.out_dir;
  const std::string canonical = config.canonical_text();
  result.config_hash = binio::fnv1a_hex(canonical);

  std::optional<ToyLM> model;
  stage("model", [&] {
    if (config.checkpoint) {
      if (!fs::exists(*config.checkpoint)) {
        throw DataError("checkpoint " + config.checkpoint->string() + " does not exist");
      }
      model = read_checkpoint(*config.checkpoint);
    } else if (config.toy_config) {
      if (!fs::exists(*config.toy_config)) {
        throw DataError("toy config " + config.toy_config->string() + " does not exist");
      }
      const ToyLMConfig tc = read_toylm_config(*config.toy_config);
      TrainResult trained = train_toy_lm(tc);
      fs::create_directories(config.out_dir / "model");
      write_checkpoint(config.out_dir / "model" / "toy.ckpt", trained.model, CharTokenizer{});
      std::string log = "step,loss,learning_rate\n";
      for (const auto& e : trained.curve) {
        log += std::to_string(e.step) + "," + format_fixed(e.loss) + "," +
               format_fixed(e.learning_rate) + "\n";
      }
      log += "# heldout_exact_match=" + format_fixed(trained.heldout_exact_match) + "\n";
      std::ofstream(config.out_dir / "model" / "train_log.csv", std::ios::binary) << log;
      model = std::move(trained.model);
    } else {
      if (!fs::is_directory(*config.store_dir)) {
        throw DataError("store directory " + config.store_dir->string() + " does not exist");
      }
      for (const auto& name : expected_store_names(config)) {
        if (!fs::exists(*config.store_dir / name)) {
          throw DataError("store " + (*config.store_dir / name).string() + " does not exist");
        }
      }
    }
  });

  const std::vector<NamedDataset> datasets = stage("datasets", [&] {
    auto sets = build_datasets(config);
    fs::create_directories(config.out_dir / "data");
    for (const auto& d : sets) write_dataset(config.out_dir / "data" / (d.name + ".jsonl"), d.dataset);
    return sets;
  });

  std::vector<ActivationStore> stores = stage("export", [&] {
    std::vector<ActivationStore> out;
    if (model) fs::create_directories(config.out_dir / "stores");
    for (const auto& d : datasets) {
      ActivationStore s;
      if (model) {
        s = export_activations(*model, CharTokenizer{}, d.dataset);
        write_store(config.out_dir / "stores" / (d.name + ".store"), s);
      } else {
        s = read_store(*config.store_dir / (d.name + ".store"));
        if (s.size() != d.dataset.items.size()) {
          throw DataError("store " + d.name + " holds " + std::to_string(s.size()) +
                          " samples but the dataset has " +
                          std::to_string(d.dataset.items.size()));
        }
      }
      if (config.shuffle_labels_seed) s = shuffle_labels(s, *config.shuffle_labels_seed);
      out.push_back(std::move(s));
    }
    return out;
  });

  ArtifactInputs artifacts;
  if (config.kind != ExperimentKind::kLens) {
    stage("probe", [&] {
      fs::create_directories(config.out_dir / "curves");
      auto keep = [&](LayerCurve curve, const NamedDataset& d) {
        curve.name = curve_name_for(config, d, curve);
        if (config.kind == ExperimentKind::kCrossop) curve.family = "digit";
        const std::string slug = curve_slug(curve);
        write_curve_raw(config.out_dir / "curves" / (slug + ".jsonl"), curve);
        std::ofstream(config.out_dir / "curves" / (slug + ".csv"), std::ios::binary)
            << curve_csv(curve);
        result.curves.push_back(std::move(curve));
      };
      if (config.kind == ExperimentKind::kCrossop) {
        for (std::size_t i = 0; i < datasets.size(); ++i) {
          LayerCurve curve = i == 0 ? layer_sweep(stores[0], datasets[0].dataset.task, config.probe)
                                    : crossop_transfer(stores[0], stores[i],
                                                       datasets[0].dataset.task, config.probe);
          keep(std::move(curve), datasets[i]);
        }
      } else {
        for (std::size_t i = 0; i < datasets.size(); ++i) {
          keep(layer_sweep(stores[i], datasets[i].dataset.task, config.probe), datasets[i]);
        }
      }
    });
    artifacts.curves = result.curves;
  } else {
    stage("lens", [&] {
      LensOptions opts;
      opts.apply_final_norm = config.lens_final_norm;
      LensHistogramSet set = earliest_top1_runs(stores, opts);
      fs::create_directories(config.out_dir / "curves");
      write_histogram_raw(config.out_dir / "curves" / "lens_hist.jsonl", set);
      artifacts.lens_layers = parse_layer_selection(config.lens_layers, set.n_layer_states());
      artifacts.lens = std::move(set);
    });
  }

  stage("report", [&] {
    artifacts.manifest_fields = {
        {"experiment", std::string(to_string(config.kind))},
        {"config_hash", result.config_hash},
        {"code_version", std::string(code_version())},
        {"dataset_seed", std::to_string(config.dataset_seed)},
        {"probe_seeds", join(config.probe.seeds)},
        {"model_source", config.checkpoint ? "checkpoint" : config.toy_config ? "toy_config"
                                                                              : "store_dir"},
    };
    emit_artifacts(config.out_dir, artifacts);
    std::ofstream(config.out_dir / "config.resolved", std::ios::binary) << canonical;
  });
  return result;
}

}  // namespace arith
