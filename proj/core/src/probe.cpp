#include "arith/probe.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <thread>

#include <boost/math/distributions/students_t.hpp>

#include "arith/errors.hpp"
#include "arith/rng.hpp"

namespace arith {
namespace {

// Offsets the minibatch-order stream from the split stream of the same seed.
constexpr std::uint64_t kOrderStream = 0x9e3779b97f4a7c15ULL;

Eigen::MatrixXd layer_inputs(const ActivationStore& store, std::uint32_t layer) {
  if (layer >= store.header.n_layer_states) {
    throw DataError("layer " + std::to_string(layer) + " out of range (store has " +
                    std::to_string(store.header.n_layer_states) + " layer states)");
  }
  return store.layer_matrix(layer).cast<double>();
}

std::uint32_t argmax_row(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  Eigen::Index best = 0;
  for (Eigen::Index k = 1; k < row.size(); ++k) {
    if (row[k] > row[best]) best = k;
  }
  return static_cast<std::uint32_t>(best);
}

Eigen::MatrixXd standardized(const LinearProbe& probe, const Eigen::MatrixXd& x) {
  if (probe.input_mean.size() == 0) return x;
  return (x.rowwise() - probe.input_mean.transpose()).array().rowwise() *
         probe.input_scale.transpose().array();
}

double accuracy_on(const LinearProbe& probe, const Eigen::MatrixXd& inputs,
                   std::span<const std::uint32_t> labels,
                   std::span<const std::size_t> indices) {
  if (indices.empty()) throw DataError("cannot evaluate a probe on an empty split");
  Eigen::MatrixXd x(static_cast<Eigen::Index>(indices.size()), inputs.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    x.row(static_cast<Eigen::Index>(i)) = inputs.row(static_cast<Eigen::Index>(indices[i]));
  }
  const Eigen::MatrixXd logits =
      (standardized(probe, x) * probe.weights.transpose()).rowwise() +
      probe.bias.transpose();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (argmax_row(logits.row(static_cast<Eigen::Index>(i))) == labels[indices[i]]) {
      ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

void check_task(const ActivationStore& store, const TaskLabelSpec& task) {
  if (store.header.task.num_classes != task.num_classes) {
    throw DataError("store has " + std::to_string(store.header.task.num_classes) +
                    " classes but task expects " + std::to_string(task.num_classes));
  }
}

TrainedProbe train_on(const Eigen::MatrixXd& inputs, std::span<const std::uint32_t> labels,
                      std::uint32_t layer, const TaskLabelSpec& task,
                      const ProbeTrainConfig& config, std::uint64_t seed) {
  const std::uint32_t k_classes = task.num_classes;
  TrainedProbe out;
  out.splits = stratified_split(labels, k_classes, seed, config.split);
  const auto& train = out.splits.train;

  std::vector<bool> present(k_classes, false);
  for (std::size_t i : train) present[labels[i]] = true;
  if (std::count(present.begin(), present.end(), true) < 2) {
    throw DataError("training split holds fewer than two classes");
  }

  LinearProbe probe = LinearProbe::zeros(k_classes, static_cast<std::size_t>(inputs.cols()));
  probe.layer = layer;
  probe.task = task;
  probe.train_seed = seed;

  const Eigen::Index d = inputs.cols();
  if (config.standardize) {
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
    for (std::size_t i : train) mean += inputs.row(static_cast<Eigen::Index>(i)).transpose();
    mean /= static_cast<double>(train.size());
    Eigen::VectorXd var = Eigen::VectorXd::Zero(d);
    for (std::size_t i : train) {
      var += (inputs.row(static_cast<Eigen::Index>(i)).transpose() - mean).array().square().matrix();
    }
    var /= static_cast<double>(train.size());
    probe.input_mean = mean;
    probe.input_scale = var.unaryExpr([](double v) { return v > 1e-12 ? 1.0 / std::sqrt(v) : 1.0; });
  }
  const Eigen::MatrixXd x_all = standardized(probe, inputs);

  const std::size_t batch =
      config.batch_size == 0 ? train.size() : std::min<std::size_t>(config.batch_size, train.size());
  std::vector<std::size_t> order(train.begin(), train.end());
  Rng rng(seed ^ kOrderStream);

  Eigen::MatrixXd m_w = Eigen::MatrixXd::Zero(k_classes, d);
  Eigen::MatrixXd v_w = m_w;
  Eigen::VectorXd m_b = Eigen::VectorXd::Zero(k_classes);
  Eigen::VectorXd v_b = m_b;
  std::uint64_t step = 0;

  LinearProbe best = probe;
  double best_val = -1.0;
  Eigen::MatrixXd xb;
  std::vector<std::uint32_t> yb;

  for (std::uint32_t epoch = 1; epoch <= config.epochs; ++epoch) {
    if (batch < train.size()) rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t n = std::min(batch, order.size() - start);
      xb.resize(static_cast<Eigen::Index>(n), d);
      yb.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        xb.row(static_cast<Eigen::Index>(i)) = x_all.row(static_cast<Eigen::Index>(order[start + i]));
        yb[i] = labels[order[start + i]];
      }
      const ProbeLoss g = probe_loss_and_grad(probe.weights, probe.bias, xb, yb);
      if (!std::isfinite(g.loss)) throw NumericError("probe loss is not finite");
      loss_sum += g.loss;
      ++n_batches;

      ++step;
      const double b1 = config.adam_beta1;
      const double b2 = config.adam_beta2;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
      const double lr = config.learning_rate;
      const double eps = config.adam_eps;
      m_w = b1 * m_w + (1.0 - b1) * g.grad_weights;
      v_w = b2 * v_w + (1.0 - b2) * g.grad_weights.cwiseAbs2();
      m_b = b1 * m_b + (1.0 - b1) * g.grad_bias;
      v_b = b2 * v_b + (1.0 - b2) * g.grad_bias.cwiseAbs2();
      probe.weights.array() -=
          lr * (m_w.array() / c1) / ((v_w.array() / c2).sqrt() + eps);
      probe.bias.array() -= lr * (m_b.array() / c1) / ((v_b.array() / c2).sqrt() + eps);
    }
    out.epoch_losses.push_back(loss_sum / static_cast<double>(n_batches));

    if (!out.splits.val.empty()) {
      const double val = accuracy_on(probe, inputs, labels, out.splits.val);
      if (val > best_val) {
        best_val = val;
        best = probe;
        out.best_epoch = epoch;
      }
    }
  }
  if (out.splits.val.empty()) {
    best = probe;
  } else {
    out.val_accuracy = best_val;
  }
  out.probe = std::move(best);
  out.test_accuracy = accuracy_on(out.probe, inputs, labels, out.splits.test);
  return out;
}

// Runs fn(job) for job in [0, n) on up to `jobs` threads. Each job writes only
// its own slot, so results do not depend on scheduling.
template <typename Fn>
void run_jobs(std::size_t n, std::uint32_t jobs, Fn&& fn) {
  const std::size_t workers = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
}

struct Slot {
  double accuracy = 0.0;
  std::optional<std::string> error;
};

LayerCurve assemble(const TaskLabelSpec& task, const ProbeTrainConfig& config,
                    std::uint32_t n_layers, const std::vector<Slot>& slots) {
  LayerCurve curve;
  curve.family = family_for(task);
  curve.name = curve_name(task);
  curve.task = task;
  curve.chance = 1.0 / static_cast<double>(task.num_classes);
  curve.seeds = config.seeds;
  const std::size_t n_seeds = config.seeds.size();
  for (std::uint32_t layer = 0; layer < n_layers; ++layer) {
    LayerPoint point;
    point.layer = layer;
    for (std::size_t s = 0; s < n_seeds; ++s) {
      const Slot& slot = slots[layer * n_seeds + s];
      if (slot.error && !point.error) point.error = *slot.error;
      point.per_seed.push_back(slot.accuracy);
    }
    if (point.error) {
      point.per_seed.clear();
    } else {
      const MeanCi ci = mean_ci95(point.per_seed);
      point.mean = ci.mean;
      point.ci95 = ci.half_width;
    }
    curve.points.push_back(std::move(point));
  }
  curve.onset = onset_layer(curve);
  return curve;
}

template <typename Train>
LayerCurve sweep(const ActivationStore& store, const TaskLabelSpec& task,
                 const ProbeTrainConfig& config, Train&& train_one) {
  if (config.seeds.empty()) throw UsageError("at least one probe seed is required");
  const std::uint32_t n_layers = store.header.n_layer_states;
  const std::size_t n_seeds = config.seeds.size();
  std::vector<Eigen::MatrixXd> inputs(n_layers);
  for (std::uint32_t l = 0; l < n_layers; ++l) inputs[l] = layer_inputs(store, l);

  std::vector<Slot> slots(n_layers * n_seeds);
  run_jobs(slots.size(), config.jobs, [&](std::size_t job) {
    const auto layer = static_cast<std::uint32_t>(job / n_seeds);
    const std::uint64_t seed = config.seeds[job % n_seeds];
    try {
      slots[job].accuracy = train_one(inputs[layer], layer, seed);
    } catch (const std::exception& e) {
      slots[job].error = e.what();
    }
  });
  return assemble(task, config, n_layers, slots);
}

}  // namespace

LinearProbe LinearProbe::zeros(std::size_t num_classes, std::size_t d_model) {
  LinearProbe p;
  p.weights = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(num_classes),
                                    static_cast<Eigen::Index>(d_model));
  p.bias = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(num_classes));
  return p;
}

Eigen::VectorXd probe_forward(const LinearProbe& probe, const Eigen::VectorXd& h) {
  if (static_cast<std::size_t>(h.size()) != probe.input_dim()) {
    throw DataError("probe expects width " + std::to_string(probe.input_dim()) +
                    ", got " + std::to_string(h.size()));
  }
  Eigen::VectorXd x = h;
  if (probe.input_mean.size() != 0) {
    x = (h - probe.input_mean).cwiseProduct(probe.input_scale);
  }
  Eigen::VectorXd z = probe.weights * x + probe.bias;
  z.array() -= z.maxCoeff();
  z = z.array().exp();
  return z / z.sum();
}

Eigen::VectorXd probe_forward(const LinearProbe& probe, std::span<const float> h) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(h.size()));
  for (std::size_t i = 0; i < h.size(); ++i) v[static_cast<Eigen::Index>(i)] = h[i];
  return probe_forward(probe, v);
}

std::uint32_t probe_predict(const LinearProbe& probe, std::span<const float> h) {
  const Eigen::VectorXd p = probe_forward(probe, h);
  return argmax_row(p.transpose());
}

ProbeLoss probe_loss_and_grad(const Eigen::MatrixXd& weights, const Eigen::VectorXd& bias,
                              const Eigen::MatrixXd& inputs,
                              std::span<const std::uint32_t> labels) {
  const Eigen::Index n = inputs.rows();
  if (n == 0 || static_cast<std::size_t>(n) != labels.size()) {
    throw DataError("probe loss needs one label per input row");
  }
  if (inputs.cols() != weights.cols() || bias.size() != weights.rows()) {
    throw DataError("probe parameter shapes do not match the inputs");
  }
  Eigen::MatrixXd logits = (inputs * weights.transpose()).rowwise() + bias.transpose();
  ProbeLoss out;
  for (Eigen::Index i = 0; i < n; ++i) {
    auto row = logits.row(i);
    const double mx = row.maxCoeff();
    row.array() -= mx;
    const double lse = std::log(row.array().exp().sum());
    const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]);
    if (y >= weights.rows()) throw DataError("label out of range");
    out.loss -= row[y] - lse;
    row = (row.array() - lse).exp();
    row[y] -= 1.0;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  out.loss *= inv_n;
  out.grad_weights = logits.transpose() * inputs * inv_n;
  out.grad_bias = logits.colwise().sum().transpose() * inv_n;
  return out;
}

std::vector<std::uint64_t> parse_seed_list(std::string_view text) {
  auto to_u64 = [&](std::string_view s) {
    if (s.empty() || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      throw UsageError("invalid seed list '" + std::string(text) + "'");
    }
    return std::stoull(std::string(s));
  };
  std::vector<std::uint64_t> seeds;
  if (auto dots = text.find(".."); dots != std::string_view::npos) {
    const std::uint64_t lo = to_u64(text.substr(0, dots));
    const std::uint64_t hi = to_u64(text.substr(dots + 2));
    if (hi < lo || hi - lo >= 10000) throw UsageError("invalid seed range '" + std::string(text) + "'");
    for (std::uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
    return seeds;
  }
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = std::min(text.find(',', start), text.size());
    seeds.push_back(to_u64(text.substr(start, comma - start)));
    start = comma + 1;
  }
  return seeds;
}

TrainedProbe train_probe(const ActivationStore& store, std::uint32_t layer,
                         const TaskLabelSpec& task, const ProbeTrainConfig& config,
                         std::uint64_t seed) {
  check_task(store, task);
  const Eigen::MatrixXd inputs = layer_inputs(store, layer);
  const std::vector<std::uint32_t> labels = store.labels();
  return train_on(inputs, labels, layer, task, config, seed);
}

double eval_probe(const LinearProbe& probe, const ActivationStore& store,
                  std::span<const std::size_t> indices) {
  const Eigen::MatrixXd inputs = layer_inputs(store, probe.layer);
  if (static_cast<std::size_t>(inputs.cols()) != probe.input_dim()) {
    throw DataError("probe width does not match the store");
  }
  const std::vector<std::uint32_t> labels = store.labels();
  for (std::size_t i : indices) {
    if (i >= labels.size()) throw DataError("sample index out of range");
  }
  return accuracy_on(probe, inputs, labels, indices);
}

double eval_probe(const LinearProbe& probe, const ActivationStore& store) {
  std::vector<std::size_t> all(store.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return eval_probe(probe, store, all);
}

std::vector<double> LayerCurve::means() const {
  std::vector<double> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(p.mean);
  return out;
}

MeanCi mean_ci95(std::span<const double> values) {
  MeanCi out;
  if (values.empty()) return out;
  const double n = static_cast<double>(values.size());
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() < 2) return out;
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  const boost::math::students_t dist(n - 1.0);
  out.half_width = boost::math::quantile(dist, 0.975) * sd / std::sqrt(n);
  return out;
}

std::string family_for(const TaskLabelSpec& task) {
  switch (task.kind) {
    case TaskKind::kStructure3: return "structure";
    case TaskKind::kSumRange: return "sum";
    case TaskKind::kCarryPos: return "carry";
    case TaskKind::kDigitPos:
    case TaskKind::kCrossopDigit: return "digit";
    case TaskKind::kLogitLens:
    case TaskKind::kExactMatch: return "output";
  }
  return "other";
}

std::string curve_name(const TaskLabelSpec& task) {
  std::string name(to_string(task.kind));
  if (task.position) name += "/" + std::string(position_name(*task.position));
  if (task.range_base) name += "/base" + std::to_string(*task.range_base);
  return name;
}

LayerCurve layer_sweep(const ActivationStore& store, const TaskLabelSpec& task,
                       const ProbeTrainConfig& config) {
  check_task(store, task);
  const std::vector<std::uint32_t> labels = store.labels();
  return sweep(store, task, config,
               [&](const Eigen::MatrixXd& inputs, std::uint32_t layer, std::uint64_t seed) {
                 return train_on(inputs, labels, layer, task, config, seed).test_accuracy;
               });
}

LayerCurve crossop_transfer(const ActivationStore& train_store,
                            const ActivationStore& test_store, const TaskLabelSpec& task,
                            const ProbeTrainConfig& config) {
  const auto& a = train_store.header;
  const auto& b = test_store.header;
  if (a.model_name != b.model_name) {
    throw DataError("stores come from different models ('" + a.model_name + "' vs '" +
                    b.model_name + "')");
  }
  if (a.d_model != b.d_model || a.n_layer_states != b.n_layer_states) {
    throw DataError("stores disagree on width or depth");
  }
  check_task(train_store, task);
  check_task(test_store, task);
  if (test_store.size() == 0) throw DataError("transfer store is empty");

  const std::vector<std::uint32_t> train_labels = train_store.labels();
  const std::vector<std::uint32_t> test_labels = test_store.labels();
  std::vector<std::size_t> all(test_store.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<Eigen::MatrixXd> test_inputs(b.n_layer_states);
  for (std::uint32_t l = 0; l < b.n_layer_states; ++l) test_inputs[l] = layer_inputs(test_store, l);

  return sweep(train_store, task, config,
               [&](const Eigen::MatrixXd& inputs, std::uint32_t layer, std::uint64_t seed) {
                 const TrainedProbe t = train_on(inputs, train_labels, layer, task, config, seed);
                 return accuracy_on(t.probe, test_inputs[layer], test_labels, all);
               });
}

std::optional<std::uint32_t> onset_layer(const LayerCurve& curve, double plateau_fraction,
                                         double chance_margin) {
  if (curve.points.empty()) return std::nullopt;
  std::vector<double> m;
  for (const auto& p : curve.points) m.push_back(p.error ? 0.0 : p.mean);
  const auto peak = static_cast<std::size_t>(std::max_element(m.begin(), m.end()) - m.begin());
  const double bound = plateau_fraction * m[peak];
  std::size_t onset = peak;
  while (onset > 0 && m[onset - 1] >= bound) --onset;
  while (onset <= peak && !(m[onset] > curve.chance + chance_margin)) ++onset;
  if (onset > peak) return std::nullopt;
  return static_cast<std::uint32_t>(curve.points[onset].layer);
}

}  // namespace arith
