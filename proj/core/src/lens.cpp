#include "arith/lens.hpp"

#include <algorithm>
#include <charconv>

#include "arith/errors.hpp"

namespace arith {

Eigen::VectorXd lens_logits(std::span<const float> h,
                            const Eigen::Ref<const UnembeddingMatrix>& unembedding) {
  if (static_cast<Eigen::Index>(h.size()) != unembedding.cols()) {
    throw DataError("lens state width " + std::to_string(h.size()) +
                    " does not match unembedding width " +
                    std::to_string(unembedding.cols()));
  }
  const Eigen::Map<const Eigen::VectorXf> hv(h.data(), static_cast<Eigen::Index>(h.size()));
  return unembedding.cast<double>() * hv.cast<double>();
}

std::uint32_t gold_rank(std::span<const double> logits, std::uint32_t gold) {
  if (gold >= logits.size()) throw DataError("gold token id out of vocabulary range");
  const double g = logits[gold];
  std::uint32_t rank = 1;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i] > g || (logits[i] == g && i < gold)) ++rank;
  }
  return rank;
}

std::uint32_t gold_rank(const Eigen::VectorXd& logits, std::uint32_t gold) {
  return gold_rank(std::span<const double>(logits.data(), static_cast<std::size_t>(logits.size())),
                   gold);
}

std::uint32_t top1_token(const Eigen::VectorXd& logits) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<std::uint32_t>(best);
}

LensResult lens_sample(const ActivationStore& store, std::size_t sample,
                       const LensOptions& options) {
  if (!store.unembedding) throw DataError("activation store has no unembedding block");
  if (options.apply_final_norm && !store.final_norm) {
    throw DataError("final normalization requested but the store has no final-norm block");
  }
  const StoreSample& s = store.samples.at(sample);
  if (!s.gold_token) {
    throw DataError("sample " + std::to_string(sample) + " has no gold token");
  }
  const auto w_u = store.unembedding_matrix();
  LensResult r;
  r.sample_id = s.id;
  r.gold = *s.gold_token;
  for (std::uint32_t l = 0; l < store.header.n_layer_states; ++l) {
    Eigen::VectorXd logits;
    if (options.apply_final_norm) {
      const std::vector<float> normed = store.final_norm->apply(store.state(sample, l));
      logits = lens_logits(normed, w_u);
    } else {
      logits = lens_logits(store.state(sample, l), w_u);
    }
    const std::uint32_t rank = gold_rank(logits, r.gold);
    r.ranks.push_back(rank);
    r.top1.push_back(top1_token(logits));
    if (rank == 1 && !r.earliest_top1) r.earliest_top1 = l;
  }
  return r;
}

LensAnalysis earliest_top1(const ActivationStore& store, const LensOptions& options) {
  LensAnalysis out;
  out.histogram.n_layer_states = store.header.n_layer_states;
  out.histogram.n_samples = store.size();
  out.histogram.counts.assign(store.header.n_layer_states, 0);
  out.histogram.final_norm_applied = options.apply_final_norm;
  out.results.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    LensResult r = lens_sample(store, i, options);
    if (r.earliest_top1) {
      ++out.histogram.counts[*r.earliest_top1];
    } else {
      ++out.histogram.never;
    }
    out.results.push_back(std::move(r));
  }
  return out;
}

std::uint32_t LensHistogramSet::n_layer_states() const {
  return runs.empty() ? 0 : runs.front().n_layer_states;
}

std::vector<double> LensHistogramSet::mean_counts() const {
  std::vector<double> mean(n_layer_states(), 0.0);
  for (const auto& run : runs) {
    for (std::size_t l = 0; l < mean.size(); ++l) mean[l] += static_cast<double>(run.counts[l]);
  }
  for (double& m : mean) m /= static_cast<double>(runs.size());
  return mean;
}

double LensHistogramSet::mean_never() const {
  if (runs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& run : runs) total += static_cast<double>(run.never);
  return total / static_cast<double>(runs.size());
}

std::optional<std::uint32_t> LensHistogramSet::modal_layer() const {
  const std::vector<double> mean = mean_counts();
  std::optional<std::uint32_t> best;
  for (std::uint32_t l = 0; l < mean.size(); ++l) {
    if (mean[l] > 0.0 && (!best || mean[l] > mean[*best])) best = l;
  }
  return best;
}

LensHistogramSet earliest_top1_runs(std::span<const ActivationStore> stores,
                                    const LensOptions& options) {
  if (stores.empty()) throw UsageError("at least one store is required");
  LensHistogramSet set;
  for (std::size_t i = 0; i < stores.size(); ++i) {
    const ActivationStore& store = stores[i];
    if (i > 0 && store.header.n_layer_states != stores[0].header.n_layer_states) {
      throw DataError("stores disagree on the number of layer states");
    }
    set.runs.push_back(earliest_top1(store, options).histogram);
    set.run_labels.push_back(store.header.meta("dataset_seed").value_or(std::to_string(i)));
  }
  return set;
}

std::vector<std::uint32_t> parse_layer_selection(std::string_view text,
                                                 std::uint32_t n_layer_states) {
  auto number = [&](std::string_view s) {
    std::uint32_t v = 0;
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || end != s.data() + s.size() || s.empty()) {
      throw UsageError("invalid layer selection '" + std::string(text) + "'");
    }
    return v;
  };
  std::uint32_t lo = 0;
  std::uint32_t hi = 0;
  if (n_layer_states == 0) throw DataError("store has no layer states");
  if (text == "all") {
    hi = n_layer_states - 1;
  } else if (text.starts_with("last")) {
    const std::uint32_t n = std::min(number(text.substr(4)), n_layer_states);
    if (n == 0) throw UsageError("layer selection 'last0' is empty");
    lo = n_layer_states - n;
    hi = n_layer_states - 1;
  } else if (auto dots = text.find(".."); dots != std::string_view::npos) {
    lo = number(text.substr(0, dots));
    hi = number(text.substr(dots + 2));
  } else {
    lo = hi = number(text);
  }
  if (lo > hi || hi >= n_layer_states) {
    throw UsageError("layer selection '" + std::string(text) + "' is outside 0.." +
                     std::to_string(n_layer_states - 1));
  }
  std::vector<std::uint32_t> out;
  for (std::uint32_t l = lo; l <= hi; ++l) out.push_back(l);
  return out;
}

}  // namespace arith
