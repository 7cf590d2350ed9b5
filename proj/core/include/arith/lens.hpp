#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "arith/activation_store.hpp"

namespace arith {

using UnembeddingMatrix =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// h . W_U^T in double precision. No normalization is applied.
Eigen::VectorXd lens_logits(std::span<const float> h,
                            const Eigen::Ref<const UnembeddingMatrix>& unembedding);

// 1 + number of tokens ordered before `gold` under (logit desc, id asc).
std::uint32_t gold_rank(std::span<const double> logits, std::uint32_t gold);
std::uint32_t gold_rank(const Eigen::VectorXd& logits, std::uint32_t gold);

// Highest logit, lowest id on ties.
std::uint32_t top1_token(const Eigen::VectorXd& logits);

struct LensOptions {
  // Apply the store's final-norm block at every layer state before projecting.
  bool apply_final_norm = false;
};

struct LensResult {
  std::uint64_t sample_id = 0;
  std::uint32_t gold = 0;
  std::vector<std::uint32_t> ranks;  // per layer state, 1 = top
  std::vector<std::uint32_t> top1;   // per layer state
  std::optional<std::uint32_t> earliest_top1;
};

LensResult lens_sample(const ActivationStore& store, std::size_t sample,
                       const LensOptions& options = {});

// Counts of samples by the layer at which the gold token first becomes top-1.
struct LensHistogram {
  std::uint32_t n_layer_states = 0;
  std::size_t n_samples = 0;
  std::vector<std::size_t> counts;  // n_layer_states
  std::size_t never = 0;
  bool final_norm_applied = false;
};

struct LensAnalysis {
  std::vector<LensResult> results;
  LensHistogram histogram;
};

// Requires an unembedding block and a gold token on every sample.
LensAnalysis earliest_top1(const ActivationStore& store, const LensOptions& options = {});

// Several runs (e.g. dataset seeds) of the same model, averaged per bucket.
struct LensHistogramSet {
  std::vector<std::string> run_labels;
  std::vector<LensHistogram> runs;

  std::uint32_t n_layer_states() const;
  std::vector<double> mean_counts() const;
  double mean_never() const;
  // Layer with the largest mean count, lowest on ties; none if all are zero.
  std::optional<std::uint32_t> modal_layer() const;
};

LensHistogramSet earliest_top1_runs(std::span<const ActivationStore> stores,
                                    const LensOptions& options = {});

// "all", "lastN", "a..b" (inclusive) or a single index.
std::vector<std::uint32_t> parse_layer_selection(std::string_view text,
                                                 std::uint32_t n_layer_states);

}  // namespace arith
