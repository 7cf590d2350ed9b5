#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "arith/problem.hpp"
#include "arith/rng.hpp"
#include "arith/tokenizer.hpp"

namespace arith {

// Order in which the toy model emits answer digits. Least-significant-first
// lets each emitted digit depend only on digits already seen plus a carry.
enum class AnswerOrder : std::uint8_t { kMostSignificantFirst = 0, kLeastSignificantFirst = 1 };

std::string_view to_string(AnswerOrder order);
std::optional<AnswerOrder> parse_answer_order(std::string_view text);

// Answer text as the model emits it, and back to canonical decimal.
std::string emitted_answer(std::int64_t value, AnswerOrder order);
std::string canonical_from_emitted(std::string_view emitted, AnswerOrder order);

struct ToyLMConfig {
  std::uint32_t n_layers = 4;
  std::uint32_t d_model = 64;
  std::uint32_t n_heads = 4;
  std::uint32_t max_seq_len = 32;

  // Adam, linear warmup then cosine decay to lr_floor * learning_rate.
  float learning_rate = 3e-3F;
  float lr_floor = 0.1F;
  float adam_beta1 = 0.9F;
  float adam_beta2 = 0.98F;
  float adam_eps = 1e-8F;
  float weight_decay = 0.0F;
  float grad_clip = 1.0F;  // global L2 norm; <= 0 disables
  float init_std = 0.02F;
  std::uint32_t batch_size = 64;
  std::uint32_t train_steps = 8000;
  std::uint32_t warmup_steps = 100;
  std::uint32_t log_every = 100;
  std::uint64_t seed = 1234;

  // Auxiliary linear heads on the final state predicting the tokens 2..k+1
  // steps ahead at answer positions. Logits and the lens use only w_unembed.
  std::uint32_t mtp_heads = 2;
  float mtp_weight = 1.0F;

  // Training corpus: operands of 1..max_operand_digits digits; a held-out
  // set of two-digit problems never appears in training.
  std::uint32_t max_operand_digits = 3;
  std::uint32_t heldout_size = 1000;
  TemplateVariant template_variant = TemplateVariant::kSpaced;
  AnswerOrder answer_order = AnswerOrder::kMostSignificantFirst;

  void validate() const;
};

// Plain "key = value" lines; '#' starts a comment. Unknown keys are errors.
ToyLMConfig read_toylm_config(const std::filesystem::path& path);
ToyLMConfig parse_toylm_config(std::string_view text);

// Named parameter tensors inside one flat buffer, in checkpoint order.
struct TensorSpec {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return rows * cols; }
};

class ParamLayout {
 public:
  ParamLayout(const ToyLMConfig& config, std::size_t vocab_size);
  const std::vector<TensorSpec>& tensors() const { return tensors_; }
  const TensorSpec& at(std::string_view name) const;
  std::size_t total() const { return total_; }

 private:
  void add(std::string name, std::size_t rows, std::size_t cols);
  std::vector<TensorSpec> tensors_;
  std::size_t total_ = 0;
};

// A padded batch of token sequences. targets[i] < 0 marks positions that do
// not contribute to the loss.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> tokens;   // batch * seq_len, row-major
  std::vector<TokenId> targets;  // same shape
};

// Pre-norm decoder-only transformer with learned positions and an untied
// unembedding. There is no final normalization: the last residual state
// times the unembedding gives the logits exactly.
template <typename Scalar>
class BasicToyLM {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  struct LayerStates {
    Matrix states;  // (n_layers + 1) x d_model; row 0 is the embedding
    std::size_t token_position = 0;
  };

  struct ForwardResult {
    Vector logits;  // next-token logits after the last input token
    LayerStates layer_states;
  };

  BasicToyLM(ToyLMConfig config, std::size_t vocab_size);

  void init_random(std::uint64_t seed);

  const ToyLMConfig& config() const { return config_; }
  std::size_t vocab_size() const { return vocab_size_; }
  const ParamLayout& layout() const { return layout_; }
  std::span<Scalar> params() { return params_; }
  std::span<const Scalar> params() const { return params_; }
  Eigen::Map<const Matrix> tensor(std::string_view name) const;
  Eigen::Map<Matrix> tensor(std::string_view name);

  struct LossParts {
    Scalar next_token = 0;  // mean cross-entropy of the next-token head
    Scalar auxiliary = 0;   // weighted sum of the look-ahead head means
  };

  // Training objective next_token + auxiliary; grad (same size as params) is
  // overwritten when non-empty.
  Scalar loss_and_grad(const TokenBatch& batch, std::span<Scalar> grad,
                       LossParts* parts = nullptr) const;
  Scalar loss(const TokenBatch& batch) const { return loss_and_grad(batch, {}); }

  // Logits at every position, (batch * seq_len) x vocab.
  Matrix logits(const TokenBatch& batch) const;

  ForwardResult forward_with_states(std::span<const TokenId> tokens) const;

  template <typename Other>
  BasicToyLM<Other> cast() const;

 private:
  struct Cache;
  void check_batch(const TokenBatch& batch) const;
  Matrix run_forward(const TokenBatch& batch, Cache* cache) const;

  ToyLMConfig config_;
  std::size_t vocab_size_;
  ParamLayout layout_;
  // Aligned so vectorized reductions split identically on every run.
  std::vector<Scalar, Eigen::aligned_allocator<Scalar>> params_;
};

using ToyLM = BasicToyLM<float>;

extern template class BasicToyLM<float>;
extern template class BasicToyLM<double>;

template <typename Scalar>
template <typename Other>
BasicToyLM<Other> BasicToyLM<Scalar>::cast() const {
  BasicToyLM<Other> out(config_, vocab_size_);
  auto dst = out.params();
  for (std::size_t i = 0; i < params_.size(); ++i) dst[i] = static_cast<Other>(params_[i]);
  return out;
}

// ---- data ----------------------------------------------------------------

// Training distribution for the toy model with a fixed two-digit held-out set.
class AdditionCorpus {
 public:
  AdditionCorpus(const ToyLMConfig& config);

  // Fresh training problem; never a held-out pair.
  std::pair<std::uint64_t, std::uint64_t> sample(Rng& rng) const;
  const std::vector<std::pair<std::uint64_t, std::uint64_t>>& heldout() const {
    return heldout_;
  }
  bool is_heldout(std::uint64_t a, std::uint64_t b) const {
    return heldout_set_.contains({a, b});
  }
  TemplateVariant template_variant() const { return variant_; }
  std::uint32_t max_operand_digits() const { return max_digits_; }

 private:
  std::uint32_t max_digits_;
  TemplateVariant variant_;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> heldout_;
  std::set<std::pair<std::uint64_t, std::uint64_t>> heldout_set_;
};

// Prompt + answer + end marker, shifted for next-token prediction; only the
// answer and end-marker predictions carry loss.
TokenBatch make_answer_batch(const CharTokenizer& tokenizer,
                             std::span<const std::pair<std::string, std::string>> examples);

// ---- training ------------------------------------------------------------

struct TrainLogEntry {
  std::uint32_t step = 0;
  double loss = 0.0;  // next-token cross-entropy of the batch
  double learning_rate = 0.0;
};

struct TrainResult {
  ToyLM model;
  std::vector<TrainLogEntry> curve;
  double heldout_exact_match = 0.0;
};

// Deterministic given the config. Throws NumericError on a non-finite loss.
TrainResult train_toy_lm(const ToyLMConfig& config,
                         const std::function<void(const TrainLogEntry&)>& on_log = {});

// ---- decoding ------------------------------------------------------------

struct Generation {
  std::string text;     // canonical order
  std::string emitted;  // as produced by the model
  bool terminated = false;  // end marker produced before the length cap
};

// Greedy decoding; argmax ties go to the lowest token id.
Generation generate_answer(const ToyLM& model, const CharTokenizer& tokenizer,
                           std::string_view prompt, std::size_t max_new_tokens = 8);
std::vector<Generation> generate_answers(const ToyLM& model,
                                         const CharTokenizer& tokenizer,
                                         std::span<const std::string> prompts,
                                         std::size_t max_new_tokens = 8);

// String equality of `text` with the canonical decimal rendering; unterminated
// generations never match.
bool exact_match(const Generation& generation, std::int64_t answer);

double heldout_exact_match(const ToyLM& model, const CharTokenizer& tokenizer,
                           const AdditionCorpus& corpus);

// Lowest index among maximal entries.
template <typename Derived>
Eigen::Index argmax_lowest(const Eigen::MatrixBase<Derived>& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return best;
}

// ---- checkpoint ----------------------------------------------------------

// Versioned binary: magic, config header, vocabulary listing, then each
// tensor as name + shape + row-major little-endian float32, then CRC-32.
void write_checkpoint(const std::filesystem::path& path, const ToyLM& model,
                      const CharTokenizer& tokenizer);
ToyLM read_checkpoint(const std::filesystem::path& path);

}  // namespace arith
