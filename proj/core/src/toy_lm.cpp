#include "arith/toy_lm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>

#include "arith/binio.hpp"
#include "arith/dataset.hpp"
#include "arith/errors.hpp"
#include "arith/kv_config.hpp"

namespace arith {

// ---- config ----------------------------------------------------------------

std::string_view to_string(AnswerOrder order) {
  return order == AnswerOrder::kMostSignificantFirst ? "msd_first" : "lsd_first";
}

std::optional<AnswerOrder> parse_answer_order(std::string_view text) {
  if (text == "msd_first") return AnswerOrder::kMostSignificantFirst;
  if (text == "lsd_first") return AnswerOrder::kLeastSignificantFirst;
  return std::nullopt;
}

std::string emitted_answer(std::int64_t value, AnswerOrder order) {
  std::string text = canonical_answer(value);
  if (order == AnswerOrder::kLeastSignificantFirst) {
    const bool negative = !text.empty() && text.front() == '-';
    std::reverse(text.begin() + (negative ? 1 : 0), text.end());
  }
  return text;
}

std::string canonical_from_emitted(std::string_view emitted, AnswerOrder order) {
  std::string text(emitted);
  if (order == AnswerOrder::kLeastSignificantFirst) {
    const bool negative = !text.empty() && text.front() == '-';
    std::reverse(text.begin() + (negative ? 1 : 0), text.end());
  }
  return text;
}

void ToyLMConfig::validate() const {
  if (n_layers == 0 || d_model == 0 || n_heads == 0) {
    throw UsageError("n_layers, d_model and n_heads must be positive");
  }
  if (d_model % n_heads != 0) throw UsageError("d_model must be divisible by n_heads");
  if (max_seq_len < 2) throw UsageError("max_seq_len must be at least 2");
  if (batch_size == 0) throw UsageError("batch_size must be positive");
  if (max_operand_digits < 2 || max_operand_digits > 6) {
    throw UsageError("max_operand_digits must be in [2, 6]");
  }
  if (!(learning_rate > 0.0F)) throw UsageError("learning_rate must be positive");
  if (mtp_heads > 4) throw UsageError("mtp_heads must be at most 4");
  if (!(mtp_weight >= 0.0F)) throw UsageError("mtp_weight must be non-negative");
  // Longest training sequence: prompt + answer + end marker, minus the shift.
  const std::uint64_t widest = std::stoull(std::string(max_operand_digits, '9'));
  const std::size_t longest =
      render_prompt(widest, widest, Operation::kAdd, template_variant).size() +
      std::to_string(2 * widest).size();
  if (longest > max_seq_len) {
    throw UsageError("max_seq_len " + std::to_string(max_seq_len) +
                     " cannot hold the longest training sequence (" +
                     std::to_string(longest) + " tokens)");
  }
}

ToyLMConfig parse_toylm_config(std::string_view text) {
  ToyLMConfig c;
  const std::map<std::string, std::function<void(const KeyValue&)>, std::less<>> setters = {
      {"n_layers", [&](const KeyValue& kv) { c.n_layers = static_cast<std::uint32_t>(kv_to_u64(kv)); }},
      {"d_model", [&](const KeyValue& kv) { c.d_model = static_cast<std::uint32_t>(kv_to_u64(kv)); }},
      {"n_heads", [&](const KeyValue& kv) { c.n_heads = static_cast<std::uint32_t>(kv_to_u64(kv)); }},
      {"max_seq_len", [&](const KeyValue& kv) { c.max_seq_len = static_cast<std::uint32_t>(kv_to_u64(kv)); }},
      {"learning_rate", [&](const KeyValue& kv) { c.learning_rate = static_cast<float>(kv_to_double(kv)); }},
      {"lr_floor", [&](const KeyValue& kv) { c.lr_floor = static_cast<float>(kv_to_double(kv)); }},
      {"adam_beta1", [&](const KeyValue& kv) { c.adam_beta1 = static_cast<float>(kv_to_double(kv)); }},
      {"adam_beta2", [&](const KeyValue& kv) { c.adam_beta2 = static_cast<float>(kv_to_double(kv)); }},
      {"adam_eps", [&](const KeyValue& kv) { c.adam_eps = static_cast<float>(kv_to_double(kv)); }},
      {"weight_decay", [&](const KeyValue& kv) { c.weight_decay = static_cast<float>(kv_to_double(kv)); }},
      {"grad_clip", [&](const KeyValue& kv) { c.grad_clip = static_cast<float>(kv_to_double(kv)); }},
      {"init_std", [&](const KeyValue& kv) { c.init_std = static_cast<float>(kv_to_double(kv)); }},
      {"batch_size", [&](const KeyValue& kv) { c.batch_size = static_cast<std::uint32_t>(kv_to_u64(kv)); }},
      {"train_steps", [&](const KeyValue& kv) { c.train_steps = static_cast<std::uint32_t>(kv_to_u64(kv)); }},
      {"warmup_steps", [&](const KeyValue& kv) { c.warmup_steps = static_cast<std::uint32_t>(kv_to_u64(kv)); }},
      {"log_every", [&](const KeyValue& kv) { c.log_every = static_cast<std::uint32_t>(kv_to_u64(kv)); }},
      {"seed", [&](const KeyValue& kv) { c.seed = kv_to_u64(kv); }},
      {"mtp_heads", [&](const KeyValue& kv) { c.mtp_heads = static_cast<std::uint32_t>(kv_to_u64(kv)); }},
      {"mtp_weight", [&](const KeyValue& kv) { c.mtp_weight = static_cast<float>(kv_to_double(kv)); }},
      {"max_operand_digits", [&](const KeyValue& kv) { c.max_operand_digits = static_cast<std::uint32_t>(kv_to_u64(kv)); }},
      {"heldout_size", [&](const KeyValue& kv) { c.heldout_size = static_cast<std::uint32_t>(kv_to_u64(kv)); }},
      {"template", [&](const KeyValue& kv) {
         const auto v = parse_template_variant(kv.value);
         if (!v) throw UsageError("template must be 'compact' or 'spaced'");
         c.template_variant = *v;
       }},
      {"answer_order", [&](const KeyValue& kv) {
         const auto v = parse_answer_order(kv.value);
         if (!v) throw UsageError("answer_order must be 'msd_first' or 'lsd_first'");
         c.answer_order = *v;
       }},
  };
  for (const auto& kv : parse_key_values(text)) {
    const auto it = setters.find(kv.key);
    if (it == setters.end()) {
      throw UsageError("line " + std::to_string(kv.line) + ": unknown toy-lm key '" +
                       kv.key + "'");
    }
    it->second(kv);
  }
  c.validate();
  return c;
}

ToyLMConfig read_toylm_config(const std::filesystem::path& path) {
  return parse_toylm_config(read_text_file(path.string()));
}

// ---- parameter layout -------------------------------------------------------

ParamLayout::ParamLayout(const ToyLMConfig& c, std::size_t vocab) {
  const std::size_t d = c.d_model;
  add("wte", vocab, d);
  add("wpe", c.max_seq_len, d);
  for (std::uint32_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    add(p + "ln1.g", 1, d);
    add(p + "ln1.b", 1, d);
    add(p + "attn.w_qkv", d, 3 * d);
    add(p + "attn.b_qkv", 1, 3 * d);
    add(p + "attn.w_o", d, d);
    add(p + "attn.b_o", 1, d);
    add(p + "ln2.g", 1, d);
    add(p + "ln2.b", 1, d);
    add(p + "mlp.w_fc", d, 4 * d);
    add(p + "mlp.b_fc", 1, 4 * d);
    add(p + "mlp.w_proj", 4 * d, d);
    add(p + "mlp.b_proj", 1, d);
  }
  add("w_unembed", vocab, d);
  for (std::uint32_t k = 1; k <= c.mtp_heads; ++k) add("mtp" + std::to_string(k) + ".w", vocab, d);
}

void ParamLayout::add(std::string name, std::size_t rows, std::size_t cols) {
  constexpr std::size_t kAlign = 16;  // elements; keeps every tensor 64-byte aligned
  total_ = (total_ + kAlign - 1) / kAlign * kAlign;
  tensors_.push_back({std::move(name), rows, cols, total_});
  total_ += rows * cols;
}

const TensorSpec& ParamLayout::at(std::string_view name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw DataError("no parameter tensor named '" + std::string(name) + "'");
}

// ---- model ---------------------------------------------------------------------

namespace {

constexpr double kLayerNormEps = 1e-5;

// tanh-approximated GELU over whole arrays so Eigen can vectorize tanh.
template <typename Matrix>
Matrix gelu(const Matrix& x) {
  using Scalar = typename Matrix::Scalar;
  const Scalar c = static_cast<Scalar>(std::sqrt(2.0 / std::numbers::pi));
  const auto a = x.array();
  const auto t = (c * (a + Scalar(0.044715) * a.cube())).tanh();
  return (Scalar(0.5) * a * (Scalar(1) + t)).matrix();
}

template <typename Matrix>
Matrix gelu_grad(const Matrix& x) {
  using Scalar = typename Matrix::Scalar;
  const Scalar c = static_cast<Scalar>(std::sqrt(2.0 / std::numbers::pi));
  const auto a = x.array();
  const auto t = (c * (a + Scalar(0.044715) * a.cube())).tanh().eval();
  return (Scalar(0.5) * (Scalar(1) + t) +
          Scalar(0.5) * a * (Scalar(1) - t.square()) * c *
              (Scalar(1) + Scalar(3 * 0.044715) * a.square()))
      .matrix();
}

template <typename Matrix, typename Vector, typename Row>
void layer_norm(const Matrix& x, const Row& gain, const Row& bias, Matrix& y,
                Matrix& xhat, Vector& rstd) {
  using Scalar = typename Matrix::Scalar;
  const auto n = x.rows();
  const auto d = x.cols();
  y.resize(n, d);
  xhat.resize(n, d);
  rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Scalar mean = x.row(i).mean();
    const Scalar var = (x.row(i).array() - mean).square().mean();
    const Scalar r = Scalar(1) / std::sqrt(var + static_cast<Scalar>(kLayerNormEps));
    rstd(i) = r;
    xhat.row(i) = (x.row(i).array() - mean) * r;
    y.row(i) = xhat.row(i).cwiseProduct(gain) + bias;
  }
}

// Accumulates into dx, dgain, dbias.
template <typename Matrix, typename Vector, typename Row, typename GradRow>
void layer_norm_backward(const Matrix& dy, const Matrix& xhat, const Vector& rstd,
                         const Row& gain, Matrix& dx, GradRow dgain, GradRow dbias) {
  using Scalar = typename Matrix::Scalar;
  const auto d = static_cast<Scalar>(dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const auto dxhat = dy.row(i).cwiseProduct(gain);
    const Scalar mean_dxhat = dxhat.sum() / d;
    const Scalar mean_dxhat_xhat = dxhat.cwiseProduct(xhat.row(i)).sum() / d;
    dx.row(i).array() +=
        rstd(i) * (dxhat.array() - mean_dxhat - xhat.row(i).array() * mean_dxhat_xhat);
  }
  dgain += dy.cwiseProduct(xhat).colwise().sum();
  dbias += dy.colwise().sum();
}

}  // namespace

template <typename Scalar>
struct BasicToyLM<Scalar>::Cache {
  std::vector<Matrix> x;  // residual stream entering each block, plus final
  std::vector<Matrix> ln1, xhat1, ln2, xhat2, qkv, att, fc, act;
  std::vector<Vector> rstd1, rstd2;
  std::vector<std::vector<Matrix>> probs;  // [layer][b * heads + h], T x T
};

template <typename Scalar>
BasicToyLM<Scalar>::BasicToyLM(ToyLMConfig config, std::size_t vocab_size)
    : config_(std::move(config)),
      vocab_size_(vocab_size),
      layout_(config_, vocab_size),
      params_(layout_.total(), Scalar(0)) {
  if (config_.d_model % config_.n_heads != 0) {
    throw UsageError("d_model must be divisible by n_heads");
  }
  for (std::uint32_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    tensor(p + "ln1.g").setOnes();
    tensor(p + "ln2.g").setOnes();
  }
}

template <typename Scalar>
void BasicToyLM<Scalar>::init_random(std::uint64_t seed) {
  Rng rng(seed);
  const double residual_scale = 1.0 / std::sqrt(2.0 * config_.n_layers);
  for (const auto& t : layout_.tensors()) {
    auto m = tensor(t.name);
    const bool is_gain = t.name.ends_with(".g");
    const bool is_bias = t.name.ends_with(".b") || t.name.find(".b_") != std::string::npos;
    if (is_gain) {
      m.setOnes();
      continue;
    }
    if (is_bias) {
      m.setZero();
      continue;
    }
    double std = config_.init_std;
    if (t.name.ends_with("w_o") || t.name.ends_with("w_proj")) std *= residual_scale;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = static_cast<Scalar>(std * rng.normal());
    }
  }
}

template <typename Scalar>
Eigen::Map<const typename BasicToyLM<Scalar>::Matrix> BasicToyLM<Scalar>::tensor(
    std::string_view name) const {
  const auto& t = layout_.at(name);
  return {params_.data() + t.offset, static_cast<Eigen::Index>(t.rows),
          static_cast<Eigen::Index>(t.cols)};
}

template <typename Scalar>
Eigen::Map<typename BasicToyLM<Scalar>::Matrix> BasicToyLM<Scalar>::tensor(
    std::string_view name) {
  const auto& t = layout_.at(name);
  return {params_.data() + t.offset, static_cast<Eigen::Index>(t.rows),
          static_cast<Eigen::Index>(t.cols)};
}

template <typename Scalar>
void BasicToyLM<Scalar>::check_batch(const TokenBatch& batch) const {
  if (batch.seq_len == 0 || batch.batch == 0) throw DataError("empty token batch");
  if (batch.seq_len > config_.max_seq_len) {
    throw DataError("sequence length " + std::to_string(batch.seq_len) +
                    " exceeds max_seq_len " + std::to_string(config_.max_seq_len));
  }
  if (batch.tokens.size() != batch.batch * batch.seq_len) {
    throw DataError("token batch shape mismatch");
  }
  for (TokenId t : batch.tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_size_) {
      throw DataError("token id " + std::to_string(t) + " outside the vocabulary");
    }
  }
}

template <typename Scalar>
typename BasicToyLM<Scalar>::Matrix BasicToyLM<Scalar>::run_forward(
    const TokenBatch& batch, Cache* cache) const {
  check_batch(batch);
  const auto B = static_cast<Eigen::Index>(batch.batch);
  const auto T = static_cast<Eigen::Index>(batch.seq_len);
  const Eigen::Index N = B * T;
  const auto d = static_cast<Eigen::Index>(config_.d_model);
  const auto H = static_cast<Eigen::Index>(config_.n_heads);
  const Eigen::Index hd = d / H;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
  const auto L = config_.n_layers;

  const auto wte = tensor("wte");
  const auto wpe = tensor("wpe");
  Matrix x(N, d);
  for (Eigen::Index n = 0; n < N; ++n) {
    x.row(n) = wte.row(batch.tokens[static_cast<std::size_t>(n)]) + wpe.row(n % T);
  }

  Cache local;
  Cache& c = cache ? *cache : local;
  const bool keep = cache != nullptr;
  if (keep) {
    c = Cache{};
    c.x.reserve(L + 1);
    c.probs.resize(L);
  }

  Matrix ln, xhat, qkv, att(N, d), fc;
  Vector rstd;
  Matrix scores(T, T);
  for (std::uint32_t l = 0; l < L; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    if (keep) c.x.push_back(x);

    layer_norm(x, tensor(p + "ln1.g").row(0), tensor(p + "ln1.b").row(0), ln, xhat, rstd);
    qkv.noalias() = ln * tensor(p + "attn.w_qkv");
    qkv.rowwise() += tensor(p + "attn.b_qkv").row(0);
    if (keep) {
      c.ln1.push_back(ln);
      c.xhat1.push_back(xhat);
      c.rstd1.push_back(rstd);
      c.qkv.push_back(qkv);
      c.probs[l].resize(static_cast<std::size_t>(B * H));
    }

    for (Eigen::Index b = 0; b < B; ++b) {
      const auto rows = qkv.middleRows(b * T, T);
      for (Eigen::Index h = 0; h < H; ++h) {
        const auto q = rows.middleCols(h * hd, hd);
        const auto k = rows.middleCols(d + h * hd, hd);
        const auto v = rows.middleCols(2 * d + h * hd, hd);
        scores.noalias() = q * k.transpose();
        for (Eigen::Index i = 0; i < T; ++i) {
          Scalar mx = -std::numeric_limits<Scalar>::infinity();
          for (Eigen::Index j = 0; j <= i; ++j) {
            scores(i, j) *= scale;
            mx = std::max(mx, scores(i, j));
          }
          Scalar sum = 0;
          for (Eigen::Index j = 0; j <= i; ++j) {
            scores(i, j) = std::exp(scores(i, j) - mx);
            sum += scores(i, j);
          }
          for (Eigen::Index j = 0; j <= i; ++j) scores(i, j) /= sum;
          for (Eigen::Index j = i + 1; j < T; ++j) scores(i, j) = 0;
        }
        att.block(b * T, h * hd, T, hd).noalias() = scores * v;
        if (keep) c.probs[l][static_cast<std::size_t>(b * H + h)] = scores;
      }
    }
    x.noalias() += att * tensor(p + "attn.w_o");
    x.rowwise() += tensor(p + "attn.b_o").row(0);
    if (keep) c.att.push_back(att);

    layer_norm(x, tensor(p + "ln2.g").row(0), tensor(p + "ln2.b").row(0), ln, xhat, rstd);
    fc.noalias() = ln * tensor(p + "mlp.w_fc");
    fc.rowwise() += tensor(p + "mlp.b_fc").row(0);
    Matrix act = gelu(fc);
    x.noalias() += act * tensor(p + "mlp.w_proj");
    x.rowwise() += tensor(p + "mlp.b_proj").row(0);
    if (keep) {
      c.ln2.push_back(ln);
      c.xhat2.push_back(xhat);
      c.rstd2.push_back(rstd);
      c.fc.push_back(fc);
      c.act.push_back(std::move(act));
    }
  }
  if (keep) c.x.push_back(x);
  return x;
}

template <typename Scalar>
typename BasicToyLM<Scalar>::Matrix BasicToyLM<Scalar>::logits(
    const TokenBatch& batch) const {
  const Matrix x = run_forward(batch, nullptr);
  return x * tensor("w_unembed").transpose();
}

namespace {

// Turns `logit` rows into d(weight * mean CE)/d(logit) in place (rows without
// a target become zero) and returns the mean cross-entropy.
template <typename Matrix>
double softmax_xent(Matrix& logit, std::span<const TokenId> targets, double weight,
                    bool want_grad, std::size_t vocab) {
  using Scalar = typename Matrix::Scalar;
  std::size_t count = 0;
  for (TokenId t : targets) count += t >= 0 ? 1 : 0;
  double total = 0.0;
  for (Eigen::Index n = 0; n < logit.rows(); ++n) {
    const TokenId target = targets[static_cast<std::size_t>(n)];
    if (target < 0) {
      logit.row(n).setZero();
      continue;
    }
    if (static_cast<std::size_t>(target) >= vocab) throw DataError("target id out of range");
    const Scalar mx = logit.row(n).maxCoeff();
    const Scalar sum = (logit.row(n).array() - mx).exp().sum();
    const Scalar lse = mx + std::log(sum);
    total += static_cast<double>(lse - logit(n, target));
    if (want_grad) {
      logit.row(n) = (logit.row(n).array() - lse).exp();
      logit(n, target) -= Scalar(1);
      logit.row(n) *= static_cast<Scalar>(weight / static_cast<double>(count));
    }
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

}  // namespace

template <typename Scalar>
Scalar BasicToyLM<Scalar>::loss_and_grad(const TokenBatch& batch, std::span<Scalar> grad,
                                         LossParts* parts) const {
  if (batch.targets.size() != batch.tokens.size()) {
    throw DataError("targets shape mismatch");
  }
  const bool want_grad = !grad.empty();
  if (want_grad && grad.size() != params_.size()) {
    throw DataError("gradient buffer has the wrong size");
  }
  Cache cache;
  const Matrix x_final = run_forward(batch, want_grad ? &cache : nullptr);
  const auto wu = tensor("w_unembed");
  Matrix logit = x_final * wu.transpose();
  const double main = softmax_xent(logit, batch.targets, 1.0, want_grad, vocab_size_);

  // Look-ahead targets: the target k steps further along the same sequence.
  const std::size_t S = batch.seq_len;
  std::vector<Matrix> aux_logits;
  double aux = 0.0;
  for (std::uint32_t k = 1; k <= config_.mtp_heads; ++k) {
    std::vector<TokenId> ahead(batch.targets.size(), -1);
    for (std::size_t i = 0; i < batch.targets.size(); ++i) {
      if (batch.targets[i] >= 0 && i % S + k < S) ahead[i] = batch.targets[i + k];
    }
    Matrix lk = x_final * tensor("mtp" + std::to_string(k) + ".w").transpose();
    aux += config_.mtp_weight *
           softmax_xent(lk, ahead, config_.mtp_weight, want_grad, vocab_size_);
    aux_logits.push_back(std::move(lk));
  }
  if (parts) {
    parts->next_token = static_cast<Scalar>(main);
    parts->auxiliary = static_cast<Scalar>(aux);
  }
  const auto loss = static_cast<Scalar>(main + aux);
  if (!want_grad) return loss;

  std::fill(grad.begin(), grad.end(), Scalar(0));
  auto g = [&](std::string_view name) {
    const auto& t = layout_.at(name);
    return Eigen::Map<Matrix>(grad.data() + t.offset, static_cast<Eigen::Index>(t.rows),
                              static_cast<Eigen::Index>(t.cols));
  };

  const Eigen::Index N = logit.rows();
  g("w_unembed").noalias() = logit.transpose() * x_final;
  Matrix dx = logit * wu;
  for (std::uint32_t k = 1; k <= config_.mtp_heads; ++k) {
    const std::string name = "mtp" + std::to_string(k) + ".w";
    const Matrix& dk = aux_logits[k - 1];
    g(name).noalias() = dk.transpose() * x_final;
    dx.noalias() += dk * tensor(name);
  }

  const auto B = static_cast<Eigen::Index>(batch.batch);
  const auto T = static_cast<Eigen::Index>(batch.seq_len);
  const auto d = static_cast<Eigen::Index>(config_.d_model);
  const auto H = static_cast<Eigen::Index>(config_.n_heads);
  const Eigen::Index hd = d / H;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));

  Matrix dact, dfc, dln, datt, dqkv(N, 3 * d), dprob(T, T), dscore(T, T);
  for (std::uint32_t li = config_.n_layers; li-- > 0;) {
    const std::string p = "h" + std::to_string(li) + ".";

    // MLP branch.
    g(p + "mlp.w_proj").noalias() += cache.act[li].transpose() * dx;
    g(p + "mlp.b_proj") += dx.colwise().sum();
    dact.noalias() = dx * tensor(p + "mlp.w_proj").transpose();
    dfc = dact.cwiseProduct(gelu_grad(cache.fc[li]));
    g(p + "mlp.w_fc").noalias() += cache.ln2[li].transpose() * dfc;
    g(p + "mlp.b_fc") += dfc.colwise().sum();
    dln.noalias() = dfc * tensor(p + "mlp.w_fc").transpose();
    layer_norm_backward(dln, cache.xhat2[li], cache.rstd2[li], tensor(p + "ln2.g").row(0), dx,
                        g(p + "ln2.g").row(0), g(p + "ln2.b").row(0));

    // Attention branch.
    g(p + "attn.w_o").noalias() += cache.att[li].transpose() * dx;
    g(p + "attn.b_o") += dx.colwise().sum();
    datt.noalias() = dx * tensor(p + "attn.w_o").transpose();
    const Matrix& qkv = cache.qkv[li];
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto rows = qkv.middleRows(b * T, T);
      for (Eigen::Index h = 0; h < H; ++h) {
        const Matrix& prob = cache.probs[li][static_cast<std::size_t>(b * H + h)];
        const auto q = rows.middleCols(h * hd, hd);
        const auto k = rows.middleCols(d + h * hd, hd);
        const auto v = rows.middleCols(2 * d + h * hd, hd);
        const auto dout = datt.block(b * T, h * hd, T, hd);
        dprob.noalias() = dout * v.transpose();
        dqkv.block(b * T, 2 * d + h * hd, T, hd).noalias() = prob.transpose() * dout;
        for (Eigen::Index i = 0; i < T; ++i) {
          Scalar dot = 0;
          for (Eigen::Index j = 0; j <= i; ++j) dot += prob(i, j) * dprob(i, j);
          for (Eigen::Index j = 0; j < T; ++j) {
            dscore(i, j) = j <= i ? prob(i, j) * (dprob(i, j) - dot) * scale : Scalar(0);
          }
        }
        dqkv.block(b * T, h * hd, T, hd).noalias() = dscore * k;
        dqkv.block(b * T, d + h * hd, T, hd).noalias() = dscore.transpose() * q;
      }
    }
    g(p + "attn.w_qkv").noalias() += cache.ln1[li].transpose() * dqkv;
    g(p + "attn.b_qkv") += dqkv.colwise().sum();
    dln.noalias() = dqkv * tensor(p + "attn.w_qkv").transpose();
    layer_norm_backward(dln, cache.xhat1[li], cache.rstd1[li], tensor(p + "ln1.g").row(0), dx,
                        g(p + "ln1.g").row(0), g(p + "ln1.b").row(0));
  }

  auto dwte = g("wte");
  auto dwpe = g("wpe");
  for (Eigen::Index n = 0; n < N; ++n) {
    dwte.row(batch.tokens[static_cast<std::size_t>(n)]) += dx.row(n);
    dwpe.row(n % T) += dx.row(n);
  }
  return loss;
}

template <typename Scalar>
typename BasicToyLM<Scalar>::ForwardResult BasicToyLM<Scalar>::forward_with_states(
    std::span<const TokenId> tokens) const {
  if (tokens.empty()) throw DataError("cannot run the model on an empty sequence");
  TokenBatch batch;
  batch.batch = 1;
  batch.seq_len = tokens.size();
  batch.tokens.assign(tokens.begin(), tokens.end());
  Cache cache;
  const Matrix x = run_forward(batch, &cache);
  const auto last = static_cast<Eigen::Index>(tokens.size() - 1);

  ForwardResult out;
  out.layer_states.token_position = tokens.size() - 1;
  out.layer_states.states.resize(static_cast<Eigen::Index>(cache.x.size()),
                                 static_cast<Eigen::Index>(config_.d_model));
  for (std::size_t l = 0; l < cache.x.size(); ++l) {
    out.layer_states.states.row(static_cast<Eigen::Index>(l)) = cache.x[l].row(last);
  }
  out.logits = tensor("w_unembed") * x.row(last).transpose();
  return out;
}

template class BasicToyLM<float>;
template class BasicToyLM<double>;

// ---- data -------------------------------------------------------------------

AdditionCorpus::AdditionCorpus(const ToyLMConfig& config)
    : max_digits_(config.max_operand_digits), variant_(config.template_variant) {
  const auto [lo, hi] = digit_range(2);
  const std::size_t pool = (hi - lo + 1) * (hi - lo + 1);
  if (config.heldout_size > pool / 2) {
    throw UsageError("held-out set would consume most two-digit problems");
  }
  Rng rng(config.seed ^ 0x6865'6c64'6f75'74ULL);  // "heldout"
  while (heldout_.size() < config.heldout_size) {
    const std::uint64_t a = rng.uniform(lo, hi);
    const std::uint64_t b = rng.uniform(lo, hi);
    if (heldout_set_.emplace(a, b).second) heldout_.emplace_back(a, b);
  }
}

std::pair<std::uint64_t, std::uint64_t> AdditionCorpus::sample(Rng& rng) const {
  while (true) {
    const auto [alo, ahi] = digit_range(static_cast<std::uint32_t>(rng.uniform(1, max_digits_)));
    const auto [blo, bhi] = digit_range(static_cast<std::uint32_t>(rng.uniform(1, max_digits_)));
    const std::uint64_t a = rng.uniform(alo, ahi);
    const std::uint64_t b = rng.uniform(blo, bhi);
    if (!is_heldout(a, b)) return {a, b};
  }
}

TokenBatch make_answer_batch(const CharTokenizer& tokenizer,
                             std::span<const std::pair<std::string, std::string>> examples) {
  std::vector<std::vector<TokenId>> seqs;
  std::vector<std::size_t> prompt_lens;
  std::size_t longest = 0;
  for (const auto& [prompt, answer] : examples) {
    auto ids = tokenizer.encode(prompt);
    prompt_lens.push_back(ids.size());
    const auto tail = tokenizer.encode(answer);
    ids.insert(ids.end(), tail.begin(), tail.end());
    ids.push_back(tokenizer.eos());
    longest = std::max(longest, ids.size() - 1);
    seqs.push_back(std::move(ids));
  }
  TokenBatch batch;
  batch.batch = seqs.size();
  batch.seq_len = longest;
  batch.tokens.assign(batch.batch * longest, tokenizer.eos());
  batch.targets.assign(batch.batch * longest, -1);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& s = seqs[i];
    for (std::size_t t = 0; t + 1 < s.size(); ++t) {
      batch.tokens[i * longest + t] = s[t];
      if (t + 1 >= prompt_lens[i]) batch.targets[i * longest + t] = s[t + 1];
    }
  }
  return batch;
}

// ---- training ---------------------------------------------------------------

namespace {

double scheduled_lr(const ToyLMConfig& c, std::uint32_t step) {
  const double peak = c.learning_rate;
  if (step < c.warmup_steps) return peak * (step + 1) / c.warmup_steps;
  const double span = std::max<double>(1.0, c.train_steps - c.warmup_steps);
  const double progress = std::min(1.0, (step - c.warmup_steps) / span);
  const double floor = peak * c.lr_floor;
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace

TrainResult train_toy_lm(const ToyLMConfig& config,
                         const std::function<void(const TrainLogEntry&)>& on_log) {
  config.validate();
  const CharTokenizer tokenizer;
  const AdditionCorpus corpus(config);
  ToyLM model(config, tokenizer.size());
  model.init_random(config.seed);

  auto params = model.params();
  std::vector<float, Eigen::aligned_allocator<float>> grad(params.size());
  std::vector<float> m(params.size(), 0.0F), v(params.size(), 0.0F);
  Rng data_rng(config.seed ^ 0x6461'7461ULL);  // "data"
  std::vector<std::pair<std::string, std::string>> examples(config.batch_size);

  TrainResult result{model, {}, 0.0};
  double beta1_pow = 1.0;
  double beta2_pow = 1.0;
  for (std::uint32_t step = 0; step < config.train_steps; ++step) {
    for (auto& ex : examples) {
      const auto [a, b] = corpus.sample(data_rng);
      ex.first = render_prompt(a, b, Operation::kAdd, config.template_variant);
      ex.second = emitted_answer(static_cast<std::int64_t>(a + b), config.answer_order);
    }
    const TokenBatch batch = make_answer_batch(tokenizer, examples);
    ToyLM::LossParts parts;
    const float loss = model.loss_and_grad(batch, grad, &parts);
    if (!std::isfinite(loss)) {
      throw NumericError("toy-lm training diverged at step " + std::to_string(step) +
                         " (loss " + std::to_string(loss) + ", lr " +
                         std::to_string(scheduled_lr(config, step)) + ")");
    }

    if (config.grad_clip > 0.0F) {
      double sq = 0.0;
      for (float gi : grad) sq += static_cast<double>(gi) * gi;
      const double norm = std::sqrt(sq);
      if (!std::isfinite(norm)) {
        throw NumericError("non-finite gradient norm at step " + std::to_string(step));
      }
      if (norm > config.grad_clip) {
        const auto s = static_cast<float>(config.grad_clip / norm);
        for (float& gi : grad) gi *= s;
      }
    }

    const double lr = scheduled_lr(config, step);
    beta1_pow *= config.adam_beta1;
    beta2_pow *= config.adam_beta2;
    const auto step_size = static_cast<float>(lr / (1.0 - beta1_pow));
    const auto v_corr = static_cast<float>(1.0 / (1.0 - beta2_pow));
    const float b1 = config.adam_beta1;
    const float b2 = config.adam_beta2;
    const auto decay = static_cast<float>(lr * config.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = b1 * m[i] + (1.0F - b1) * grad[i];
      v[i] = b2 * v[i] + (1.0F - b2) * grad[i] * grad[i];
      params[i] -= step_size * m[i] / (std::sqrt(v[i] * v_corr) + config.adam_eps) +
                   decay * params[i];
    }

    if (step == 0 || (config.log_every > 0 && (step + 1) % config.log_every == 0) ||
        step + 1 == config.train_steps) {
      TrainLogEntry entry{step, parts.next_token, lr};
      result.curve.push_back(entry);
      if (on_log) on_log(entry);
    }
  }
  result.model = std::move(model);
  result.heldout_exact_match = heldout_exact_match(result.model, tokenizer, corpus);
  return result;
}

// ---- decoding ---------------------------------------------------------------

std::vector<Generation> generate_answers(const ToyLM& model, const CharTokenizer& tokenizer,
                                         std::span<const std::string> prompts,
                                         std::size_t max_new_tokens) {
  std::vector<Generation> out(prompts.size());
  // Group by prompt length so each group decodes as one dense batch.
  std::map<std::size_t, std::vector<std::size_t>> by_length;
  std::vector<std::vector<TokenId>> encoded(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    encoded[i] = tokenizer.encode(prompts[i]);
    if (encoded[i].empty()) throw DataError("empty prompt");
    by_length[encoded[i].size()].push_back(i);
  }
  const std::size_t cap = model.config().max_seq_len;
  for (const auto& [len, members] : by_length) {
    TokenBatch batch;
    batch.batch = members.size();
    batch.seq_len = len;
    for (std::size_t i : members) {
      batch.tokens.insert(batch.tokens.end(), encoded[i].begin(), encoded[i].end());
    }
    std::vector<bool> done(members.size(), false);
    std::vector<std::vector<TokenId>> produced(members.size());
    for (std::size_t step = 0; step < max_new_tokens && batch.seq_len < cap + 1; ++step) {
      if (batch.seq_len > cap) break;
      const auto logits = model.logits(batch);
      std::vector<TokenId> next(members.size());
      for (std::size_t r = 0; r < members.size(); ++r) {
        const auto row = static_cast<Eigen::Index>((r + 1) * batch.seq_len - 1);
        next[r] = static_cast<TokenId>(argmax_lowest(logits.row(row)));
        if (!done[r]) {
          if (next[r] == tokenizer.eos()) {
            done[r] = true;
            out[members[r]].terminated = true;
          } else {
            produced[r].push_back(next[r]);
          }
        }
      }
      if (std::all_of(done.begin(), done.end(), [](bool b) { return b; })) break;
      if (batch.seq_len == cap) break;
      // Append the new column.
      std::vector<TokenId> grown;
      grown.reserve(members.size() * (batch.seq_len + 1));
      for (std::size_t r = 0; r < members.size(); ++r) {
        const auto begin = batch.tokens.begin() + static_cast<std::ptrdiff_t>(r * batch.seq_len);
        grown.insert(grown.end(), begin, begin + static_cast<std::ptrdiff_t>(batch.seq_len));
        grown.push_back(next[r]);
      }
      batch.tokens = std::move(grown);
      ++batch.seq_len;
    }
    for (std::size_t r = 0; r < members.size(); ++r) {
      out[members[r]].emitted = tokenizer.decode(produced[r]);
      out[members[r]].text =
          canonical_from_emitted(out[members[r]].emitted, model.config().answer_order);
    }
  }
  return out;
}

Generation generate_answer(const ToyLM& model, const CharTokenizer& tokenizer,
                           std::string_view prompt, std::size_t max_new_tokens) {
  const std::string p(prompt);
  return generate_answers(model, tokenizer, std::span<const std::string>(&p, 1),
                          max_new_tokens)
      .front();
}

bool exact_match(const Generation& generation, std::int64_t answer) {
  return generation.terminated && generation.text == canonical_answer(answer);
}

double heldout_exact_match(const ToyLM& model, const CharTokenizer& tokenizer,
                           const AdditionCorpus& corpus) {
  const auto& pairs = corpus.heldout();
  if (pairs.empty()) return 0.0;
  std::vector<std::string> prompts;
  prompts.reserve(pairs.size());
  for (const auto& [a, b] : pairs) {
    prompts.push_back(render_prompt(a, b, Operation::kAdd, corpus.template_variant()));
  }
  const auto gens = generate_answers(model, tokenizer, prompts);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    hits += exact_match(gens[i], static_cast<std::int64_t>(pairs[i].first + pairs[i].second));
  }
  return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

// ---- checkpoint -------------------------------------------------------------

namespace {
constexpr char kCheckpointMagic[8] = {'A', 'R', 'T', 'O', 'Y', 'L', 'M', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

void write_checkpoint(const std::filesystem::path& path, const ToyLM& model,
                      const CharTokenizer& tokenizer) {
  const ToyLMConfig& c = model.config();
  binio::Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(c.n_layers);
  w.u32(c.d_model);
  w.u32(c.n_heads);
  w.u32(c.max_seq_len);
  for (float f : {c.learning_rate, c.lr_floor, c.adam_beta1, c.adam_beta2, c.adam_eps,
                  c.weight_decay, c.grad_clip, c.init_std}) {
    w.f32(f);
  }
  for (std::uint32_t u : {c.batch_size, c.train_steps, c.warmup_steps, c.log_every}) w.u32(u);
  w.u64(c.seed);
  w.u32(c.mtp_heads);
  w.f32(c.mtp_weight);
  w.u32(c.max_operand_digits);
  w.u32(c.heldout_size);
  w.u8(static_cast<std::uint8_t>(c.template_variant));
  w.u8(static_cast<std::uint8_t>(c.answer_order));

  w.str(tokenizer.fingerprint());
  w.u32(static_cast<std::uint32_t>(tokenizer.size()));
  for (const auto& s : tokenizer.symbols()) w.str(s);

  const auto& tensors = model.layout().tensors();
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.rows));
    w.u32(static_cast<std::uint32_t>(t.cols));
    w.f32s(model.params().subspan(t.offset, t.size()));
  }
  w.u32(binio::crc32(w.buffer()));
  binio::write_file(path.string(), w.buffer());
}

ToyLM read_checkpoint(const std::filesystem::path& path) {
  const auto bytes = binio::read_file(path.string());
  const std::string where = "checkpoint " + path.string();
  if (bytes.size() < sizeof kCheckpointMagic + 8) throw DataError(where + " is truncated");
  if (!std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic), bytes.begin())) {
    throw DataError(where + " has a bad magic number");
  }
  const std::span<const std::uint8_t> all(bytes);
  const auto body = all.first(all.size() - 4);
  binio::Reader tail(all.last(4));
  if (binio::crc32(body) != tail.u32()) throw DataError(where + " failed its checksum");

  binio::Reader r(body);
  r.bytes(sizeof kCheckpointMagic);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw DataError(where + " has unsupported version " + std::to_string(version));
  }
  ToyLMConfig c;
  c.n_layers = r.u32();
  c.d_model = r.u32();
  c.n_heads = r.u32();
  c.max_seq_len = r.u32();
  for (float* f : {&c.learning_rate, &c.lr_floor, &c.adam_beta1, &c.adam_beta2, &c.adam_eps,
                   &c.weight_decay, &c.grad_clip, &c.init_std}) {
    *f = r.f32();
  }
  for (std::uint32_t* u : {&c.batch_size, &c.train_steps, &c.warmup_steps, &c.log_every}) {
    *u = r.u32();
  }
  c.seed = r.u64();
  c.mtp_heads = r.u32();
  c.mtp_weight = r.f32();
  c.max_operand_digits = r.u32();
  c.heldout_size = r.u32();
  const std::uint8_t variant = r.u8();
  if (variant > 1) throw DataError(where + " has an unknown template variant");
  c.template_variant = static_cast<TemplateVariant>(variant);
  const std::uint8_t order = r.u8();
  if (order > 1) throw DataError(where + " has an unknown answer order");
  c.answer_order = static_cast<AnswerOrder>(order);

  const CharTokenizer tokenizer;
  if (r.str() != tokenizer.fingerprint()) {
    throw DataError(where + " was trained with a different tokenizer");
  }
  const std::uint32_t vocab = r.u32();
  if (vocab != tokenizer.size()) throw DataError(where + " vocabulary size mismatch");
  for (std::uint32_t i = 0; i < vocab; ++i) {
    if (r.str() != tokenizer.symbols()[i]) throw DataError(where + " vocabulary mismatch");
  }

  ToyLM model(c, vocab);
  const auto& tensors = model.layout().tensors();
  if (r.u32() != tensors.size()) throw DataError(where + " tensor count mismatch");
  for (const auto& t : tensors) {
    if (r.str() != t.name || r.u32() != t.rows || r.u32() != t.cols) {
      throw DataError(where + " tensor '" + t.name + "' does not match the config");
    }
    r.f32s(model.params().subspan(t.offset, t.size()));
  }
  if (r.remaining() != 0) throw DataError(where + " has trailing bytes");
  return model;
}

}  // namespace arith
