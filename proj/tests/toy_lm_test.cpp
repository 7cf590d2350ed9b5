#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "arith/binio.hpp"
#include "arith/errors.hpp"
#include "arith/rng.hpp"
#include "arith/toy_lm.hpp"

namespace arith {
namespace {

ToyLMConfig SmallConfig() {
  ToyLMConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.max_seq_len = 32;
  c.init_std = 0.3F;
  return c;
}

TokenBatch SampleBatch(const CharTokenizer& tok) {
  const std::vector<std::pair<std::string, std::string>> ex = {
      {"Calculate: 12 + 34 = ", "46"}, {"Calculate: 1 + 3 = ", "4"}, {"Calculate: 99+9 = ", "108"}};
  return make_answer_batch(tok, ex);
}

// Directional derivative of the loss along random directions versus central
// differences, in double precision.
TEST(ToyLMTest, GradientMatchesFiniteDifferences) {
  const CharTokenizer tok;
  BasicToyLM<double> m(SmallConfig(), tok.size());
  m.init_random(7);
  const TokenBatch batch = SampleBatch(tok);
  std::vector<double> grad(m.params().size());
  m.loss_and_grad(batch, grad);

  constexpr double kEps = 1e-6;
  constexpr double kTol = 1e-4;
  Rng rng(3);
  auto p = m.params();
  const std::vector<double> p0(p.begin(), p.end());
  for (int dir = 0; dir < 24; ++dir) {
    std::vector<double> v(p.size());
    double analytic = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = rng.normal();
      analytic += v[i] * grad[i];
    }
    for (std::size_t i = 0; i < v.size(); ++i) p[i] = p0[i] + kEps * v[i];
    const double up = m.loss(batch);
    for (std::size_t i = 0; i < v.size(); ++i) p[i] = p0[i] - kEps * v[i];
    const double down = m.loss(batch);
    std::copy(p0.begin(), p0.end(), p.begin());
    const double fd = (up - down) / (2 * kEps);
    const double rel = std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-12});
    EXPECT_LE(rel, kTol) << "direction " << dir << " analytic " << analytic << " fd " << fd;
  }
}

TEST(ToyLMTest, LossPartsSumToObjective) {
  const CharTokenizer tok;
  BasicToyLM<double> m(SmallConfig(), tok.size());
  m.init_random(2);
  BasicToyLM<double>::LossParts parts;
  const double total = m.loss_and_grad(SampleBatch(tok), {}, &parts);
  EXPECT_NEAR(total, parts.next_token + parts.auxiliary, 1e-12);
  EXPECT_GT(parts.auxiliary, 0.0);
}

TEST(ToyLMTest, InitialLossNearUniform) {
  const CharTokenizer tok;
  ToyLMConfig c = SmallConfig();
  c.init_std = 0.02F;
  ToyLM m(c, tok.size());
  m.init_random(1);
  ToyLM::LossParts parts;
  m.loss_and_grad(SampleBatch(tok), {}, &parts);
  EXPECT_NEAR(parts.next_token, std::log(static_cast<double>(tok.size())), 0.05);
}

// Changing a later token must not change any earlier position's logits.
TEST(ToyLMTest, AttentionIsCausal) {
  const CharTokenizer tok;
  ToyLM m(SmallConfig(), tok.size());
  m.init_random(5);
  TokenBatch a;
  a.batch = 1;
  a.tokens = tok.encode("Calculate: 12 + 34 = 4");
  a.seq_len = a.tokens.size();
  a.targets.assign(a.seq_len, -1);
  TokenBatch b = a;
  b.tokens.back() = tok.id_of('7');
  const auto la = m.logits(a);
  const auto lb = m.logits(b);
  const auto last = static_cast<Eigen::Index>(a.seq_len) - 1;
  EXPECT_EQ(la.topRows(last), lb.topRows(last));
  EXPECT_NE(la.row(last), lb.row(last));
}

TEST(ToyLMTest, LayerStatesFeedTheUnembedding) {
  const CharTokenizer tok;
  ToyLM m(SmallConfig(), tok.size());
  m.init_random(5);
  const auto ids = tok.encode("Calculate: 5 + 7 = ");
  const auto r = m.forward_with_states(ids);
  ASSERT_EQ(r.layer_states.states.rows(), 3);
  EXPECT_EQ(r.layer_states.token_position, ids.size() - 1);
  const Eigen::VectorXf via_states =
      m.tensor("w_unembed") * r.layer_states.states.row(2).transpose();
  EXPECT_TRUE(via_states.isApprox(r.logits, 1e-5F));

  // Row 0 is the token plus position embedding of the last input token.
  const Eigen::RowVectorXf emb =
      m.tensor("wte").row(ids.back()) + m.tensor("wpe").row(static_cast<Eigen::Index>(ids.size() - 1));
  EXPECT_TRUE(r.layer_states.states.row(0).isApprox(emb));
}

TEST(ToyLMTest, BatchedLogitsMatchSingleSequence) {
  const CharTokenizer tok;
  ToyLM m(SmallConfig(), tok.size());
  m.init_random(9);
  const TokenBatch batch = SampleBatch(tok);
  const auto all = m.logits(batch);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    TokenBatch one;
    one.batch = 1;
    one.seq_len = batch.seq_len;
    one.tokens.assign(batch.tokens.begin() + b * batch.seq_len,
                      batch.tokens.begin() + (b + 1) * batch.seq_len);
    one.targets.assign(one.seq_len, -1);
    const auto l = m.logits(one);
    EXPECT_TRUE(l.isApprox(all.middleRows(static_cast<Eigen::Index>(b * batch.seq_len),
                                          static_cast<Eigen::Index>(batch.seq_len)),
                           1e-5F));
  }
}

TEST(ToyLMTest, AnswerOrderHelpers) {
  EXPECT_EQ(emitted_answer(123, AnswerOrder::kMostSignificantFirst), "123");
  EXPECT_EQ(emitted_answer(123, AnswerOrder::kLeastSignificantFirst), "321");
  EXPECT_EQ(emitted_answer(-40, AnswerOrder::kLeastSignificantFirst), "-04");
  EXPECT_EQ(canonical_from_emitted("-04", AnswerOrder::kLeastSignificantFirst), "-40");
  EXPECT_EQ(parse_answer_order(to_string(AnswerOrder::kLeastSignificantFirst)),
            AnswerOrder::kLeastSignificantFirst);
}

TEST(ToyLMTest, ConfigParsingAndValidation) {
  const ToyLMConfig c = parse_toylm_config(
      "# comment\nn_layers = 3\nd_model = 32\nn_heads = 4\nmtp_heads = 1\n"
      "learning_rate = 0.002\nanswer_order = lsd_first\n");
  EXPECT_EQ(c.n_layers, 3u);
  EXPECT_EQ(c.d_model, 32u);
  EXPECT_EQ(c.mtp_heads, 1u);
  EXPECT_FLOAT_EQ(c.learning_rate, 0.002F);
  EXPECT_EQ(c.answer_order, AnswerOrder::kLeastSignificantFirst);
  EXPECT_THROW(parse_toylm_config("d_model = 30\nn_heads = 4\n"), UsageError);
  EXPECT_THROW(parse_toylm_config("bogus = 1\n"), UsageError);
  EXPECT_THROW(parse_toylm_config("n_layers = 2\nn_layers = 3\n"), UsageError);
}

ToyLMConfig TinyTrainConfig() {
  ToyLMConfig c;
  c.n_layers = 1;
  c.d_model = 16;
  c.n_heads = 2;
  c.batch_size = 8;
  c.train_steps = 30;
  c.warmup_steps = 5;
  c.log_every = 10;
  c.heldout_size = 50;
  c.learning_rate = 3e-3F;
  return c;
}

TEST(ToyLMTest, TrainingIsDeterministicAndLowersLoss) {
  const TrainResult a = train_toy_lm(TinyTrainConfig());
  const TrainResult b = train_toy_lm(TinyTrainConfig());
  ASSERT_EQ(a.curve.size(), b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) EXPECT_EQ(a.curve[i].loss, b.curve[i].loss);
  EXPECT_TRUE(std::equal(a.model.params().begin(), a.model.params().end(),
                         b.model.params().begin()));
  EXPECT_LT(a.curve.back().loss, a.curve.front().loss);
  EXPECT_EQ(a.heldout_exact_match, b.heldout_exact_match);
}

TEST(ToyLMTest, DivergenceRaisesNumericError) {
  ToyLMConfig c = TinyTrainConfig();
  c.learning_rate = 1e30F;
  c.grad_clip = 0.0F;
  c.warmup_steps = 0;
  EXPECT_THROW(train_toy_lm(c), NumericError);
}

TEST(ToyLMTest, CheckpointRoundTripIsBitExact) {
  const CharTokenizer tok;
  ToyLMConfig c = SmallConfig();
  c.answer_order = AnswerOrder::kLeastSignificantFirst;
  ToyLM m(c, tok.size());
  m.init_random(4);
  const auto dir = std::filesystem::temp_directory_path();
  write_checkpoint(dir / "arith_a.ckpt", m, tok);
  const ToyLM back = read_checkpoint(dir / "arith_a.ckpt");
  write_checkpoint(dir / "arith_b.ckpt", back, tok);
  EXPECT_EQ(binio::read_file((dir / "arith_a.ckpt").string()),
            binio::read_file((dir / "arith_b.ckpt").string()));
  EXPECT_EQ(back.config().answer_order, AnswerOrder::kLeastSignificantFirst);
  EXPECT_EQ(back.config().mtp_heads, c.mtp_heads);
  EXPECT_TRUE(std::equal(m.params().begin(), m.params().end(), back.params().begin()));

  auto bytes = binio::read_file((dir / "arith_a.ckpt").string());
  bytes[bytes.size() / 2] ^= 1;
  binio::write_file((dir / "arith_c.ckpt").string(), bytes);
  EXPECT_THROW(read_checkpoint(dir / "arith_c.ckpt"), DataError);
  for (const char* f : {"arith_a.ckpt", "arith_b.ckpt", "arith_c.ckpt"}) std::filesystem::remove(dir / f);
}

TEST(ToyLMTest, GenerationStopsAtLengthCap) {
  const CharTokenizer tok;
  ToyLM m(SmallConfig(), tok.size());
  m.init_random(1);
  const Generation g = generate_answer(m, tok, "Calculate: 1 + 1 = ", 3);
  EXPECT_LE(g.emitted.size(), 3u);
  if (!g.terminated) {
    EXPECT_EQ(g.emitted.size(), 3u);
  }
  EXPECT_FALSE(exact_match(Generation{"2", "2", false}, 2));
  EXPECT_TRUE(exact_match(Generation{"2", "2", true}, 2));
}

}  // namespace
}  // namespace arith
