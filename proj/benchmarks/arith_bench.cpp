#include <benchmark/benchmark.h>

#include "arith/activation_store.hpp"
#include "arith/dataset.hpp"
#include "arith/lens.hpp"
#include "arith/probe.hpp"
#include "arith/rng.hpp"
#include "arith/toy_lm.hpp"

namespace arith {
namespace {

ActivationStore RandomStore(std::size_t n, std::uint32_t d, std::uint32_t layers) {
  ActivationStore s;
  s.header.model_name = "bench";
  s.header.d_model = d;
  s.header.n_layer_states = layers;
  s.header.n_samples = n;
  s.header.task = TaskLabelSpec::make(TaskKind::kDigitPos, kOnes);
  Rng rng(1);
  for (std::size_t i = 0; i < n; ++i) {
    StoreSample smp;
    smp.id = i;
    smp.label = static_cast<std::uint32_t>(i % 10);
    smp.gold_token = static_cast<std::uint32_t>(i % 16);
    smp.states.resize(std::size_t{layers} * d);
    for (float& v : smp.states) v = static_cast<float>(rng.normal());
    s.samples.push_back(std::move(smp));
  }
  std::vector<float> w(16 * d);
  for (float& v : w) v = static_cast<float>(rng.normal());
  s.unembedding = Unembedding{std::vector<std::string>(16, "t"), w};
  return s;
}

void BM_ToyForward(benchmark::State& state) {
  const CharTokenizer tok;
  ToyLMConfig c;
  c.d_model = static_cast<std::uint32_t>(state.range(0));
  ToyLM m(c, tok.size());
  m.init_random(1);
  const auto tokens = tok.encode("Calculate: 123 + 456 = ");
  for (auto _ : state) benchmark::DoNotOptimize(m.forward_with_states(tokens));
}
BENCHMARK(BM_ToyForward)->Arg(64)->Arg(128);

void BM_ToyTrainStep(benchmark::State& state) {
  const CharTokenizer tok;
  ToyLMConfig c;
  ToyLM m(c, tok.size());
  m.init_random(1);
  std::vector<std::pair<std::string, std::string>> ex;
  Rng rng(2);
  for (int i = 0; i < 64; ++i) {
    const auto a = rng.uniform(0, 999), b = rng.uniform(0, 999);
    ex.emplace_back(render_prompt(a, b, Operation::kAdd, TemplateVariant::kSpaced),
                    emitted_answer(static_cast<std::int64_t>(a + b), c.answer_order));
  }
  const TokenBatch batch = make_answer_batch(tok, ex);
  std::vector<float> grad(m.params().size());
  for (auto _ : state) benchmark::DoNotOptimize(m.loss_and_grad(batch, grad));
}
BENCHMARK(BM_ToyTrainStep)->Unit(benchmark::kMillisecond);

void BM_ProbeTrain(benchmark::State& state) {
  const ActivationStore s = RandomStore(1000, static_cast<std::uint32_t>(state.range(0)), 1);
  ProbeTrainConfig cfg;
  for (auto _ : state) {
    benchmark::DoNotOptimize(train_probe(s, 0, s.header.task, cfg, 42));
  }
}
BENCHMARK(BM_ProbeTrain)->Arg(64)->Arg(512)->Unit(benchmark::kMillisecond);

void BM_StoreEncode(benchmark::State& state) {
  const ActivationStore s = RandomStore(1000, 256, 8);
  for (auto _ : state) benchmark::DoNotOptimize(encode_store(s));
  state.SetBytesProcessed(state.iterations() * 1000 * 256 * 8 * 4);
}
BENCHMARK(BM_StoreEncode)->Unit(benchmark::kMillisecond);

void BM_StoreDecode(benchmark::State& state) {
  const auto bytes = encode_store(RandomStore(1000, 256, 8));
  for (auto _ : state) benchmark::DoNotOptimize(decode_store(bytes));
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(bytes.size()));
}
BENCHMARK(BM_StoreDecode)->Unit(benchmark::kMillisecond);

void BM_LensHistogram(benchmark::State& state) {
  const ActivationStore s = RandomStore(1000, 256, 8);
  for (auto _ : state) benchmark::DoNotOptimize(earliest_top1(s));
}
BENCHMARK(BM_LensHistogram)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace arith

BENCHMARK_MAIN();
