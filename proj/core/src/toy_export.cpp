#include "arith/toy_export.hpp"

#include "arith/errors.hpp"

namespace arith {

ActivationStore export_activations(const ToyLM& model, const CharTokenizer& tokenizer,
                                   const ProbeDataset& dataset, const ExportOptions& options) {
  const auto& config = model.config();
  ActivationStore store;
  store.header.model_name = options.model_name;
  store.header.d_model = config.d_model;
  store.header.n_layer_states = config.n_layers + 1;
  store.header.template_variant = std::string(to_string(dataset.template_variant));
  store.header.tokenizer_fingerprint = tokenizer.fingerprint();
  store.header.task = dataset.task;
  store.header.set_meta("dataset_seed", std::to_string(dataset.seed));
  store.header.set_meta("source", "toy-lm");
  store.header.set_meta("gold_token", "first emitted answer character");
  store.header.set_meta("answer_order", std::string(to_string(config.answer_order)));

  if (options.embed_unembedding) {
    Unembedding u;
    u.vocab = tokenizer.symbols();
    const auto w = model.tensor("w_unembed");
    u.weights.assign(w.data(), w.data() + w.size());
    store.unembedding = std::move(u);
  }

  store.samples.reserve(dataset.items.size());
  for (std::size_t i = 0; i < dataset.items.size(); ++i) {
    const auto& item = dataset.items[i];
    std::vector<TokenId> ids;
    TokenId gold = 0;
    try {
      ids = tokenizer.encode(item.problem.prompt);
      gold = tokenizer.id_of(emitted_answer(item.problem.answer, config.answer_order).front());
    } catch (const DataError& e) {
      throw DataError("sample " + std::to_string(i) + ": " + e.what());
    }
    const auto result = model.forward_with_states(ids);
    StoreSample s;
    s.id = i;
    s.label = item.label;
    s.gold_token = static_cast<std::uint32_t>(gold);
    const auto& states = result.layer_states.states;
    s.states.assign(states.data(), states.data() + states.size());
    store.samples.push_back(std::move(s));
  }
  store.header.n_samples = store.samples.size();
  return store;
}

}  // namespace arith
