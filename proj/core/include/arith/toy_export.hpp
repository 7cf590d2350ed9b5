#pragma once

#include <string>

#include "arith/activation_store.hpp"
#include "arith/dataset.hpp"
#include "arith/tokenizer.hpp"
#include "arith/toy_lm.hpp"

namespace arith {

struct ExportOptions {
  std::string model_name = "toy-lm";
  bool embed_unembedding = true;
};

// Last-prompt-token states at every layer state for each dataset item, in
// dataset order. The gold token is the first answer character in the
// model's emission order. Tokenization failures name the offending sample.
ActivationStore export_activations(const ToyLM& model, const CharTokenizer& tokenizer,
                                   const ProbeDataset& dataset,
                                   const ExportOptions& options = {});

}  // namespace arith
