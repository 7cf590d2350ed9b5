#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "arith/dataset.hpp"

namespace arith {

// Binary layout (all integers and floats little-endian):
//
//   magic "ARSTORE\0" | u32 version (1)
//   str model_name | u32 d_model | u32 n_layer_states | u64 n_samples
//   str template_variant | str tokenizer_fingerprint
//   str task_kind | u32 num_classes | u32 position (0xffffffff: none)
//   u8 has_range_base | u64 range_base
//   u32 n_metadata | (str key, str value) * n_metadata
//   u32 flags (bit 0: unembedding block, bit 1: final-norm block)
//   [unembedding] u32 vocab_size | str symbol * vocab_size
//                 | f32 W_U[vocab_size][d_model]
//   [final norm]  u8 kind (0 layer norm, 1 RMS norm) | f32 eps
//                 | f32 gain[d_model] | f32 bias[d_model]
//   n_samples * ( u64 sample_id | u32 label | u32 gold_token (0xffffffff: none)
//                 | f32 state[n_layer_states][d_model] )
//   u32 crc32 of every preceding byte
//
// where str is a u32 byte length followed by UTF-8 bytes.
inline constexpr std::uint32_t kStoreVersion = 1;
inline constexpr std::uint32_t kNoneU32 = 0xffffffffU;

struct StoreHeader {
  std::string model_name;
  std::uint32_t d_model = 0;
  std::uint32_t n_layer_states = 0;
  std::uint64_t n_samples = 0;
  std::string template_variant = "spaced";
  std::string tokenizer_fingerprint;
  TaskLabelSpec task;
  std::vector<std::pair<std::string, std::string>> metadata;

  std::optional<std::string> meta(std::string_view key) const;
  void set_meta(std::string key, std::string value);

  friend bool operator==(const StoreHeader&, const StoreHeader&) = default;
};

struct Unembedding {
  std::vector<std::string> vocab;
  std::vector<float> weights;  // vocab.size() x d_model, row-major

  friend bool operator==(const Unembedding&, const Unembedding&) = default;
};

struct FinalNorm {
  enum class Kind : std::uint8_t { kLayerNorm = 0, kRmsNorm = 1 };
  Kind kind = Kind::kRmsNorm;
  float eps = 1e-5F;
  std::vector<float> gain;
  std::vector<float> bias;  // zeros for RMS norm

  std::vector<float> apply(std::span<const float> h) const;

  friend bool operator==(const FinalNorm&, const FinalNorm&) = default;
};

struct StoreSample {
  std::uint64_t id = 0;
  std::uint32_t label = 0;
  std::optional<std::uint32_t> gold_token;
  std::vector<float> states;  // n_layer_states x d_model, layer-major

  friend bool operator==(const StoreSample&, const StoreSample&) = default;
};

class ActivationStore {
 public:
  using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  StoreHeader header;
  std::optional<Unembedding> unembedding;
  std::optional<FinalNorm> final_norm;
  std::vector<StoreSample> samples;

  std::size_t size() const { return samples.size(); }
  std::span<const float> state(std::size_t sample, std::size_t layer) const;
  // All samples' vectors at one layer state, n_samples x d_model.
  Matrix layer_matrix(std::size_t layer) const;
  std::vector<std::uint32_t> labels() const;
  std::vector<std::size_t> class_counts() const;
  Eigen::Map<const Matrix> unembedding_matrix() const;

  // Throws DataError on any shape, label or block inconsistency.
  void validate() const;

  friend bool operator==(const ActivationStore&, const ActivationStore&) = default;
};

std::vector<std::uint8_t> encode_store(const ActivationStore& store);
ActivationStore decode_store(std::span<const std::uint8_t> bytes);
// Header only; the sample payload is not parsed. Checksum is still verified.
StoreHeader decode_store_header(std::span<const std::uint8_t> bytes);

// n_samples in the header is taken from the sample list.
void write_store(const std::filesystem::path& path, const ActivationStore& store);
ActivationStore read_store(const std::filesystem::path& path);
StoreHeader read_store_header(const std::filesystem::path& path);

// Copy restricted to the given sample indices, in that order.
ActivationStore subset(const ActivationStore& store, std::span<const std::size_t> indices);

// Same store with labels permuted by a seeded shuffle.
ActivationStore shuffle_labels(const ActivationStore& store, std::uint64_t seed);

}  // namespace arith
