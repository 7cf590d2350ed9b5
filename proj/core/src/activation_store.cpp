#include "arith/activation_store.hpp"

#include <algorithm>
#include <cmath>

#include "arith/binio.hpp"
#include "arith/errors.hpp"
#include "arith/rng.hpp"

namespace arith {
namespace {

constexpr char kMagic[8] = {'A', 'R', 'S', 'T', 'O', 'R', 'E', '\0'};
constexpr std::uint32_t kFlagUnembedding = 1U << 0;
constexpr std::uint32_t kFlagFinalNorm = 1U << 1;

void encode_header(binio::Writer& w, const StoreHeader& h, std::uint32_t flags) {
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kStoreVersion);
  w.str(h.model_name);
  w.u32(h.d_model);
  w.u32(h.n_layer_states);
  w.u64(h.n_samples);
  w.str(h.template_variant);
  w.str(h.tokenizer_fingerprint);
  w.str(to_string(h.task.kind));
  w.u32(h.task.num_classes);
  w.u32(h.task.position.value_or(kNoneU32));
  w.u8(h.task.range_base.has_value() ? 1 : 0);
  w.u64(h.task.range_base.value_or(0));
  w.u32(static_cast<std::uint32_t>(h.metadata.size()));
  for (const auto& [k, v] : h.metadata) {
    w.str(k);
    w.str(v);
  }
  w.u32(flags);
}

// Verifies magic and version; leaves the reader positioned after the flags
// word, which is returned alongside the header.
std::pair<StoreHeader, std::uint32_t> decode_header(binio::Reader& r) {
  const auto magic = r.bytes(sizeof kMagic);
  if (!std::equal(magic.begin(), magic.end(), std::begin(kMagic))) {
    throw DataError("not an activation store (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kStoreVersion) {
    throw DataError("activation store version " + std::to_string(version) +
                    " is not supported (expected " + std::to_string(kStoreVersion) + ")");
  }
  StoreHeader h;
  h.model_name = r.str();
  h.d_model = r.u32();
  h.n_layer_states = r.u32();
  h.n_samples = r.u64();
  h.template_variant = r.str();
  h.tokenizer_fingerprint = r.str();
  const auto kind = parse_task_kind(r.str());
  if (!kind) throw DataError("activation store has an unknown task kind");
  h.task.kind = *kind;
  h.task.num_classes = r.u32();
  if (const std::uint32_t pos = r.u32(); pos != kNoneU32) h.task.position = pos;
  const bool has_base = r.u8() != 0;
  const std::uint64_t base = r.u64();
  if (has_base) h.task.range_base = base;
  const std::uint32_t n_meta = r.u32();
  if (n_meta > r.remaining() / 8) throw DataError("activation store metadata truncated");
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    std::string v = r.str();
    h.metadata.emplace_back(std::move(k), std::move(v));
  }
  const std::uint32_t flags = r.u32();
  if ((flags & ~(kFlagUnembedding | kFlagFinalNorm)) != 0) {
    throw DataError("activation store has unknown flag bits");
  }
  return {std::move(h), flags};
}

std::span<const std::uint8_t> checked_body(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof kMagic + 8) throw DataError("activation store is truncated");
  if (!std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    throw DataError("not an activation store (bad magic)");
  }
  const auto body = bytes.first(bytes.size() - 4);
  binio::Reader tail(bytes.last(4));
  if (binio::crc32(body) != tail.u32()) {
    throw DataError("activation store checksum mismatch (corrupt or truncated file)");
  }
  return body;
}

}  // namespace

std::optional<std::string> StoreHeader::meta(std::string_view key) const {
  for (const auto& [k, v] : metadata) {
    if (k == key) return v;
  }
  return std::nullopt;
}

void StoreHeader::set_meta(std::string key, std::string value) {
  for (auto& [k, v] : metadata) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  metadata.emplace_back(std::move(key), std::move(value));
}

std::vector<float> FinalNorm::apply(std::span<const float> h) const {
  if (h.size() != gain.size() || h.size() != bias.size()) {
    throw DataError("final-norm width does not match the state");
  }
  const auto d = static_cast<double>(h.size());
  double mean = 0.0;
  if (kind == Kind::kLayerNorm) {
    for (float v : h) mean += v;
    mean /= d;
  }
  double sq = 0.0;
  for (float v : h) sq += (v - mean) * (v - mean);
  const double inv = 1.0 / std::sqrt(sq / d + eps);
  std::vector<float> out(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) {
    out[i] = static_cast<float>((h[i] - mean) * inv * gain[i] + bias[i]);
  }
  return out;
}

std::span<const float> ActivationStore::state(std::size_t sample, std::size_t layer) const {
  const std::size_t d = header.d_model;
  if (layer >= header.n_layer_states) throw DataError("layer state index out of range");
  return std::span<const float>(samples.at(sample).states).subspan(layer * d, d);
}

ActivationStore::Matrix ActivationStore::layer_matrix(std::size_t layer) const {
  const auto d = static_cast<Eigen::Index>(header.d_model);
  Matrix out(static_cast<Eigen::Index>(samples.size()), d);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto s = state(i, layer);
    out.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXf>(s.data(), d);
  }
  return out;
}

std::vector<std::uint32_t> ActivationStore::labels() const {
  std::vector<std::uint32_t> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

std::vector<std::size_t> ActivationStore::class_counts() const {
  std::vector<std::size_t> counts(header.task.num_classes, 0);
  for (const auto& s : samples) {
    if (s.label >= counts.size()) throw DataError("label out of range");
    ++counts[s.label];
  }
  return counts;
}

Eigen::Map<const ActivationStore::Matrix> ActivationStore::unembedding_matrix() const {
  if (!unembedding) throw DataError("activation store has no unembedding block");
  return {unembedding->weights.data(), static_cast<Eigen::Index>(unembedding->vocab.size()),
          static_cast<Eigen::Index>(header.d_model)};
}

static void validate_parts(const StoreHeader& header, const std::optional<Unembedding>& unembedding,
                    const std::optional<FinalNorm>& final_norm,
                    std::span<const StoreSample> samples) {
  if (header.d_model == 0) throw DataError("store d_model must be positive");
  if (header.n_layer_states == 0) throw DataError("store needs at least one layer state");
  if (header.task.num_classes == 0) throw DataError("store label schema has K = 0");
  if (header.n_samples != samples.size()) {
    throw DataError("store header declares " + std::to_string(header.n_samples) +
                    " samples but holds " + std::to_string(samples.size()));
  }
  const std::size_t width = std::size_t{header.n_layer_states} * header.d_model;
  for (const auto& s : samples) {
    if (s.states.size() != width) {
      throw DataError("sample " + std::to_string(s.id) + " has " +
                      std::to_string(s.states.size()) + " floats, expected " +
                      std::to_string(width));
    }
    if (s.label >= header.task.num_classes) {
      throw DataError("sample " + std::to_string(s.id) + " label " +
                      std::to_string(s.label) + " is outside [0, " +
                      std::to_string(header.task.num_classes) + ")");
    }
    if (s.gold_token && *s.gold_token == kNoneU32) {
      throw DataError("gold token id collides with the 'none' marker");
    }
  }
  if (unembedding) {
    if (unembedding->weights.size() != unembedding->vocab.size() * header.d_model) {
      throw DataError("unembedding block rows do not match the vocabulary listing");
    }
    for (const auto& s : samples) {
      if (s.gold_token && *s.gold_token >= unembedding->vocab.size()) {
        throw DataError("sample " + std::to_string(s.id) + " gold token outside the vocabulary");
      }
    }
  }
  if (final_norm) {
    if (final_norm->gain.size() != header.d_model || final_norm->bias.size() != header.d_model) {
      throw DataError("final-norm block width does not match d_model");
    }
  }
}

void ActivationStore::validate() const {
  validate_parts(header, unembedding, final_norm, samples);
}

std::vector<std::uint8_t> encode_store(const ActivationStore& store) {
  StoreHeader header = store.header;
  header.n_samples = store.samples.size();
  validate_parts(header, store.unembedding, store.final_norm, store.samples);
  std::uint32_t flags = 0;
  if (store.unembedding) flags |= kFlagUnembedding;
  if (store.final_norm) flags |= kFlagFinalNorm;

  binio::Writer w;
  encode_header(w, header, flags);
  if (store.unembedding) {
    w.u32(static_cast<std::uint32_t>(store.unembedding->vocab.size()));
    for (const auto& s : store.unembedding->vocab) w.str(s);
    w.f32s(store.unembedding->weights);
  }
  if (store.final_norm) {
    w.u8(static_cast<std::uint8_t>(store.final_norm->kind));
    w.f32(store.final_norm->eps);
    w.f32s(store.final_norm->gain);
    w.f32s(store.final_norm->bias);
  }
  for (const auto& s : store.samples) {
    w.u64(s.id);
    w.u32(s.label);
    w.u32(s.gold_token.value_or(kNoneU32));
    w.f32s(s.states);
  }
  w.u32(binio::crc32(w.buffer()));
  return w.take();
}

StoreHeader decode_store_header(std::span<const std::uint8_t> bytes) {
  binio::Reader r(checked_body(bytes));
  return decode_header(r).first;
}

ActivationStore decode_store(std::span<const std::uint8_t> bytes) {
  binio::Reader r(checked_body(bytes));
  auto [header, flags] = decode_header(r);
  ActivationStore store;
  store.header = std::move(header);
  const std::size_t d = store.header.d_model;
  if (flags & kFlagUnembedding) {
    Unembedding u;
    const std::uint32_t vocab = r.u32();
    if (vocab > r.remaining() / 4) throw DataError("unembedding vocabulary truncated");
    u.vocab.reserve(vocab);
    for (std::uint32_t i = 0; i < vocab; ++i) u.vocab.push_back(r.str());
    if (d != 0 && vocab > r.remaining() / 4 / d) throw DataError("unembedding block truncated");
    u.weights.resize(std::size_t{vocab} * d);
    r.f32s(u.weights);
    store.unembedding = std::move(u);
  }
  if (flags & kFlagFinalNorm) {
    FinalNorm n;
    const std::uint8_t kind = r.u8();
    if (kind > 1) throw DataError("unknown final-norm kind");
    n.kind = static_cast<FinalNorm::Kind>(kind);
    n.eps = r.f32();
    n.gain.resize(d);
    n.bias.resize(d);
    r.f32s(n.gain);
    r.f32s(n.bias);
    store.final_norm = std::move(n);
  }
  const std::size_t width = std::size_t{store.header.n_layer_states} * d;
  const std::size_t record = 16 + width * 4;
  if (store.header.n_samples > r.remaining() / std::max<std::size_t>(record, 1)) {
    throw DataError("activation store declares more samples than it contains");
  }
  store.samples.resize(store.header.n_samples);
  for (auto& s : store.samples) {
    s.id = r.u64();
    s.label = r.u32();
    if (const std::uint32_t gold = r.u32(); gold != kNoneU32) s.gold_token = gold;
    s.states.resize(width);
    r.f32s(s.states);
  }
  if (r.remaining() != 0) throw DataError("activation store has trailing bytes");
  store.validate();
  return store;
}

void write_store(const std::filesystem::path& path, const ActivationStore& store) {
  binio::write_file(path.string(), encode_store(store));
}

ActivationStore read_store(const std::filesystem::path& path) {
  try {
    return decode_store(binio::read_file(path.string()));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

StoreHeader read_store_header(const std::filesystem::path& path) {
  try {
    return decode_store_header(binio::read_file(path.string()));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

ActivationStore subset(const ActivationStore& store, std::span<const std::size_t> indices) {
  ActivationStore out;
  out.header = store.header;
  out.unembedding = store.unembedding;
  out.final_norm = store.final_norm;
  out.samples.reserve(indices.size());
  for (std::size_t i : indices) out.samples.push_back(store.samples.at(i));
  out.header.n_samples = out.samples.size();
  return out;
}

ActivationStore shuffle_labels(const ActivationStore& store, std::uint64_t seed) {
  ActivationStore out = store;
  auto labels = store.labels();
  Rng rng(seed);
  rng.shuffle(std::span<std::uint32_t>(labels));
  for (std::size_t i = 0; i < labels.size(); ++i) out.samples[i].label = labels[i];
  out.header.set_meta("labels", "shuffled");
  return out;
}

}  // namespace arith
