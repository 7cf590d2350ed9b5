#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace arith {

using TokenId = std::int32_t;

// Character-level tokenizer over the closed prompt/answer alphabet.
// Id 0 is the end-of-sequence marker, which no text character maps to.
class CharTokenizer {
 public:
  CharTokenizer();

  std::vector<TokenId> encode(std::string_view text) const;
  // Throws on ids outside the vocabulary; the end marker decodes to nothing.
  std::string decode(const std::vector<TokenId>& ids) const;

  TokenId eos() const { return 0; }
  std::size_t size() const { return symbols_.size(); }
  // Printable listing, one entry per id ("<eos>" for the end marker).
  const std::vector<std::string>& symbols() const { return symbols_; }
  // Stable hash of the vocabulary listing.
  std::string fingerprint() const;
  TokenId id_of(char c) const;

 private:
  std::vector<std::string> symbols_;
  std::array<TokenId, 256> lookup_{};
};

}  // namespace arith
