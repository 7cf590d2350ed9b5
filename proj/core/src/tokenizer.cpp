#include "arith/tokenizer.hpp"

#include "arith/binio.hpp"
#include "arith/errors.hpp"

namespace arith {

namespace {
constexpr std::string_view kAlphabet = " +-*=:0123456789Calcute";
}

CharTokenizer::CharTokenizer() {
  lookup_.fill(-1);
  symbols_.push_back("<eos>");
  for (char c : kAlphabet) {
    lookup_[static_cast<unsigned char>(c)] = static_cast<TokenId>(symbols_.size());
    symbols_.emplace_back(1, c);
  }
}

TokenId CharTokenizer::id_of(char c) const {
  const TokenId id = lookup_[static_cast<unsigned char>(c)];
  if (id < 0) {
    std::string shown = (c >= 32 && c < 127) ? std::string(1, c)
                                             : "\\x" + std::to_string(static_cast<unsigned char>(c));
    throw DataError("symbol '" + shown + "' is not in the toy vocabulary");
  }
  return id;
}

std::vector<TokenId> CharTokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(id_of(c));
  return ids;
}

std::string CharTokenizer::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= symbols_.size()) {
      throw DataError("token id " + std::to_string(id) + " outside the vocabulary");
    }
    if (id == eos()) continue;
    out += symbols_[static_cast<std::size_t>(id)];
  }
  return out;
}

std::string CharTokenizer::fingerprint() const {
  std::string joined = "char-v1";
  for (const auto& s : symbols_) {
    joined += '\x1f';
    joined += s;
  }
  return "char-v1:" + binio::fnv1a_hex(joined);
}

}  // namespace arith
