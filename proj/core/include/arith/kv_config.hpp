#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace arith {

struct KeyValue {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

// "key = value" per line. Blank lines and '#' comments are skipped;
// duplicate keys are a UsageError.
std::vector<KeyValue> parse_key_values(std::string_view text);
std::string read_text_file(const std::string& path);

// Typed conversions that name the offending key on failure.
std::uint64_t kv_to_u64(const KeyValue& kv);
double kv_to_double(const KeyValue& kv);
bool kv_to_bool(const KeyValue& kv);

}  // namespace arith
