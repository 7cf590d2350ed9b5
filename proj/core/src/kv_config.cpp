#include "arith/kv_config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "arith/errors.hpp"

namespace arith {
namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(const KeyValue& kv, std::string_view expected) {
  throw UsageError("line " + std::to_string(kv.line) + ": key '" + kv.key +
                   "' expects " + std::string(expected) + ", got '" + kv.value + "'");
}

}  // namespace

std::vector<KeyValue> parse_key_values(std::string_view text) {
  std::vector<KeyValue> out;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto end = text.find('\n', pos);
    std::string_view line = text.substr(pos, end == std::string_view::npos ? text.npos : end - pos);
    pos = end == std::string_view::npos ? text.size() + 1 : end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw UsageError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    KeyValue kv{std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))),
                line_no};
    if (kv.key.empty()) throw UsageError("line " + std::to_string(line_no) + ": empty key");
    if (!seen.insert(kv.key).second) {
      throw UsageError("line " + std::to_string(line_no) + ": duplicate key '" + kv.key + "'");
    }
    out.push_back(std::move(kv));
  }
  return out;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t kv_to_u64(const KeyValue& kv) {
  std::uint64_t v = 0;
  const auto* first = kv.value.data();
  const auto* last = first + kv.value.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) bad_value(kv, "a non-negative integer");
  return v;
}

double kv_to_double(const KeyValue& kv) {
  try {
    std::size_t used = 0;
    const double v = std::stod(kv.value, &used);
    if (used != kv.value.size()) bad_value(kv, "a number");
    return v;
  } catch (const std::logic_error&) {
    bad_value(kv, "a number");
  }
}

bool kv_to_bool(const KeyValue& kv) {
  if (kv.value == "true" || kv.value == "1" || kv.value == "yes") return true;
  if (kv.value == "false" || kv.value == "0" || kv.value == "no") return false;
  bad_value(kv, "true or false");
}

}  // namespace arith
