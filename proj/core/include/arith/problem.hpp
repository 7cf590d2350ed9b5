#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace arith {

enum class Operation : std::uint8_t { kAdd, kSub, kMul };

// Spacing around the operator in the prompt template.
//   kCompact: "Calculate: 45+23 = "
//   kSpaced:  "Calculate: 45 + 23 = "
enum class TemplateVariant : std::uint8_t { kCompact, kSpaced };

std::string_view to_string(Operation op);
std::string_view to_string(TemplateVariant variant);
char operator_symbol(Operation op);
std::optional<Operation> parse_operation(std::string_view text);
std::optional<TemplateVariant> parse_template_variant(std::string_view text);

// Base-10 digits, least-significant first. digits(0) == {0}.
std::vector<std::uint8_t> decimal_digits(std::uint64_t n);
std::size_t digit_count(std::uint64_t n);

// Carry out of every schoolbook column of a + b, least-significant first.
// One flag per column of max(a, b); the carry out of the top column is the
// last flag.
std::vector<std::uint8_t> carry_bits(std::uint64_t a, std::uint64_t b);

// Exact result of `op`. Subtraction requires a >= b (negative operands and
// results are out of scope); multiplication must not overflow 64 bits.
std::int64_t apply(Operation op, std::uint64_t a, std::uint64_t b);

std::string render_prompt(std::uint64_t a, std::uint64_t b, Operation op,
                          TemplateVariant variant);

// Canonical decimal rendering used for exact-match scoring.
std::string canonical_answer(std::int64_t value);

struct ArithProblem {
  std::uint64_t op_a = 0;
  std::uint64_t op_b = 0;
  Operation operation = Operation::kAdd;
  std::string prompt;
  std::int64_t answer = 0;
  std::vector<std::uint8_t> answer_digits;  // least-significant first
  std::vector<std::uint8_t> carry_bits;     // addition only, else empty

  // Digit of the answer at `position` (ones = 0); 0 past the top digit.
  std::uint8_t answer_digit(std::size_t position) const {
    return position < answer_digits.size() ? answer_digits[position] : 0;
  }

  friend bool operator==(const ArithProblem&, const ArithProblem&) = default;
};

// Throws DataError when the operands are invalid for `op`.
ArithProblem make_problem(std::uint64_t a, std::uint64_t b, Operation op,
                          TemplateVariant variant);

}  // namespace arith
