#include "arith/problem.hpp"

#include <algorithm>
#include <limits>

#include "arith/errors.hpp"

namespace arith {

std::string_view to_string(Operation op) {
  switch (op) {
    case Operation::kAdd: return "add";
    case Operation::kSub: return "sub";
    case Operation::kMul: return "mul";
  }
  return "?";
}

std::string_view to_string(TemplateVariant variant) {
  return variant == TemplateVariant::kCompact ? "compact" : "spaced";
}

char operator_symbol(Operation op) {
  switch (op) {
    case Operation::kAdd: return '+';
    case Operation::kSub: return '-';
    case Operation::kMul: return '*';
  }
  return '?';
}

std::optional<Operation> parse_operation(std::string_view text) {
  if (text == "add") return Operation::kAdd;
  if (text == "sub") return Operation::kSub;
  if (text == "mul") return Operation::kMul;
  return std::nullopt;
}

std::optional<TemplateVariant> parse_template_variant(std::string_view text) {
  if (text == "compact") return TemplateVariant::kCompact;
  if (text == "spaced") return TemplateVariant::kSpaced;
  return std::nullopt;
}

std::vector<std::uint8_t> decimal_digits(std::uint64_t n) {
  std::vector<std::uint8_t> out;
  do {
    out.push_back(static_cast<std::uint8_t>(n % 10));
    n /= 10;
  } while (n != 0);
  return out;
}

std::size_t digit_count(std::uint64_t n) {
  std::size_t count = 1;
  while (n >= 10) {
    n /= 10;
    ++count;
  }
  return count;
}

std::vector<std::uint8_t> carry_bits(std::uint64_t a, std::uint64_t b) {
  const std::size_t columns = digit_count(std::max(a, b));
  std::vector<std::uint8_t> flags(columns, 0);
  unsigned carry = 0;
  for (std::size_t i = 0; i < columns; ++i) {
    const unsigned column = static_cast<unsigned>(a % 10 + b % 10) + carry;
    carry = column >= 10 ? 1 : 0;
    flags[i] = static_cast<std::uint8_t>(carry);
    a /= 10;
    b /= 10;
  }
  return flags;
}

std::int64_t apply(Operation op, std::uint64_t a, std::uint64_t b) {
  constexpr auto kMax =
      static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max());
  if (a > kMax || b > kMax) throw DataError("operand exceeds int64 range");
  switch (op) {
    case Operation::kAdd:
      if (a > kMax - b) throw DataError("sum overflows int64");
      return static_cast<std::int64_t>(a + b);
    case Operation::kSub:
      if (a < b) {
        throw DataError("subtraction " + std::to_string(a) + "-" +
                        std::to_string(b) + " would be negative");
      }
      return static_cast<std::int64_t>(a - b);
    case Operation::kMul:
      if (a != 0 && b > kMax / a) throw DataError("product overflows int64");
      return static_cast<std::int64_t>(a * b);
  }
  throw DataError("unknown operation");
}

std::string render_prompt(std::uint64_t a, std::uint64_t b, Operation op,
                          TemplateVariant variant) {
  std::string out = "Calculate: ";
  out += std::to_string(a);
  if (variant == TemplateVariant::kSpaced) out += ' ';
  out += operator_symbol(op);
  if (variant == TemplateVariant::kSpaced) out += ' ';
  out += std::to_string(b);
  out += " = ";
  return out;
}

std::string canonical_answer(std::int64_t value) { return std::to_string(value); }

ArithProblem make_problem(std::uint64_t a, std::uint64_t b, Operation op,
                          TemplateVariant variant) {
  ArithProblem p;
  p.op_a = a;
  p.op_b = b;
  p.operation = op;
  p.answer = apply(op, a, b);
  p.prompt = render_prompt(a, b, op, variant);
  p.answer_digits = decimal_digits(static_cast<std::uint64_t>(p.answer));
  if (op == Operation::kAdd) p.carry_bits = carry_bits(a, b);
  return p;
}

}  // namespace arith
