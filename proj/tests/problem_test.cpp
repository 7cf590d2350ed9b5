#include <gtest/gtest.h>

#include <string>

#include "arith/dataset.hpp"
#include "arith/errors.hpp"
#include "arith/problem.hpp"
#include "arith/rng.hpp"
#include "oracle.hpp"

namespace arith {
namespace {

TEST(ProblemTest, RenderPromptTemplates) {
  EXPECT_EQ(render_prompt(45, 23, Operation::kAdd, TemplateVariant::kSpaced),
            "Calculate: 45 + 23 = ");
  EXPECT_EQ(render_prompt(45, 23, Operation::kSub, TemplateVariant::kCompact),
            "Calculate: 45-23 = ");
  EXPECT_EQ(render_prompt(7, 8, Operation::kMul, TemplateVariant::kSpaced),
            "Calculate: 7 * 8 = ");
}

TEST(ProblemTest, DigitsAreLeastSignificantFirst) {
  EXPECT_EQ(decimal_digits(0), (std::vector<std::uint8_t>{0}));
  EXPECT_EQ(decimal_digits(907), (std::vector<std::uint8_t>{7, 0, 9}));
  EXPECT_EQ(digit_count(0), 1u);
  EXPECT_EQ(digit_count(1000), 4u);
}

TEST(ProblemTest, CarryBitsKnownCases) {
  EXPECT_EQ(carry_bits(999, 1), (std::vector<std::uint8_t>{1, 1, 1}));
  EXPECT_EQ(carry_bits(123, 456), (std::vector<std::uint8_t>{0, 0, 0}));
  EXPECT_EQ(carry_bits(158, 242), (std::vector<std::uint8_t>{1, 1, 0}));
  EXPECT_EQ(carry_bits(505, 505), (std::vector<std::uint8_t>{1, 0, 1}));
}

TEST(ProblemTest, ApplyRejectsOutOfDomain) {
  EXPECT_THROW(apply(Operation::kSub, 3, 4), DataError);
  EXPECT_THROW(apply(Operation::kMul, 1ULL << 40, 1ULL << 40), DataError);
  EXPECT_THROW(apply(Operation::kAdd, ~0ULL, 1), DataError);
}

TEST(ProblemTest, ParseRoundTrips) {
  for (Operation op : {Operation::kAdd, Operation::kSub, Operation::kMul}) {
    EXPECT_EQ(parse_operation(to_string(op)), op);
  }
  EXPECT_EQ(parse_template_variant("compact"), TemplateVariant::kCompact);
  EXPECT_FALSE(parse_operation("div"));
}

TEST(ProblemTest, AgreesWithSchoolbookOracleOnRandomOperands) {
  Rng rng(2024);
  for (int i = 0; i < 20000; ++i) {
    const std::uint64_t a = rng.uniform(0, 999'999'999);
    const std::uint64_t b = rng.uniform(0, 999'999'999);
    const std::string sa = std::to_string(a);
    const std::string sb = std::to_string(b);
    const ArithProblem add = make_problem(a, b, Operation::kAdd, TemplateVariant::kSpaced);
    ASSERT_EQ(canonical_answer(add.answer), oracle::add(sa, sb)) << sa << "+" << sb;
    const auto carries = oracle::carries(sa, sb);
    ASSERT_EQ(add.carry_bits.size(), carries.size());
    for (std::size_t k = 0; k < carries.size(); ++k) ASSERT_EQ(add.carry_bits[k], carries[k]);
    ASSERT_EQ(canonical_answer(apply(Operation::kMul, a, b)), oracle::mul(sa, sb));
    if (oracle::less(sa, sb)) continue;
    ASSERT_EQ(canonical_answer(apply(Operation::kSub, a, b)), oracle::sub(sa, sb));
  }
}

TEST(LabelTest, MatchesOracleForEveryTask) {
  Rng rng(7);
  for (int i = 0; i < 5000; ++i) {
    const std::uint64_t a = rng.uniform(0, 9999);
    const std::uint64_t b = rng.uniform(0, 9999);
    const std::string sa = std::to_string(a);
    const std::string sb = std::to_string(b);
    const ArithProblem p = make_problem(a, b, Operation::kAdd, TemplateVariant::kSpaced);
    const std::string sum = oracle::add(sa, sb);
    EXPECT_EQ(label_for(TaskLabelSpec::make(TaskKind::kStructure3), p),
              static_cast<std::uint32_t>(oracle::structure_class(sa, sb)));
    const auto carries = oracle::carries(sa, sb);
    for (std::uint32_t pos : {kOnes, kTens, kHundreds}) {
      EXPECT_EQ(label_for(TaskLabelSpec::make(TaskKind::kDigitPos, pos), p),
                static_cast<std::uint32_t>(oracle::digit_at(sum, pos)));
      EXPECT_EQ(label_for(TaskLabelSpec::make(TaskKind::kCarryPos, pos), p),
                pos < carries.size() ? static_cast<std::uint32_t>(carries[pos]) : 0u);
    }
  }
}

TEST(LabelTest, SumRangeBounds) {
  const auto task = TaskLabelSpec::make(TaskKind::kSumRange, std::nullopt, 500);
  EXPECT_EQ(label_for(task, make_problem(250, 250, Operation::kAdd, TemplateVariant::kSpaced)), 0u);
  EXPECT_EQ(label_for(task, make_problem(9, 500, Operation::kAdd, TemplateVariant::kSpaced)), 9u);
  EXPECT_THROW(label_for(task, make_problem(10, 500, Operation::kAdd, TemplateVariant::kSpaced)),
               DataError);
  EXPECT_THROW(label_for(task, make_problem(1, 498, Operation::kAdd, TemplateVariant::kSpaced)),
               DataError);
}

TEST(OracleTest, SelfCheck) {
  EXPECT_EQ(oracle::add("999", "1"), "1000");
  EXPECT_EQ(oracle::sub("1000", "1"), "999");
  EXPECT_EQ(oracle::sub("5", "5"), "0");
  EXPECT_EQ(oracle::mul("0", "123"), "0");
  EXPECT_EQ(oracle::mul("99", "99"), "9801");
  EXPECT_EQ(oracle::carries("158", "242"), (std::vector<int>{1, 1, 0}));
}

}  // namespace
}  // namespace arith
