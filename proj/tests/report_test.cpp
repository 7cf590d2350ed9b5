#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "arith/binio.hpp"
#include "arith/errors.hpp"
#include "arith/report.hpp"
#include "json.hpp"

namespace arith {
namespace {

namespace fs = std::filesystem;

fs::path TempDir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("arith_report_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string Slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

LayerCurve MakeCurve(const std::string& family, TaskKind kind, std::vector<std::vector<double>> acc,
                     std::optional<std::uint32_t> position = kOnes) {
  LayerCurve c;
  c.task = TaskLabelSpec::make(kind, position);
  c.family = family;
  c.name = curve_name(c.task);
  c.chance = 1.0 / c.task.num_classes;
  for (std::size_t s = 0; s < acc.front().size(); ++s) c.seeds.push_back(42 + s);
  for (std::size_t l = 0; l < acc.size(); ++l) {
    LayerPoint p;
    p.layer = static_cast<std::uint32_t>(l);
    p.per_seed = acc[l];
    const MeanCi ci = mean_ci95(p.per_seed);
    p.mean = ci.mean;
    p.ci95 = ci.half_width;
    c.points.push_back(p);
  }
  c.onset = onset_layer(c);
  return c;
}

TEST(ExactMatchTest, GroupsByDigitsAndTrims) {
  const std::vector<AnswerRecord> recs = {
      {1, "4", "4"}, {1, " 5\n", "5"}, {2, "40", "41"}, {2, "99", "99"}, {3, "", "100"}};
  const ExactMatchTable t = exact_match_eval(recs);
  ASSERT_EQ(t.rows.size(), 3u);
  EXPECT_EQ(t.rows[0].n_correct, 2u);
  EXPECT_DOUBLE_EQ(t.rows[1].accuracy, 0.5);
  EXPECT_EQ(t.rows[2].n_correct, 0u);
  EXPECT_DOUBLE_EQ(t.overall, 0.6);

  const std::vector<std::string> a = {"1"}, g = {"1", "2"};
  const std::vector<std::uint32_t> d = {1};
  EXPECT_THROW(exact_match_eval(a, g, d), DataError);
}

TEST(ExactMatchTest, AnswersFileRoundTrip) {
  const fs::path dir = TempDir("answers");
  const std::vector<AnswerRecord> recs = {{2, "12", "12"}, {3, "q\"x", "100"}};
  write_answers(dir / "a.jsonl", recs);
  const auto back = read_answers(dir / "a.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].answer, "q\"x");
  EXPECT_EQ(back[1].digits, 3u);
  EXPECT_THROW(read_answers(dir / "missing.jsonl"), DataError);
}

TEST(StageTest, MonotoneOrdering) {
  const std::vector<LayerCurve> curves = {
      MakeCurve("structure", TaskKind::kStructure3, {{0.3}, {0.99}, {1.0}, {1.0}}, std::nullopt),
      MakeCurve("carry", TaskKind::kCarryPos, {{0.5}, {0.5}, {0.99}, {1.0}}),
      MakeCurve("digit", TaskKind::kDigitPos, {{0.1}, {0.1}, {0.2}, {0.95}}),
  };
  LensHistogramSet lens;
  lens.runs = {{4, 10, {0, 0, 0, 10}, 0, false}};
  lens.run_labels = {"42"};
  const StageReport r = stage_ordering(curves, lens);
  EXPECT_EQ(r.ordering, (std::vector<std::string>{"structure", "carry", "digit", "output"}));
  EXPECT_TRUE(r.monotone);
  EXPECT_TRUE(r.partial);  // no sum curve
  EXPECT_EQ(r.missing, (std::vector<std::string>{"sum"}));
}

TEST(StageTest, DetectsInversionAndTakesEarliestOnset) {
  const std::vector<LayerCurve> curves = {
      MakeCurve("carry", TaskKind::kCarryPos, {{0.5}, {0.5}, {0.5}, {0.99}}),
      MakeCurve("carry", TaskKind::kCarryPos, {{0.5}, {0.99}, {1.0}, {1.0}}, kTens),
      MakeCurve("digit", TaskKind::kDigitPos, {{0.95}, {0.96}, {0.96}, {0.97}}),
  };
  const StageReport r = stage_ordering(curves, std::nullopt);
  ASSERT_EQ(r.entries.size(), 2u);
  EXPECT_EQ(r.entries[0].layer, 1u);
  EXPECT_EQ(r.entries[0].source, "carry_pos/tens");
  EXPECT_FALSE(r.monotone);
  EXPECT_EQ(r.ordering, (std::vector<std::string>{"digit", "carry"}));
}

TEST(CurveFileTest, RawRoundTripRebuildsIdenticalCurve) {
  const fs::path dir = TempDir("curve");
  LayerCurve c = MakeCurve("digit", TaskKind::kDigitPos,
                           {{0.1, 0.12, 0.11}, {0.5, 0.7, 0.61}, {0.93, 0.97, 0.951}});
  c.points[0].error = "layer failed";
  c.points[0].per_seed.clear();
  c.points[0].mean = 0.0;
  c.points[0].ci95 = 0.0;
  write_curve_raw(dir / "c.jsonl", c);
  const LayerCurve back = read_curve_raw(dir / "c.jsonl");
  EXPECT_EQ(back.name, c.name);
  EXPECT_EQ(back.family, c.family);
  EXPECT_EQ(back.task, c.task);
  EXPECT_EQ(back.seeds, c.seeds);
  EXPECT_EQ(back.onset, c.onset);
  ASSERT_EQ(back.points.size(), 3u);
  EXPECT_EQ(back.points[0].error, "layer failed");
  for (std::size_t l = 1; l < 3; ++l) {
    EXPECT_EQ(back.points[l].per_seed, c.points[l].per_seed);
    EXPECT_EQ(back.points[l].mean, c.points[l].mean);
    EXPECT_EQ(back.points[l].ci95, c.points[l].ci95);
  }
  EXPECT_EQ(curve_csv(back), curve_csv(c));
  const auto all = read_curve_dir(dir);
  ASSERT_EQ(all.size(), 1u);
}

TEST(CurveFileTest, CsvLayout) {
  const LayerCurve c = MakeCurve("carry", TaskKind::kCarryPos, {{0.5, 0.25}, {1.0, 1.0}});
  EXPECT_EQ(curve_csv(c),
            "layer,mean,ci,seed_42,seed_43\n"
            "0,0.375000," + format_fixed(mean_ci95(c.points[0].per_seed).half_width) +
                ",0.500000,0.250000\n"
            "1,1.000000,0.000000,1.000000,1.000000\n");
  EXPECT_EQ(curve_slug(c), "carry_pos_ones");
}

TEST(HistogramFileTest, RoundTripAndCsv) {
  const fs::path dir = TempDir("hist");
  LensHistogramSet set;
  set.runs = {{4, 6, {1, 2, 3, 0}, 0, true}, {4, 6, {0, 1, 4, 0}, 1, true}};
  set.run_labels = {"42", "43"};
  write_histogram_raw(dir / "h.jsonl", set);
  const LensHistogramSet back = read_histogram_raw(dir / "h.jsonl");
  EXPECT_EQ(back.run_labels, set.run_labels);
  EXPECT_EQ(back.runs[1].counts, set.runs[1].counts);
  EXPECT_EQ(back.runs[1].never, 1u);
  EXPECT_TRUE(back.runs[0].final_norm_applied);
  const std::uint32_t layers[] = {2, 3};
  EXPECT_EQ(histogram_csv(set, layers),
            "layer,mean,run_42,run_43\n"
            "2,3.500000,3,4\n"
            "3,0.000000,0,0\n"
            "earlier,2.000000,3,1\n"
            "never,0.500000,0,1\n");
}

TEST(ArtifactTest, OutputsAreDeterministicAndListedInManifest) {
  ArtifactInputs in;
  in.curves = {MakeCurve("carry", TaskKind::kCarryPos, {{0.5, 0.55}, {0.9, 0.99}})};
  in.lens = LensHistogramSet{{"42"}, {{2, 5, {1, 3}, 1, false}}};
  in.exact_match = exact_match_eval(std::vector<AnswerRecord>{{2, "1", "1"}});
  in.stages = stage_ordering(in.curves, in.lens);
  in.manifest_fields = {{"experiment", "carry"}};
  const fs::path a = TempDir("art_a"), b = TempDir("art_b");
  const auto entries = emit_artifacts(a, in);
  emit_artifacts(b, in);
  for (const auto& e : entries) {
    const std::string bytes = Slurp(a / e.file);
    EXPECT_EQ(bytes, Slurp(b / e.file)) << e.file;
    EXPECT_EQ(bytes.size(), e.bytes);
    EXPECT_EQ(binio::fnv1a_hex(bytes), e.fnv1a64);
  }
  EXPECT_EQ(Slurp(a / "manifest.json"), Slurp(b / "manifest.json"));
  const auto manifest = nlohmann::json::parse(Slurp(a / "manifest.json"));
  EXPECT_EQ(manifest["experiment"], "carry");
  EXPECT_EQ(manifest["files"].size(), entries.size());
  for (const char* f : {"curves.csv", "curves_carry.svg", "lens_hist.csv", "lens_hist.svg",
                        "exact_match.csv", "stages.csv"}) {
    EXPECT_TRUE(fs::exists(a / f)) << f;
  }
  EXPECT_NE(Slurp(a / "curves_carry.svg").find("<svg"), std::string::npos);
}

TEST(ArtifactTest, FormatFixedFoldsNegativeZero) {
  EXPECT_EQ(format_fixed(-0.0), "0.000000");
  EXPECT_EQ(format_fixed(0.1234567), "0.123457");
  EXPECT_EQ(format_fixed(-1e-9), "0.000000");
  EXPECT_EQ(format_fixed(-0.5), "-0.500000");
}

}  // namespace
}  // namespace arith
