#include "arith/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "arith/binio.hpp"
#include "arith/errors.hpp"

namespace arith {
namespace {

using Json = nlohmann::ordered_json;

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!trim(line).empty()) lines.push_back(line);
  }
  return lines;
}

Json parse_line(const std::filesystem::path& path, const std::string& line, std::size_t n) {
  try {
    return Json::parse(line);
  } catch (const Json::exception& e) {
    throw DataError(path.string() + ":" + std::to_string(n) + ": " + e.what());
  }
}

// Accuracy-style seed column label.
std::string seed_column(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

std::string escape_xml(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                    "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};
constexpr double kWidth = 640;
constexpr double kHeight = 400;
constexpr double kLeft = 60;
constexpr double kRight = 160;
constexpr double kTop = 40;
constexpr double kBottom = 50;

struct Frame {
  double x_min = 0;
  double x_max = 1;
  double y_min = 0;
  double y_max = 1;

  double x(double v) const {
    const double span = x_max > x_min ? x_max - x_min : 1.0;
    return kLeft + (v - x_min) / span * (kWidth - kLeft - kRight);
  }
  double y(double v) const {
    const double span = y_max > y_min ? y_max - y_min : 1.0;
    return kHeight - kBottom - (v - y_min) / span * (kHeight - kTop - kBottom);
  }
};

std::string svg_open(std::string_view title) {
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
    << kHeight << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << kLeft << "\" y=\"22\" font-size=\"14\">" << escape_xml(title)
    << "</text>\n";
  return s.str();
}

std::string svg_axes(const Frame& f, std::string_view x_label, std::string_view y_label,
                     std::span<const std::uint32_t> x_ticks) {
  std::ostringstream s;
  const std::string x0 = fmt("%.2f", f.x(f.x_min));
  const std::string x1 = fmt("%.2f", f.x(f.x_max));
  const std::string y0 = fmt("%.2f", f.y(f.y_min));
  const std::string y1 = fmt("%.2f", f.y(f.y_max));
  s << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y1
    << "\" stroke=\"black\"/>\n";
  for (std::uint32_t t : x_ticks) {
    s << "<text x=\"" << fmt("%.2f", f.x(t)) << "\" y=\"" << fmt("%.2f", f.y(f.y_min) + 16)
      << "\" text-anchor=\"middle\">L" << t << "</text>\n";
  }
  for (int i = 0; i <= 4; ++i) {
    const double v = f.y_min + (f.y_max - f.y_min) * i / 4.0;
    s << "<text x=\"" << fmt("%.2f", kLeft - 6) << "\" y=\"" << fmt("%.2f", f.y(v) + 4)
      << "\" text-anchor=\"end\">" << fmt("%.2f", v) << "</text>\n";
  }
  s << "<text x=\"" << fmt("%.2f", (f.x(f.x_min) + f.x(f.x_max)) / 2) << "\" y=\""
    << fmt("%.2f", kHeight - 12) << "\" text-anchor=\"middle\">" << escape_xml(x_label)
    << "</text>\n";
  s << "<text x=\"16\" y=\"" << fmt("%.2f", (f.y(f.y_min) + f.y(f.y_max)) / 2)
    << "\" transform=\"rotate(-90 16 " << fmt("%.2f", (f.y(f.y_min) + f.y(f.y_max)) / 2)
    << ")\" text-anchor=\"middle\">" << escape_xml(y_label) << "</text>\n";
  return s.str();
}

std::vector<std::uint32_t> ticks_for(std::uint32_t lo, std::uint32_t hi) {
  const std::uint32_t step = std::max<std::uint32_t>(1, (hi - lo + 9) / 10);
  std::vector<std::uint32_t> t;
  for (std::uint32_t v = lo; v <= hi; v += step) t.push_back(v);
  return t;
}

ManifestEntry record(const std::filesystem::path& dir, const std::string& name,
                     const std::string& kind, const std::string& content) {
  write_text(dir / name, content);
  return {name, kind, content.size(), binio::fnv1a_hex(content)};
}

std::string exact_match_csv(const ExactMatchTable& t) {
  std::string out = "digits,n_samples,n_correct,accuracy\n";
  for (const auto& r : t.rows) {
    out += std::to_string(r.digits) + "," + std::to_string(r.n_samples) + "," +
           std::to_string(r.n_correct) + "," + format_fixed(r.accuracy) + "\n";
  }
  out += "overall," + std::to_string(t.n_samples) + "," + std::to_string(t.n_correct) + "," +
         format_fixed(t.overall) + "\n";
  return out;
}

std::string stages_csv(const StageReport& r) {
  std::string out = "family,rank,layer,source\n";
  for (const auto& e : r.entries) {
    out += e.family + "," + std::to_string(e.rank) + "," +
           (e.layer ? std::to_string(*e.layer) : std::string("none")) + "," + e.source + "\n";
  }
  out += "# ordering=";
  for (std::size_t i = 0; i < r.ordering.size(); ++i) {
    out += (i ? "<" : "") + r.ordering[i];
  }
  out += std::string(" monotone=") + (r.monotone ? "true" : "false") +
         " partial=" + (r.partial ? "true" : "false") + "\n";
  return out;
}

}  // namespace

std::string format_fixed(double value) {
  std::string s = fmt("%.6f", value);
  if (s == "-0.000000") s.erase(0, 1);
  return s;
}

// ---- exact match ------------------------------------------------------------

ExactMatchTable exact_match_eval(std::span<const AnswerRecord> records) {
  std::map<std::uint32_t, ExactMatchRow> rows;
  ExactMatchTable t;
  for (const auto& r : records) {
    ExactMatchRow& row = rows[r.digits];
    row.digits = r.digits;
    ++row.n_samples;
    ++t.n_samples;
    if (trim(r.answer) == trim(r.gold)) {
      ++row.n_correct;
      ++t.n_correct;
    }
  }
  for (auto& [digits, row] : rows) {
    row.accuracy = static_cast<double>(row.n_correct) / static_cast<double>(row.n_samples);
    t.rows.push_back(row);
  }
  if (t.n_samples > 0) {
    t.overall = static_cast<double>(t.n_correct) / static_cast<double>(t.n_samples);
  }
  return t;
}

ExactMatchTable exact_match_eval(std::span<const std::string> answers,
                                 std::span<const std::string> gold,
                                 std::span<const std::uint32_t> digits) {
  if (answers.size() != gold.size() || answers.size() != digits.size()) {
    throw DataError("answer, gold and digit-length lists differ in length (" +
                    std::to_string(answers.size()) + ", " + std::to_string(gold.size()) +
                    ", " + std::to_string(digits.size()) + ")");
  }
  std::vector<AnswerRecord> records;
  for (std::size_t i = 0; i < answers.size(); ++i) {
    records.push_back({digits[i], answers[i], gold[i]});
  }
  return exact_match_eval(records);
}

void write_answers(const std::filesystem::path& path, std::span<const AnswerRecord> records) {
  std::string out;
  for (const auto& r : records) {
    Json j;
    j["digits"] = r.digits;
    j["answer"] = r.answer;
    j["gold"] = r.gold;
    out += j.dump() + "\n";
  }
  write_text(path, out);
}

std::vector<AnswerRecord> read_answers(const std::filesystem::path& path) {
  std::vector<AnswerRecord> out;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const Json j = parse_line(path, lines[i], i + 1);
    try {
      out.push_back({j.at("digits").get<std::uint32_t>(), j.at("answer").get<std::string>(),
                     j.at("gold").get<std::string>()});
    } catch (const Json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return out;
}

// ---- stage ordering ---------------------------------------------------------

int stage_rank(std::string_view family) {
  if (family == "structure") return 0;
  if (family == "carry" || family == "sum") return 1;
  if (family == "digit") return 2;
  if (family == "output") return 3;
  return -1;
}

StageReport stage_ordering(std::span<const LayerCurve> curves,
                           const std::optional<LensHistogramSet>& lens) {
  StageReport report;
  for (std::string_view family : kStageFamilies) {
    StageEntry entry;
    entry.family = std::string(family);
    entry.rank = stage_rank(family);
    bool present = false;
    if (family == "output") {
      if (lens) {
        present = true;
        entry.layer = lens->modal_layer();
        entry.source = "lens-mode";
      }
    } else {
      for (const auto& c : curves) {
        if (c.family != family) continue;
        present = true;
        if (c.onset && (!entry.layer || *c.onset < *entry.layer)) {
          entry.layer = c.onset;
          entry.source = c.name;
        }
      }
    }
    if (!present || !entry.layer) {
      report.missing.push_back(entry.family);
    }
    if (present) report.entries.push_back(std::move(entry));
  }
  report.partial = !report.missing.empty();

  std::vector<const StageEntry*> placed;
  for (const auto& e : report.entries) {
    if (e.layer) placed.push_back(&e);
  }
  std::stable_sort(placed.begin(), placed.end(), [](const StageEntry* a, const StageEntry* b) {
    if (*a->layer != *b->layer) return *a->layer < *b->layer;
    return a->rank < b->rank;
  });
  for (const auto* e : placed) report.ordering.push_back(e->family);

  report.monotone = true;
  for (const auto& a : report.entries) {
    for (const auto& b : report.entries) {
      if (a.layer && b.layer && a.rank < b.rank && *a.layer > *b.layer) {
        report.monotone = false;
      }
    }
  }
  return report;
}

// ---- curve and histogram files ---------------------------------------------

std::string curve_slug(const LayerCurve& curve) {
  std::string s = curve.name;
  std::replace(s.begin(), s.end(), '/', '_');
  return s;
}

void write_curve_raw(const std::filesystem::path& path, const LayerCurve& curve) {
  std::string out;
  Json head;
  head["type"] = "curve";
  head["family"] = curve.family;
  head["name"] = curve.name;
  head["task"] = std::string(to_string(curve.task.kind));
  head["num_classes"] = curve.task.num_classes;
  head["position"] = curve.task.position ? Json(*curve.task.position) : Json(nullptr);
  head["range_base"] = curve.task.range_base ? Json(*curve.task.range_base) : Json(nullptr);
  head["chance"] = curve.chance;
  head["seeds"] = curve.seeds;
  out += head.dump() + "\n";
  for (const auto& p : curve.points) {
    if (p.error) {
      Json j;
      j["type"] = "error";
      j["layer"] = p.layer;
      j["error"] = *p.error;
      out += j.dump() + "\n";
      continue;
    }
    for (std::size_t s = 0; s < p.per_seed.size(); ++s) {
      Json j;
      j["type"] = "point";
      j["layer"] = p.layer;
      j["seed"] = curve.seeds.at(s);
      j["accuracy"] = p.per_seed[s];
      out += j.dump() + "\n";
    }
  }
  write_text(path, out);
}

LayerCurve read_curve_raw(const std::filesystem::path& path) {
  const auto lines = read_lines(path);
  if (lines.empty()) throw DataError(path.string() + ": empty curve file");
  LayerCurve curve;
  std::map<std::uint32_t, std::map<std::uint64_t, double>> values;
  std::map<std::uint32_t, std::string> errors;
  try {
    const Json head = parse_line(path, lines[0], 1);
    if (head.at("type") != "curve") throw DataError(path.string() + ": missing curve header");
    curve.family = head.at("family").get<std::string>();
    curve.name = head.at("name").get<std::string>();
    const auto kind = parse_task_kind(head.at("task").get<std::string>());
    if (!kind) throw DataError(path.string() + ": unknown task");
    curve.task.kind = *kind;
    curve.task.num_classes = head.at("num_classes").get<std::uint32_t>();
    if (!head.at("position").is_null()) curve.task.position = head["position"].get<std::uint32_t>();
    if (!head.at("range_base").is_null()) {
      curve.task.range_base = head["range_base"].get<std::uint64_t>();
    }
    curve.chance = head.at("chance").get<double>();
    curve.seeds = head.at("seeds").get<std::vector<std::uint64_t>>();
    for (std::size_t i = 1; i < lines.size(); ++i) {
      const Json j = parse_line(path, lines[i], i + 1);
      const auto layer = j.at("layer").get<std::uint32_t>();
      if (j.at("type") == "error") {
        errors[layer] = j.at("error").get<std::string>();
      } else {
        values[layer][j.at("seed").get<std::uint64_t>()] = j.at("accuracy").get<double>();
      }
    }
  } catch (const Json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  std::uint32_t n_layers = 0;
  if (!values.empty()) n_layers = std::max(n_layers, values.rbegin()->first + 1);
  if (!errors.empty()) n_layers = std::max(n_layers, errors.rbegin()->first + 1);
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    LayerPoint p;
    p.layer = l;
    if (auto e = errors.find(l); e != errors.end()) {
      p.error = e->second;
    } else {
      const auto& by_seed = values[l];
      for (std::uint64_t s : curve.seeds) {
        auto it = by_seed.find(s);
        if (it == by_seed.end()) {
          throw DataError(path.string() + ": layer " + std::to_string(l) + " lacks seed " +
                          std::to_string(s));
        }
        p.per_seed.push_back(it->second);
      }
      const MeanCi ci = mean_ci95(p.per_seed);
      p.mean = ci.mean;
      p.ci95 = ci.half_width;
    }
    curve.points.push_back(std::move(p));
  }
  curve.onset = onset_layer(curve);
  return curve;
}

std::vector<LayerCurve> read_curve_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw DataError("curve directory " + dir.string() + " does not exist");
  }
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".jsonl") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<LayerCurve> curves;
  for (const auto& f : files) {
    const auto first = read_lines(f);
    if (first.empty() || first[0].find("\"type\":\"curve\"") == std::string::npos) continue;
    curves.push_back(read_curve_raw(f));
  }
  return curves;
}

std::string curve_csv(const LayerCurve& curve) {
  std::string out = "layer,mean,ci";
  for (std::uint64_t s : curve.seeds) out += "," + seed_column(s);
  out += "\n";
  for (const auto& p : curve.points) {
    out += std::to_string(p.layer);
    if (p.error) {
      out += ",nan,nan";
      for (std::size_t s = 0; s < curve.seeds.size(); ++s) out += ",nan";
    } else {
      out += "," + format_fixed(p.mean) + "," + format_fixed(p.ci95);
      for (double v : p.per_seed) out += "," + format_fixed(v);
    }
    out += "\n";
  }
  return out;
}

void write_histogram_raw(const std::filesystem::path& path, const LensHistogramSet& set) {
  std::string out;
  for (std::size_t i = 0; i < set.runs.size(); ++i) {
    const auto& run = set.runs[i];
    Json j;
    j["run"] = set.run_labels.at(i);
    j["n_layer_states"] = run.n_layer_states;
    j["n_samples"] = run.n_samples;
    j["counts"] = run.counts;
    j["never"] = run.never;
    j["final_norm"] = run.final_norm_applied;
    out += j.dump() + "\n";
  }
  write_text(path, out);
}

LensHistogramSet read_histogram_raw(const std::filesystem::path& path) {
  LensHistogramSet set;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const Json j = parse_line(path, lines[i], i + 1);
    try {
      LensHistogram h;
      h.n_layer_states = j.at("n_layer_states").get<std::uint32_t>();
      h.n_samples = j.at("n_samples").get<std::size_t>();
      h.counts = j.at("counts").get<std::vector<std::size_t>>();
      h.never = j.at("never").get<std::size_t>();
      h.final_norm_applied = j.at("final_norm").get<bool>();
      if (h.counts.size() != h.n_layer_states) {
        throw DataError(path.string() + ":" + std::to_string(i + 1) +
                        ": histogram length does not match layer count");
      }
      if (!set.runs.empty() && h.n_layer_states != set.runs[0].n_layer_states) {
        throw DataError(path.string() + ": runs disagree on the number of layer states");
      }
      set.run_labels.push_back(j.at("run").get<std::string>());
      set.runs.push_back(std::move(h));
    } catch (const Json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(i + 1) + ": " + e.what());
    }
  }
  if (set.runs.empty()) throw DataError(path.string() + ": no histogram runs");
  return set;
}

std::string histogram_csv(const LensHistogramSet& set, std::span<const std::uint32_t> layers) {
  std::string out = "layer,mean";
  for (const auto& label : set.run_labels) out += ",run_" + label;
  out += "\n";
  const std::vector<double> mean = set.mean_counts();
  auto row = [&](const std::string& name, double m, auto&& count_of) {
    out += name + "," + format_fixed(m);
    for (const auto& run : set.runs) out += "," + std::to_string(count_of(run));
    out += "\n";
  };
  const std::uint32_t first = layers.empty() ? 0 : layers.front();
  for (std::uint32_t l : layers) {
    row(std::to_string(l), mean.at(l), [&](const LensHistogram& h) { return h.counts.at(l); });
  }
  auto earlier = [&](const LensHistogram& h) {
    std::size_t n = 0;
    for (std::uint32_t l = 0; l < first; ++l) n += h.counts[l];
    return n;
  };
  double earlier_mean = 0.0;
  for (std::uint32_t l = 0; l < first; ++l) earlier_mean += mean[l];
  row("earlier", earlier_mean, earlier);
  row("never", set.mean_never(), [](const LensHistogram& h) { return h.never; });
  return out;
}

// ---- artifacts --------------------------------------------------------------

std::string curves_svg(std::span<const LayerCurve> curves, std::string_view title) {
  Frame f;
  std::uint32_t max_layer = 1;
  for (const auto& c : curves) {
    if (!c.points.empty()) max_layer = std::max(max_layer, c.points.back().layer);
  }
  f.x_max = max_layer;
  std::string s = svg_open(title);
  s += svg_axes(f, "layer state", "probe accuracy", ticks_for(0, max_layer));
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& c = curves[i];
    const char* color = kPalette[i % std::size(kPalette)];
    s += "<line x1=\"" + fmt("%.2f", f.x(0)) + "\" y1=\"" + fmt("%.2f", f.y(c.chance)) +
         "\" x2=\"" + fmt("%.2f", f.x(max_layer)) + "\" y2=\"" + fmt("%.2f", f.y(c.chance)) +
         "\" stroke=\"" + color + "\" stroke-dasharray=\"5,4\" stroke-opacity=\"0.6\"/>\n";
    std::string pts;
    for (const auto& p : c.points) {
      if (p.error) continue;
      if (!pts.empty()) pts += " ";
      pts += fmt("%.2f", f.x(p.layer)) + "," + fmt("%.2f", f.y(p.mean));
    }
    s += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
         "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    const double ly = kTop + 16.0 * static_cast<double>(i);
    s += "<line x1=\"" + fmt("%.2f", kWidth - kRight + 10) + "\" y1=\"" + fmt("%.2f", ly) +
         "\" x2=\"" + fmt("%.2f", kWidth - kRight + 30) + "\" y2=\"" + fmt("%.2f", ly) +
         "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    s += "<text x=\"" + fmt("%.2f", kWidth - kRight + 34) + "\" y=\"" + fmt("%.2f", ly + 4) +
         "\">" + escape_xml(c.name) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

std::string histogram_svg(const LensHistogramSet& set, std::span<const std::uint32_t> layers) {
  const std::vector<double> mean = set.mean_counts();
  const double total = set.runs.empty() ? 1.0 : static_cast<double>(set.runs[0].n_samples);
  Frame f;
  f.x_min = layers.empty() ? 0 : layers.front() - 0.5;
  f.x_max = layers.empty() ? 1 : layers.back() + 0.5;
  double peak = 0.0;
  for (std::uint32_t l : layers) peak = std::max(peak, mean[l] / std::max(total, 1.0));
  f.y_max = peak > 0 ? std::min(1.0, std::ceil(peak * 10.0) / 10.0) : 1.0;
  std::string s = svg_open("earliest top-1 layer");
  s += svg_axes(f, "layer state", "fraction of samples",
                layers.empty() ? std::vector<std::uint32_t>{}
                               : ticks_for(layers.front(), layers.back()));
  const double bar = (f.x(1) - f.x(0)) * 0.8;
  for (std::uint32_t l : layers) {
    const double frac = mean[l] / std::max(total, 1.0);
    const double x = f.x(l) - bar / 2;
    s += "<rect x=\"" + fmt("%.2f", x) + "\" y=\"" + fmt("%.2f", f.y(frac)) + "\" width=\"" +
         fmt("%.2f", bar) + "\" height=\"" + fmt("%.2f", f.y(0) - f.y(frac)) +
         "\" fill=\"#1f77b4\"/>\n";
  }
  s += "<text x=\"" + fmt("%.2f", kWidth - kRight + 10) + "\" y=\"" + fmt("%.2f", kTop + 4) +
       "\">never: " + format_fixed(set.mean_never()) + "</text>\n";
  s += "</svg>\n";
  return s;
}

std::vector<ManifestEntry> emit_artifacts(const std::filesystem::path& out_dir,
                                          const ArtifactInputs& inputs) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw DataError("cannot create output directory " + out_dir.string());
  }
  std::vector<ManifestEntry> entries;

  std::string table = "family,curve,task,layer,mean,ci95,chance,n_seeds,per_seed\n";
  for (const auto& c : inputs.curves) {
    for (const auto& p : c.points) {
      table += c.family + "," + c.name + "," + std::string(to_string(c.task.kind)) + "," +
               std::to_string(p.layer) + ",";
      if (p.error) {
        table += "nan,nan," + format_fixed(c.chance) + ",0,\n";
        continue;
      }
      table += format_fixed(p.mean) + "," + format_fixed(p.ci95) + "," +
               format_fixed(c.chance) + "," + std::to_string(p.per_seed.size()) + ",";
      for (std::size_t s = 0; s < p.per_seed.size(); ++s) {
        table += (s ? ";" : "") + format_fixed(p.per_seed[s]);
      }
      table += "\n";
    }
  }
  if (!inputs.curves.empty()) entries.push_back(record(out_dir, "curves.csv", "csv", table));

  std::vector<std::string> families;
  for (const auto& c : inputs.curves) {
    if (std::find(families.begin(), families.end(), c.family) == families.end()) {
      families.push_back(c.family);
    }
  }
  for (const auto& family : families) {
    std::vector<LayerCurve> group;
    for (const auto& c : inputs.curves) {
      if (c.family == family) group.push_back(c);
    }
    entries.push_back(
        record(out_dir, "curves_" + family + ".svg", "svg", curves_svg(group, family)));
  }

  if (inputs.lens) {
    std::vector<std::uint32_t> layers = inputs.lens_layers;
    if (layers.empty()) layers = parse_layer_selection("all", inputs.lens->n_layer_states());
    entries.push_back(
        record(out_dir, "lens_hist.csv", "csv", histogram_csv(*inputs.lens, layers)));
    entries.push_back(
        record(out_dir, "lens_hist.svg", "svg", histogram_svg(*inputs.lens, layers)));
  }
  if (inputs.exact_match) {
    entries.push_back(
        record(out_dir, "exact_match.csv", "csv", exact_match_csv(*inputs.exact_match)));
  }
  if (inputs.stages) {
    entries.push_back(record(out_dir, "stages.csv", "csv", stages_csv(*inputs.stages)));
  }

  Json manifest;
  for (const auto& [k, v] : inputs.manifest_fields) manifest[k] = v;
  Json files = Json::array();
  for (const auto& e : entries) {
    Json f;
    f["file"] = e.file;
    f["kind"] = e.kind;
    f["bytes"] = e.bytes;
    f["fnv1a64"] = e.fnv1a64;
    files.push_back(f);
  }
  manifest["files"] = files;
  write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return entries;
}

}  // namespace arith
