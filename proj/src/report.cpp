#include "saeprobe/error.hpp"
#include "saeprobe/experiment.hpp"
#include "saeprobe/numfmt.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

namespace saeprobe::experiment {
namespace {

constexpr const char* kCellsHeader =
    "source_id,q,d_z,s,k,feature_kind,macro_f1,delta_f1,sae_final_loss,dead_latent_fraction";

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double field_double(const std::string& text) {
  const auto v = parse_double(text);
  if (!v) throw FormatError("cells csv: bad number '" + text + "'");
  return *v;
}

std::size_t field_size(const std::string& text) {
  std::size_t v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size())
    throw FormatError("cells csv: bad integer '" + text + "'");
  return v;
}

}  // namespace

std::string cells_csv(const SweepReport& input) {
  SweepReport report = input;
  report.sort();
  std::string out = std::string(kCellsHeader) + "\n";
  for (const auto& c : report.cells) {
    out += report.source_id + ',' + std::to_string(c.q) + ',' + std::to_string(c.d_z) + ',' + format_double(c.s) + ',' +
           std::to_string(c.k) + ',' + std::string(features::to_string(c.feature_kind)) + ',' +
           format_double(c.macro_f1) + ',' + format_double(c.delta_f1) + ',' + format_double(c.sae_final_loss) + ',' +
           format_double(c.dead_latent_fraction) + '\n';
  }
  return out;
}

std::string density_csv(const SweepReport& input) {
  SweepReport report = input;
  report.sort();
  std::size_t groups = 16;
  if (!report.density.empty()) groups = report.density.front().bins.size();
  std::string out = "source_id,q,d_z,s,k";
  for (std::size_t g = 0; g < groups; ++g) out += ",g" + std::to_string(g);
  out += '\n';
  for (const auto& d : report.density) {
    out += report.source_id + ',' + std::to_string(d.q) + ',' + std::to_string(d.d_z) + ',' + format_double(d.s) + ',' +
           std::to_string(d.k);
    for (double b : d.bins) out += ',' + format_double(b);
    out += '\n';
  }
  return out;
}

std::vector<Cell> parse_cells_csv(const std::string& text) {
  std::stringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCellsHeader) throw FormatError("cells csv: unexpected header");
  std::vector<Cell> cells;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 10) throw FormatError("cells csv: expected 10 fields, got " + std::to_string(f.size()));
    Cell c;
    c.q = field_size(f[1]);
    c.d_z = field_size(f[2]);
    c.s = field_double(f[3]);
    c.k = field_size(f[4]);
    c.feature_kind = features::parse_feature_kind(f[5]);
    c.macro_f1 = field_double(f[6]);
    c.delta_f1 = field_double(f[7]);
    c.sae_final_loss = field_double(f[8]);
    c.dead_latent_fraction = field_double(f[9]);
    cells.push_back(c);
  }
  return cells;
}

std::vector<std::filesystem::path> emit_report(const SweepReport& report, ReportFormat format,
                                               const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  if (format == ReportFormat::csv) {
    write_text(out_dir / "cells.csv", cells_csv(report));
    write_text(out_dir / "density.csv", density_csv(report));
    written = {out_dir / "cells.csv", out_dir / "density.csv"};
  } else {
    write_text(out_dir / "report.json", report_json(report));
    written = {out_dir / "report.json"};
  }
  return written;
}

std::string render_summary(const SweepReport& input) {
  SweepReport report = input;
  report.sort();
  std::ostringstream out;
  out << "# " << report.source_id << "\n\n";
  out << "Reference macro-F1 (%): " << format_percent(report.reference_f1) << "\n";

  std::vector<double> sparsities;
  std::vector<std::size_t> ratios;
  for (const auto& c : report.cells) {
    if (std::find(sparsities.begin(), sparsities.end(), c.s) == sparsities.end()) sparsities.push_back(c.s);
    if (std::find(ratios.begin(), ratios.end(), c.q) == ratios.end()) ratios.push_back(c.q);
  }
  std::sort(sparsities.begin(), sparsities.end(), std::greater<>());
  std::sort(ratios.begin(), ratios.end());

  for (auto kind : {features::FeatureKind::full, features::FeatureKind::position, features::FeatureKind::magnitude}) {
    std::map<std::pair<std::size_t, double>, double> delta;
    for (const auto& c : report.cells)
      if (c.feature_kind == kind) delta[{c.q, c.s}] = c.delta_f1;
    if (delta.empty()) continue;
    out << "\n## Delta F1 (%), " << features::to_string(kind) << " features\n\n| q |";
    for (double s : sparsities) out << " s=" << format_percent(s) << "% |";
    out << "\n|---|";
    for (std::size_t i = 0; i < sparsities.size(); ++i) out << "---|";
    out << '\n';
    for (auto q : ratios) {
      out << "| " << q << " |";
      for (double s : sparsities) {
        const auto it = delta.find({q, s});
        out << ' ' << (it == delta.end() ? std::string("-") : format_percent(it->second)) << " |";
      }
      out << '\n';
    }
  }
  if (!report.failures.empty()) {
    out << "\n## Failed cells\n\n";
    for (const auto& f : report.failures)
      out << "- q=" << f.q << " s=" << format_double(f.s) << ": " << f.message << '\n';
  }
  return out.str();
}

}  // namespace saeprobe::experiment
