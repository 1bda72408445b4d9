#include "saeprobe/dataset.hpp"

#include "binio.hpp"
#include "saeprobe/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace saeprobe::data {
namespace {

constexpr char kVectorsMagic[4] = {'S', 'P', 'R', 'B'};
constexpr char kFramesMagic[4] = {'S', 'P', 'R', 'F'};
constexpr std::uint16_t kVersion = 1;

std::ofstream open_out(const std::filesystem::path& path, std::ios::openmode mode) {
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  return out;
}

void write_matrix_file(const RowMatrixF& m, const char (&magic)[4],
                       const std::filesystem::path& path) {
  auto out = open_out(path, std::ios::binary);
  out.write(magic, 4);
  detail::put_u16(out, kVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
  detail::put_f32(out, std::span<const float>(m.data(), static_cast<std::size_t>(m.size())));
  if (!out) throw IoError("write failed: " + path.string());
}

RowMatrixF read_matrix_file(const char (&magic)[4], const std::filesystem::path& path, bool allow_empty) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  const std::string what = path.string();
  char got[4];
  if (!detail::get_bytes(in, got, 4) || !std::equal(got, got + 4, magic))
    throw BadMagicError(what + ": expected magic " + std::string(magic, 4));
  const auto version = detail::get_u16(in, what);
  if (version != kVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const auto rows = detail::get_u32(in, what);
  const auto cols = detail::get_u32(in, what);
  if (cols == 0) throw FormatError(what + ": dim must be positive");
  if (rows == 0 && !allow_empty) throw FormatError(what + ": zero rows");
  RowMatrixF m(rows, cols);
  if (!detail::get_f32(in, std::span<float>(m.data(), static_cast<std::size_t>(m.size()))))
    throw PayloadLengthError(what + ": payload shorter than header n*dim=" +
                             std::to_string(std::uint64_t{rows} * cols));
  if (!detail::at_eof(in))
    throw PayloadLengthError(what + ": payload longer than header n*dim=" +
                             std::to_string(std::uint64_t{rows} * cols));
  return m;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

std::uint8_t parse_label(const std::string& text, const std::string& where) {
  if (text == "0") return 0;
  if (text == "1") return 1;
  throw FormatError(where + ": label must be 0 or 1, got '" + text + "'");
}

}  // namespace

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train_sae: return "train_sae";
    case Split::train_probe: return "train_probe";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view tag) {
  for (auto s : kAllSplits)
    if (to_string(s) == tag) return s;
  throw UnknownSplitError("unknown split tag '" + std::string(tag) + "'");
}

std::vector<std::size_t> EmbeddingDataset::rows_in(Split split) const {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < splits.size(); ++i)
    if (splits[i] == split) rows.push_back(i);
  return rows;
}

std::size_t EmbeddingDataset::count(Split split) const {
  return static_cast<std::size_t>(std::count(splits.begin(), splits.end(), split));
}

RowMatrixF EmbeddingDataset::gather(std::span<const std::size_t> rows) const {
  RowMatrixF out(static_cast<Eigen::Index>(rows.size()), vectors.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = vectors.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

std::vector<std::uint8_t> EmbeddingDataset::gather_labels(std::span<const std::size_t> rows) const {
  std::vector<std::uint8_t> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(labels[r]);
  return out;
}

void EmbeddingDataset::validate() const {
  if (vectors.cols() <= 0) throw InvariantError("dataset dim must be positive");
  if (labels.size() != size() || splits.size() != size())
    throw LabelCountError("labels/splits length " + std::to_string(labels.size()) +
                          " does not match " + std::to_string(size()) + " vectors");
  if (!vectors.allFinite()) throw InvariantError("dataset contains non-finite entries");
  std::array<std::array<std::size_t, 2>, 4> per_split{};
  for (std::size_t i = 0; i < size(); ++i) {
    if (labels[i] > 1) throw InvariantError("label at row " + std::to_string(i) + " not in {0,1}");
    ++per_split[static_cast<std::size_t>(splits[i])][labels[i]];
  }
  for (auto s : kAllSplits) {
    const auto& c = per_split[static_cast<std::size_t>(s)];
    if ((c[0] + c[1]) > 0 && (c[0] == 0 || c[1] == 0))
      throw InvariantError("split '" + std::string(to_string(s)) + "' contains a single class");
  }
}

bool EmbeddingDataset::operator==(const EmbeddingDataset& other) const {
  if (vectors.rows() != other.vectors.rows() || vectors.cols() != other.vectors.cols()) return false;
  for (Eigen::Index i = 0; i < vectors.size(); ++i)
    if (std::bit_cast<std::uint32_t>(vectors.data()[i]) !=
        std::bit_cast<std::uint32_t>(other.vectors.data()[i]))
      return false;
  return labels == other.labels && splits == other.splits && source_id == other.source_id;
}

Eigen::VectorXf mean_pool(const FrameMatrix& frames) {
  const auto t = frames.frames.rows();
  if (t == 0) throw UsageError("mean_pool: empty frame matrix (T = 0)");
  Eigen::VectorXd acc = frames.frames.cast<double>().colwise().sum().transpose();
  return (acc / static_cast<double>(t)).cast<float>();
}

RowMatrixF read_vectors(const std::filesystem::path& path) {
  return read_matrix_file(kVectorsMagic, path, true);
}

void write_vectors(const RowMatrixF& vectors, const std::filesystem::path& path) {
  write_matrix_file(vectors, kVectorsMagic, path);
}

FrameMatrix read_frames(const std::filesystem::path& path) {
  return FrameMatrix{read_matrix_file(kFramesMagic, path, false)};
}

void write_frames(const FrameMatrix& frames, const std::filesystem::path& path) {
  if (frames.frames.rows() == 0) throw UsageError("frame matrix has no frames: " + path.string());
  write_matrix_file(frames.frames, kFramesMagic, path);
}

std::vector<LabelRow> read_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  std::string line;
  if (!std::getline(in, line) || split_csv_line(line) != std::vector<std::string>{"index", "label", "split"})
    throw FormatError(path.string() + ": expected header 'index,label,split'");
  std::vector<std::optional<LabelRow>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto where = path.string() + ":" + std::to_string(line_no);
    const auto f = split_csv_line(line);
    if (f.size() != 3) throw FormatError(where + ": expected 3 fields");
    std::size_t index = 0;
    const auto res = std::from_chars(f[0].data(), f[0].data() + f[0].size(), index);
    if (res.ec != std::errc{} || res.ptr != f[0].data() + f[0].size())
      throw FormatError(where + ": bad index '" + f[0] + "'");
    const LabelRow row{parse_label(f[1], where), parse_split(f[2])};
    if (index >= rows.size()) rows.resize(index + 1);
    if (rows[index]) throw FormatError(where + ": duplicate index " + f[0]);
    rows[index] = row;
  }
  std::vector<LabelRow> out;
  out.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i]) throw FormatError(path.string() + ": missing index " + std::to_string(i));
    out.push_back(*rows[i]);
  }
  return out;
}

void write_labels(std::span<const std::uint8_t> labels, std::span<const Split> splits,
                  const std::filesystem::path& path) {
  if (labels.size() != splits.size()) throw UsageError("write_labels: length mismatch");
  auto out = open_out(path, std::ios::binary);
  out << "index,label,split\n";
  for (std::size_t i = 0; i < labels.size(); ++i)
    out << i << ',' << static_cast<int>(labels[i]) << ',' << to_string(splits[i]) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::filesystem::path meta_path(const std::filesystem::path& vectors_path) {
  auto p = vectors_path;
  p += ".meta.json";
  return p;
}

EmbeddingDataset read_dataset(const std::filesystem::path& path, const std::filesystem::path& labels_path) {
  EmbeddingDataset ds;
  ds.vectors = read_vectors(path);
  const auto rows = read_labels(labels_path);
  if (rows.size() != ds.size())
    throw LabelCountError(labels_path.string() + ": " + std::to_string(rows.size()) +
                          " label rows for " + std::to_string(ds.size()) + " vectors");
  ds.labels.reserve(rows.size());
  ds.splits.reserve(rows.size());
  for (const auto& r : rows) {
    ds.labels.push_back(r.label);
    ds.splits.push_back(r.split);
  }
  ds.source_id = path.stem().string();
  if (const auto mp = meta_path(path); std::filesystem::exists(mp)) {
    std::ifstream in(mp);
    try {
      const auto meta = nlohmann::json::parse(in);
      if (meta.contains("source_id")) ds.source_id = meta.at("source_id").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(mp.string() + ": " + e.what());
    }
  }
  ds.validate();
  return ds;
}

void write_dataset(const EmbeddingDataset& dataset, const std::filesystem::path& path,
                   const std::filesystem::path& labels_path) {
  dataset.validate();
  write_vectors(dataset.vectors, path);
  write_labels(dataset.labels, dataset.splits, labels_path);
  auto out = open_out(meta_path(path), std::ios::binary);
  out << nlohmann::json{{"source_id", dataset.source_id}}.dump(2) << '\n';
}

EmbeddingDataset split_validation(const EmbeddingDataset& dataset, std::uint64_t seed) {
  auto rows = dataset.rows_in(Split::validation);
  if (rows.empty()) throw UsageError("split_validation: dataset has no validation rows");
  std::mt19937_64 rng(seed);
  std::shuffle(rows.begin(), rows.end(), rng);
  EmbeddingDataset out = dataset;
  for (std::size_t i = rows.size() / 2; i < rows.size(); ++i) out.splits[rows[i]] = Split::train_probe;
  return out;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty manifest");
  const auto header = split_csv_line(line);
  const bool with_split = header == std::vector<std::string>{"file", "label", "split"};
  if (!with_split && header != std::vector<std::string>{"file", "label"})
    throw FormatError(path.string() + ": expected header 'file,label' or 'file,label,split'");
  const auto base = path.parent_path();
  std::vector<ManifestEntry> entries;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto where = path.string() + ":" + std::to_string(line_no);
    const auto f = split_csv_line(line);
    if (f.size() != header.size()) throw FormatError(where + ": wrong field count");
    ManifestEntry e;
    e.file = f[0];
    if (e.file.is_relative()) e.file = base / e.file;
    e.label = parse_label(f[1], where);
    if (with_split) e.split = parse_split(f[2]);
    entries.push_back(std::move(e));
  }
  return entries;
}

EmbeddingDataset pool_manifest(const std::filesystem::path& manifest_path, Split default_split,
                               std::string source_id) {
  const auto entries = read_manifest(manifest_path);
  EmbeddingDataset ds;
  ds.source_id = std::move(source_id);
  std::vector<Eigen::VectorXf> pooled;
  pooled.reserve(entries.size());
  for (const auto& e : entries) {
    const auto frames = read_frames(e.file);
    if (!pooled.empty() && frames.frames.cols() != pooled.front().size())
      throw FormatError(e.file.string() + ": dim " + std::to_string(frames.frames.cols()) +
                        " differs from first file's " + std::to_string(pooled.front().size()));
    pooled.push_back(mean_pool(frames));
    ds.labels.push_back(e.label);
    ds.splits.push_back(e.split.value_or(default_split));
  }
  if (pooled.empty()) throw FormatError(manifest_path.string() + ": manifest lists no files");
  ds.vectors.resize(static_cast<Eigen::Index>(pooled.size()), pooled.front().size());
  for (std::size_t i = 0; i < pooled.size(); ++i)
    ds.vectors.row(static_cast<Eigen::Index>(i)) = pooled[i].transpose();
  ds.validate();
  return ds;
}

}  // namespace saeprobe::data
