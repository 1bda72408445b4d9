#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace saeprobe {

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace saeprobe

namespace saeprobe::data {

enum class Split : std::uint8_t { train_sae = 0, train_probe = 1, validation = 2, test = 3 };

inline constexpr std::array<Split, 4> kAllSplits = {Split::train_sae, Split::train_probe,
                                                    Split::validation, Split::test};

std::string_view to_string(Split split);
// Throws UnknownSplitError.
Split parse_split(std::string_view tag);

struct EmbeddingDataset {
  RowMatrixF vectors;  // n x dim
  std::vector<std::uint8_t> labels;
  std::vector<Split> splits;
  std::string source_id = "unknown";

  std::size_t size() const { return static_cast<std::size_t>(vectors.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(vectors.cols()); }

  std::vector<std::size_t> rows_in(Split split) const;
  std::size_t count(Split split) const;

  // Gathers the listed rows into a new matrix, preserving order.
  RowMatrixF gather(std::span<const std::size_t> rows) const;
  std::vector<std::uint8_t> gather_labels(std::span<const std::size_t> rows) const;

  // Throws InvariantError on non-finite entries, bad labels, or a non-empty
  // split missing one of the two classes.
  void validate() const;

  // Exact comparison: shapes, float bits, labels, splits and source_id.
  bool operator==(const EmbeddingDataset& other) const;
};

struct FrameMatrix {
  RowMatrixF frames;  // T x dim
};

// Per-column time average. Throws UsageError when T == 0.
Eigen::VectorXf mean_pool(const FrameMatrix& frames);

// Binary vectors file: "SPRB", u16 version, u32 n, u32 dim, float32 LE payload.
RowMatrixF read_vectors(const std::filesystem::path& path);
void write_vectors(const RowMatrixF& vectors, const std::filesystem::path& path);

// Frame file: "SPRF", u16 version, u32 T, u32 dim, float32 LE payload.
FrameMatrix read_frames(const std::filesystem::path& path);
void write_frames(const FrameMatrix& frames, const std::filesystem::path& path);

struct LabelRow {
  std::uint8_t label;
  Split split;
};

// CSV "index,label,split"; result is indexed by row.
std::vector<LabelRow> read_labels(const std::filesystem::path& path);
void write_labels(std::span<const std::uint8_t> labels, std::span<const Split> splits,
                  const std::filesystem::path& path);

// Optional JSON sidecar "<vectors>.meta.json" carrying source_id and any
// producer-specific keys.
std::filesystem::path meta_path(const std::filesystem::path& vectors_path);

EmbeddingDataset read_dataset(const std::filesystem::path& path,
                              const std::filesystem::path& labels_path);
void write_dataset(const EmbeddingDataset& dataset, const std::filesystem::path& path,
                   const std::filesystem::path& labels_path);

// Halves the validation rows: a seeded shuffle keeps floor(n/2) of them as
// `validation` (the SAE loss monitor) and moves the rest to `train_probe`.
EmbeddingDataset split_validation(const EmbeddingDataset& dataset, std::uint64_t seed);

struct ManifestEntry {
  std::filesystem::path file;
  std::uint8_t label;
  std::optional<Split> split;
};

// CSV "file,label" or "file,label,split"; relative paths resolve against the
// manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

// Pools every frame file of a manifest into one dataset.
EmbeddingDataset pool_manifest(const std::filesystem::path& manifest_path, Split default_split,
                               std::string source_id);

}  // namespace saeprobe::data
