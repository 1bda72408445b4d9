#pragma once

#include "saeprobe/dataset.hpp"
#include "saeprobe/sae.hpp"

#include <filesystem>
#include <string>
#include <string_view>

// Views of a sparse code used to separate where information lives: which
// latents fire (position) versus how strongly (magnitude).
namespace saeprobe::features {

enum class FeatureKind { full = 0, position = 1, magnitude = 2 };

std::string_view to_string(FeatureKind kind);
FeatureKind parse_feature_kind(std::string_view text);

struct SparseActivation {
  Eigen::VectorXf z;
  std::size_t k = 0;

  // Throws InvariantError when z has more than k nonzeros or a negative entry.
  void validate() const;
};

// 1 where z is nonzero, 0 elsewhere; width d_z.
Eigen::VectorXf position_view(const SparseActivation& a);

// Nonzero values of z sorted descending, zero-padded to width k.
Eigen::VectorXf magnitude_view(const SparseActivation& a);

std::size_t feature_width(const sae::SaeModel& model, FeatureKind kind);

// One row per input row; widths d_z (full, position) or k (magnitude).
RowMatrixF batch_features(const sae::SaeModel& model, const RowMatrixF& rows, FeatureKind kind);
RowMatrixF batch_features(const sae::SaeModel& model, const data::EmbeddingDataset& dataset, FeatureKind kind);

// Applies a view to precomputed dense codes.
RowMatrixF views_from_codes(const RowMatrixF& codes, std::size_t k, FeatureKind kind);

struct FeatureMeta {
  std::string source_id;
  std::string checkpoint;
  FeatureKind kind = FeatureKind::full;
};

// Writes the matrix in the vectors format plus "<path>.meta.json" carrying
// source_id, checkpoint and kind.
void write_features(const RowMatrixF& features, const FeatureMeta& meta, const std::filesystem::path& path);
FeatureMeta read_feature_meta(const std::filesystem::path& path);

}  // namespace saeprobe::features
