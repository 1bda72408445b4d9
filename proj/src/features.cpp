#include "saeprobe/features.hpp"

#include "saeprobe/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <functional>

namespace saeprobe::features {

std::string_view to_string(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::full: return "full";
    case FeatureKind::position: return "position";
    case FeatureKind::magnitude: return "magnitude";
  }
  return "?";
}

FeatureKind parse_feature_kind(std::string_view text) {
  for (auto k : {FeatureKind::full, FeatureKind::position, FeatureKind::magnitude})
    if (to_string(k) == text) return k;
  throw UsageError("unknown feature kind '" + std::string(text) + "' (expected full, position or magnitude)");
}

void SparseActivation::validate() const {
  const auto nnz = static_cast<std::size_t>((z.array() != 0.0f).count());
  if (nnz > k) throw InvariantError("sparse activation has " + std::to_string(nnz) + " nonzeros, k=" + std::to_string(k));
  if ((z.array() < 0.0f).any()) throw InvariantError("sparse activation has a negative entry");
}

Eigen::VectorXf position_view(const SparseActivation& a) {
  a.validate();
  return (a.z.array() != 0.0f).cast<float>().matrix();
}

Eigen::VectorXf magnitude_view(const SparseActivation& a) {
  a.validate();
  std::vector<float> values;
  for (Eigen::Index j = 0; j < a.z.size(); ++j)
    if (a.z(j) != 0.0f) values.push_back(a.z(j));
  std::sort(values.begin(), values.end(), std::greater<>());
  Eigen::VectorXf out = Eigen::VectorXf::Zero(static_cast<Eigen::Index>(a.k));
  for (std::size_t i = 0; i < values.size(); ++i) out(static_cast<Eigen::Index>(i)) = values[i];
  return out;
}

std::size_t feature_width(const sae::SaeModel& model, FeatureKind kind) {
  return kind == FeatureKind::magnitude ? model.k : model.d_z();
}

RowMatrixF views_from_codes(const RowMatrixF& codes, std::size_t k, FeatureKind kind) {
  switch (kind) {
    case FeatureKind::full:
      return codes;
    case FeatureKind::position:
      return (codes.array() != 0.0f).cast<float>().matrix();
    case FeatureKind::magnitude: {
      RowMatrixF out = RowMatrixF::Zero(codes.rows(), static_cast<Eigen::Index>(k));
      std::vector<float> values;
      for (Eigen::Index i = 0; i < codes.rows(); ++i) {
        values.clear();
        for (Eigen::Index j = 0; j < codes.cols(); ++j)
          if (codes(i, j) != 0.0f) values.push_back(codes(i, j));
        if (values.size() > k) throw InvariantError("code row has more than k nonzeros");
        std::sort(values.begin(), values.end(), std::greater<>());
        for (std::size_t j = 0; j < values.size(); ++j) out(i, static_cast<Eigen::Index>(j)) = values[j];
      }
      return out;
    }
  }
  throw UsageError("unknown feature kind");
}

RowMatrixF batch_features(const sae::SaeModel& model, const RowMatrixF& rows, FeatureKind kind) {
  return views_from_codes(sae::encode_rows(model, rows), model.k, kind);
}

RowMatrixF batch_features(const sae::SaeModel& model, const data::EmbeddingDataset& dataset, FeatureKind kind) {
  if (dataset.dim() != model.d_in())
    throw UsageError("batch_features: dataset dim " + std::to_string(dataset.dim()) + " != model d_in " +
                     std::to_string(model.d_in()));
  return batch_features(model, dataset.vectors, kind);
}

void write_features(const RowMatrixF& features, const FeatureMeta& meta, const std::filesystem::path& path) {
  data::write_vectors(features, path);
  std::ofstream out(data::meta_path(path), std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + data::meta_path(path).string());
  const nlohmann::json j = {{"source_id", meta.source_id},
                            {"checkpoint", meta.checkpoint},
                            {"kind", std::string(to_string(meta.kind))}};
  out << j.dump(2) << '\n';
}

FeatureMeta read_feature_meta(const std::filesystem::path& path) {
  std::ifstream in(data::meta_path(path));
  if (!in) throw IoError("missing feature sidecar: " + data::meta_path(path).string());
  try {
    const auto j = nlohmann::json::parse(in);
    return {j.at("source_id").get<std::string>(), j.at("checkpoint").get<std::string>(),
            parse_feature_kind(j.at("kind").get<std::string>())};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(data::meta_path(path).string() + ": " + e.what());
  }
}

}  // namespace saeprobe::features
