#pragma once

#include "saeprobe/dataset.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

// Synthetic embeddings drawn from a known sparse dictionary. Each sample is
// u = D a + noise with exactly `active_per_sample` positive coefficients.
namespace saeprobe::synth {

enum class CodingMode { position_coded, magnitude_coded };

std::string_view to_string(CodingMode mode);
CodingMode parse_coding_mode(std::string_view text);

struct ClassCounts {
  std::size_t negatives = 0;  // label 0
  std::size_t positives = 0;  // label 1
};

struct SynthSpec {
  std::size_t dim = 32;
  std::size_t num_atoms = 64;
  std::size_t active_per_sample = 4;
  CodingMode coding_mode = CodingMode::position_coded;
  double noise_sigma = 0.01;
  // Position-coded mode: class 1 draws atoms from the last `reserved_atoms`
  // columns, class 0 from the rest. 0 means num_atoms / 2.
  std::size_t reserved_atoms = 0;
  // Magnitude-coded mode: class 1 coefficients are multiplied by this.
  double magnitude_scale = 2.0;
  // Indexed by data::Split.
  std::array<ClassCounts, 4> counts{};
  std::uint64_t seed = 0;

  std::size_t effective_reserved() const { return reserved_atoms ? reserved_atoms : num_atoms / 2; }
  // Throws UsageError.
  void validate() const;
};

struct GroundTruth {
  Eigen::MatrixXd dictionary;  // dim x num_atoms, unit-norm columns
  std::vector<std::vector<std::size_t>> supports;  // per row, ascending atom indices
  std::vector<std::vector<double>> coefficients;   // aligned with supports
  std::vector<Eigen::VectorXf> noiseless;          // D a per row, before noise
};

struct SynthResult {
  data::EmbeddingDataset dataset;
  GroundTruth truth;
};

SynthResult generate(const SynthSpec& spec);

// Dense num_atoms-wide oracle features: indicator of the true support, or the
// true coefficient at each atom.
RowMatrixD support_indicators(const GroundTruth& truth, std::size_t num_atoms,
                              std::span<const std::size_t> rows);
RowMatrixD sorted_coefficients(const GroundTruth& truth, std::size_t active_per_sample,
                               std::span<const std::size_t> rows);

void write_ground_truth(const SynthSpec& spec, const GroundTruth& truth,
                        const std::filesystem::path& path);

}  // namespace saeprobe::synth
