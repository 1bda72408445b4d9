#pragma once

#include "saeprobe/dataset.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

// L1-regularized binary logistic regression on standardized features.
namespace saeprobe::probe {

// Per-column z-score statistics (population standard deviation).
struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;

  static Standardizer fit(const RowMatrixD& features);
  // Columns with zero variance map to 0.
  RowMatrixD apply(const RowMatrixD& features) const;
  bool is_constant(Eigen::Index column) const { return !(std(column) > 0.0); }
};

RowMatrixD standardize(const RowMatrixD& features, const Standardizer& stats);

struct FitOptions {
  // Defaults to 1 / n_train.
  std::optional<double> lambda;
  std::size_t max_iter = 3000;
  // Stop once the largest parameter change in one iteration falls below tol.
  double tol = 1e-7;
};

struct ProbeModel {
  Eigen::VectorXd weights;
  double bias = 0.0;
  Eigen::VectorXd feature_mean;
  Eigen::VectorXd feature_std;
  double lambda = 0.0;
  bool converged = false;
  std::size_t iterations = 0;
  double objective = 0.0;

  std::size_t width() const { return static_cast<std::size_t>(weights.size()); }
  Standardizer standardizer() const { return {feature_mean, feature_std}; }
};

// (1/n) sum log(1 + exp(-y (w.x + b))) + lambda |w|_1 with y in {-1, +1}.
double objective(const RowMatrixD& standardized, std::span<const std::uint8_t> labels,
                 const Eigen::VectorXd& weights, double bias, double lambda);

// Throws UsageError for a single-class label vector or a shape mismatch,
// NumericError for non-finite features.
ProbeModel fit(const RowMatrixD& features, std::span<const std::uint8_t> labels, const FitOptions& options = {});

// w.x~ + b with x~ standardized by the frozen statistics.
Eigen::VectorXd decision_scores(const ProbeModel& model, const RowMatrixD& features);
// Label 1 iff sigmoid(score) >= 0.5.
std::vector<std::uint8_t> predict(const ProbeModel& model, const RowMatrixD& features);

struct EvalResult {
  double macro_f1 = 0.0;
  std::array<double, 2> per_class_f1{};
  // confusion[truth][prediction]
  std::array<std::array<std::size_t, 2>, 2> confusion{};
};

EvalResult macro_f1(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> truth);

void save_probe(const ProbeModel& model, const std::filesystem::path& path);
ProbeModel load_probe(const std::filesystem::path& path);
void save_eval(const EvalResult& result, const std::filesystem::path& path);

}  // namespace saeprobe::probe
