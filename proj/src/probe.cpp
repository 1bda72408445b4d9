#include "saeprobe/probe.hpp"

#include "saeprobe/error.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <limits>

namespace saeprobe::probe {
namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct Problem {
  const RowMatrixD& x;
  Eigen::VectorXd y;  // +-1
  double lambda;

  // Smooth part (mean logistic loss); fills the gradient when asked.
  double smooth(const Eigen::VectorXd& w, double b, Eigen::VectorXd* grad_w, double* grad_b) const {
    const Eigen::VectorXd margin = (y.array() * ((x * w).array() + b)).matrix();
    const double n = static_cast<double>(x.rows());
    double loss = 0.0;
    for (Eigen::Index i = 0; i < margin.size(); ++i) loss += softplus(-margin(i));
    if (grad_w) {
      Eigen::VectorXd g(margin.size());
      for (Eigen::Index i = 0; i < margin.size(); ++i) g(i) = -y(i) * sigmoid(-margin(i)) / n;
      *grad_w = x.transpose() * g;
      *grad_b = g.sum();
    }
    return loss / n;
  }
};

Eigen::VectorXd soft_threshold(const Eigen::VectorXd& v, double t) {
  return v.unaryExpr([t](double a) { return a > t ? a - t : (a < -t ? a + t : 0.0); });
}

Eigen::VectorXd signed_labels(std::span<const std::uint8_t> labels) {
  Eigen::VectorXd y(static_cast<Eigen::Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) y(static_cast<Eigen::Index>(i)) = labels[i] ? 1.0 : -1.0;
  return y;
}

std::vector<double> to_vector(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::VectorXd from_json_vector(const nlohmann::json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

}  // namespace

Standardizer Standardizer::fit(const RowMatrixD& features) {
  if (features.rows() == 0) throw UsageError("standardize: no rows to compute statistics from");
  Standardizer s;
  s.mean = features.colwise().mean().transpose();
  s.std.resize(features.cols());
  for (Eigen::Index j = 0; j < features.cols(); ++j)
    s.std(j) = std::sqrt((features.col(j).array() - s.mean(j)).square().mean());
  return s;
}

RowMatrixD Standardizer::apply(const RowMatrixD& features) const {
  if (features.cols() != mean.size() || features.cols() != std.size())
    throw UsageError("standardize: feature width " + std::to_string(features.cols()) + " != statistics width " +
                     std::to_string(mean.size()));
  RowMatrixD out(features.rows(), features.cols());
  for (Eigen::Index j = 0; j < features.cols(); ++j) {
    if (is_constant(j))
      out.col(j).setZero();
    else
      out.col(j) = (features.col(j).array() - mean(j)) / std(j);
  }
  return out;
}

RowMatrixD standardize(const RowMatrixD& features, const Standardizer& stats) { return stats.apply(features); }

double objective(const RowMatrixD& standardized, std::span<const std::uint8_t> labels, const Eigen::VectorXd& weights,
                 double bias, double lambda) {
  if (static_cast<std::size_t>(standardized.rows()) != labels.size()) throw UsageError("objective: label count mismatch");
  const Problem p{standardized, signed_labels(labels), lambda};
  return p.smooth(weights, bias, nullptr, nullptr) + lambda * weights.lpNorm<1>();
}

ProbeModel fit(const RowMatrixD& features, std::span<const std::uint8_t> labels, const FitOptions& options) {
  if (static_cast<std::size_t>(features.rows()) != labels.size())
    throw UsageError("probe fit: " + std::to_string(labels.size()) + " labels for " + std::to_string(features.rows()) +
                     " rows");
  if (features.rows() == 0) throw UsageError("probe fit: no training rows");
  std::size_t positives = 0;
  for (auto l : labels) {
    if (l > 1) throw UsageError("probe fit: labels must be 0 or 1");
    positives += l;
  }
  if (positives == 0 || positives == labels.size()) throw UsageError("probe fit: training labels contain a single class");
  if (!features.allFinite()) throw NumericError("probe fit: non-finite features");

  ProbeModel model;
  const auto stats = Standardizer::fit(features);
  model.feature_mean = stats.mean;
  model.feature_std = stats.std;
  model.lambda = options.lambda.value_or(1.0 / static_cast<double>(features.rows()));
  if (!(model.lambda >= 0.0)) throw UsageError("probe fit: lambda must be nonnegative");

  const RowMatrixD x = stats.apply(features);
  const Problem problem{x, signed_labels(labels), model.lambda};
  const Eigen::Index p = x.cols();

  // FISTA with backtracking on the step size and gradient-based restart.
  double max_row = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) max_row = std::max(max_row, x.row(i).squaredNorm());
  double lipschitz = std::max(0.25 * (max_row + 1.0) * 1e-2, 1e-6);

  Eigen::VectorXd w = Eigen::VectorXd::Zero(p), yw = w, gw(p), w_new(p);
  double b = 0.0, yb = 0.0, gb = 0.0, b_new = 0.0;
  double t = 1.0;
  const auto full_objective = [&](const Eigen::VectorXd& ww, double smooth_value) {
    return smooth_value + model.lambda * ww.lpNorm<1>();
  };
  Eigen::VectorXd best_w = w;
  double best_b = b;
  double best_obj = full_objective(w, problem.smooth(w, b, nullptr, nullptr));

  std::size_t iter = 0;
  for (; iter < options.max_iter; ++iter) {
    const double fy = problem.smooth(yw, yb, &gw, &gb);
    lipschitz *= 0.9;
    double f_new = 0.0;
    for (int attempt = 0; attempt < 100; ++attempt) {
      w_new = soft_threshold(yw - gw / lipschitz, model.lambda / lipschitz);
      b_new = yb - gb / lipschitz;
      f_new = problem.smooth(w_new, b_new, nullptr, nullptr);
      const Eigen::VectorXd dw = w_new - yw;
      const double db = b_new - yb;
      const double model_value = fy + gw.dot(dw) + gb * db + 0.5 * lipschitz * (dw.squaredNorm() + db * db);
      if (f_new <= model_value + 1e-14 * std::abs(fy)) break;
      lipschitz *= 2.0;
    }
    const double obj = full_objective(w_new, f_new);
    if (!std::isfinite(obj)) throw NumericError("probe fit: objective became non-finite");
    if (obj < best_obj) {
      best_obj = obj;
      best_w = w_new;
      best_b = b_new;
    }
    const Eigen::VectorXd step_w = w_new - w;
    const double step_b = b_new - b;
    const double change = std::max(step_w.lpNorm<Eigen::Infinity>(), std::abs(step_b));
    const double restart = (yw - w_new).dot(step_w) + (yb - b_new) * step_b;
    if (restart > 0.0) {
      t = 1.0;
      yw = w_new;
      yb = b_new;
    } else {
      const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
      const double beta = (t - 1.0) / t_next;
      yw = w_new + beta * step_w;
      yb = b_new + beta * step_b;
      t = t_next;
    }
    w = w_new;
    b = b_new;
    if (change < options.tol) {
      model.converged = true;
      ++iter;
      break;
    }
  }
  model.iterations = iter;
  model.weights = best_w;
  model.bias = best_b;
  model.objective = best_obj;
  return model;
}

Eigen::VectorXd decision_scores(const ProbeModel& model, const RowMatrixD& features) {
  if (static_cast<std::size_t>(features.cols()) != model.width())
    throw UsageError("predict: feature width " + std::to_string(features.cols()) + " != probe width " +
                     std::to_string(model.width()));
  return (model.standardizer().apply(features) * model.weights).array() + model.bias;
}

std::vector<std::uint8_t> predict(const ProbeModel& model, const RowMatrixD& features) {
  const auto scores = decision_scores(model, features);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(scores.size()));
  for (Eigen::Index i = 0; i < scores.size(); ++i) out[static_cast<std::size_t>(i)] = sigmoid(scores(i)) >= 0.5 ? 1 : 0;
  return out;
}

EvalResult macro_f1(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> truth) {
  if (predictions.size() != truth.size())
    throw UsageError("macro_f1: " + std::to_string(predictions.size()) + " predictions for " +
                     std::to_string(truth.size()) + " labels");
  EvalResult r;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] > 1 || predictions[i] > 1) throw UsageError("macro_f1: labels must be 0 or 1");
    ++r.confusion[truth[i]][predictions[i]];
  }
  if (r.confusion[0][0] + r.confusion[0][1] == 0 || r.confusion[1][0] + r.confusion[1][1] == 0)
    throw UsageError("macro_f1: ground truth contains a single class");
  // 2PR / (P + R) rewritten as 2TP / (2TP + FP + FN): one rounding step.
  for (int c = 0; c < 2; ++c) {
    const auto tp = r.confusion[c][c];
    const auto fp = r.confusion[1 - c][c];
    const auto fn = r.confusion[c][1 - c];
    r.per_class_f1[c] = tp == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
  }
  r.macro_f1 = 0.5 * (r.per_class_f1[0] + r.per_class_f1[1]);
  return r;
}

void save_probe(const ProbeModel& model, const std::filesystem::path& path) {
  const nlohmann::json j = {{"format", "saeprobe-probe"},
                            {"weights", to_vector(model.weights)},
                            {"bias", model.bias},
                            {"feature_mean", to_vector(model.feature_mean)},
                            {"feature_std", to_vector(model.feature_std)},
                            {"lambda", model.lambda},
                            {"converged", model.converged},
                            {"iterations", model.iterations},
                            {"objective", model.objective}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << j.dump(2) << '\n';
}

ProbeModel load_probe(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("format") != "saeprobe-probe") throw FormatError(path.string() + ": not a probe checkpoint");
    ProbeModel m;
    m.weights = from_json_vector(j.at("weights"));
    m.bias = j.at("bias").get<double>();
    m.feature_mean = from_json_vector(j.at("feature_mean"));
    m.feature_std = from_json_vector(j.at("feature_std"));
    m.lambda = j.at("lambda").get<double>();
    m.converged = j.at("converged").get<bool>();
    m.iterations = j.value("iterations", std::size_t{0});
    m.objective = j.value("objective", 0.0);
    if (m.feature_mean.size() != m.weights.size() || m.feature_std.size() != m.weights.size())
      throw FormatError(path.string() + ": statistics width differs from weight width");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_eval(const EvalResult& r, const std::filesystem::path& path) {
  const nlohmann::json j = {{"macro_f1", r.macro_f1},
                            {"per_class_f1", r.per_class_f1},
                            {"confusion", r.confusion}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace saeprobe::probe
