#include "saeprobe/sae.hpp"

#include "saeprobe/log.hpp"
#include "saeprobe/numfmt.hpp"

#include <random>

namespace saeprobe::sae {
namespace {

// First and second moment estimates for one parameter tensor.
template <typename Tensor>
struct AdamSlot {
  Tensor m;
  Tensor v;

  explicit AdamSlot(const Tensor& like) : m(Tensor::Zero(like.rows(), like.cols())), v(m) {}

  void step(Tensor& param, const Tensor& grad, const TrainConfig& cfg, double bias1, double bias2) {
    const auto b1 = static_cast<float>(cfg.adam_beta1);
    const auto b2 = static_cast<float>(cfg.adam_beta2);
    m = b1 * m + (1.0f - b1) * grad;
    v = b2 * v + (1.0f - b2) * grad.cwiseProduct(grad);
    const auto lr = static_cast<float>(cfg.learning_rate / bias1);
    const auto inv_bias2 = static_cast<float>(1.0 / bias2);
    const auto eps = static_cast<float>(cfg.adam_epsilon);
    param.array() -= lr * m.array() / ((v.array() * inv_bias2).sqrt() + eps);
  }
};

double normalize_decoder(SaeModel& model) {
  double worst = 0.0;
  for (Eigen::Index j = 0; j < model.w_dec.cols(); ++j) {
    const float norm = model.w_dec.col(j).norm();
    if (norm > 0.0f) model.w_dec.col(j) /= norm;
    worst = std::max(worst, std::abs(static_cast<double>(model.w_dec.col(j).norm()) - 1.0));
  }
  return worst;
}

double full_pass_loss(const SaeModel& model, const RowMatrixF& rows, std::size_t chunk) {
  if (rows.rows() == 0) return 0.0;
  double total = 0.0;
  for (Eigen::Index start = 0; start < rows.rows(); start += static_cast<Eigen::Index>(chunk)) {
    const auto len = std::min<Eigen::Index>(static_cast<Eigen::Index>(chunk), rows.rows() - start);
    const RowMat<float> block = rows.middleRows(start, len);
    total += static_cast<double>(loss_and_gradient<float>(model, block, nullptr)) * static_cast<double>(len);
  }
  return total / static_cast<double>(rows.rows());
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw UsageError("train: batch_size must be >= 1");
  if (epochs < 1) throw UsageError("train: epochs must be >= 1");
  if (!(learning_rate > 0.0) || !(adam_epsilon > 0.0)) throw UsageError("train: rates must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw UsageError("train: Adam betas must lie in [0, 1)");
}

SaeModel init_model(const RowMatrixF& rows, std::size_t d_z, std::size_t k, std::uint64_t seed) {
  if (rows.rows() == 0) throw UsageError("init_model: no training rows");
  const auto d_in = static_cast<std::size_t>(rows.cols());
  if (d_z <= d_in) throw UsageError("sae: d_z must exceed d_in");
  if (k < 1 || k > d_z) throw UsageError("sae: k out of range [1, d_z]");
  SaeModel model;
  model.k = k;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal;
  model.w_dec.resize(static_cast<Eigen::Index>(d_in), static_cast<Eigen::Index>(d_z));
  for (Eigen::Index j = 0; j < model.w_dec.cols(); ++j)
    for (Eigen::Index r = 0; r < model.w_dec.rows(); ++r) model.w_dec(r, j) = normal(rng);
  normalize_decoder(model);
  model.w_enc = model.w_dec.transpose();
  model.b_pre = (rows.cast<double>().colwise().sum() / static_cast<double>(rows.rows())).transpose().cast<float>();
  return model;
}

TrainResult train(const RowMatrixF& rows, const RowMatrixF& monitor, std::size_t d_z, std::size_t k,
                  const TrainConfig& cfg) {
  cfg.validate();
  if (rows.rows() == 0) throw UsageError("train: the SAE training split is empty");
  if (monitor.rows() > 0 && monitor.cols() != rows.cols()) throw UsageError("train: monitor dim mismatch");
  if (!rows.allFinite()) throw NumericError("train: non-finite training inputs");

  TrainResult result{init_model(rows, d_z, k, cfg.seed), {}};
  auto& model = result.model;
  auto& log = result.log;
  const std::size_t n = static_cast<std::size_t>(rows.rows());
  const std::size_t eval_chunk = 4096;

  log.initial_loss = full_pass_loss(model, rows, eval_chunk);
  AdamSlot<RowMat<float>> enc_slot(model.w_enc);
  AdamSlot<ColMat<float>> dec_slot(model.w_dec);
  AdamSlot<Vec<float>> bias_slot(model.b_pre);

  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  RowMat<float> batch;
  ActiveSets selected;
  std::uint64_t step = 0;
  double b1_pow = 1.0, b2_pow = 1.0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::vector<bool> fired(d_z, false);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, n - start);
      batch.resize(static_cast<Eigen::Index>(len), rows.cols());
      for (std::size_t i = 0; i < len; ++i)
        batch.row(static_cast<Eigen::Index>(i)) = rows.row(static_cast<Eigen::Index>(order[start + i]));
      Gradients<float> grad(model);
      const float loss = loss_and_gradient<float>(model, batch, &grad, nullptr, &selected);
      if (!std::isfinite(loss) || !grad.w_enc.allFinite() || !grad.w_dec.allFinite())
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + " step " +
                           std::to_string(step) + " (learning_rate=" + format_double(cfg.learning_rate) +
                           ", d_z=" + std::to_string(d_z) + ", k=" + std::to_string(k) + ")");
      for (const auto& set : selected)
        for (auto j : set) fired[j] = true;
      epoch_loss += static_cast<double>(loss) * static_cast<double>(len);

      ++step;
      b1_pow *= cfg.adam_beta1;
      b2_pow *= cfg.adam_beta2;
      enc_slot.step(model.w_enc, grad.w_enc, cfg, 1.0 - b1_pow, 1.0 - b2_pow);
      dec_slot.step(model.w_dec, grad.w_dec, cfg, 1.0 - b1_pow, 1.0 - b2_pow);
      bias_slot.step(model.b_pre, grad.b_pre, cfg, 1.0 - b1_pow, 1.0 - b2_pow);
      log.max_decoder_norm_error = std::max(log.max_decoder_norm_error, normalize_decoder(model));
    }
    log.train_loss.push_back(epoch_loss / static_cast<double>(n));
    const auto dead = static_cast<double>(std::count(fired.begin(), fired.end(), false)) / static_cast<double>(d_z);
    log.dead_fraction.push_back(dead);
    if (monitor.rows() > 0) log.monitor_loss.push_back(full_pass_loss(model, monitor, eval_chunk));
    log::debug("sae_epoch", {{"epoch", std::to_string(epoch)},
                             {"train_loss", format_double(log.train_loss.back())},
                             {"monitor_loss", monitor.rows() > 0 ? format_double(log.monitor_loss.back()) : "na"},
                             {"dead_fraction", format_double(dead)}});
  }
  log.final_loss = full_pass_loss(model, rows, eval_chunk);
  if (!std::isfinite(log.final_loss)) throw NumericError("train: non-finite final loss");
  log.final_dead_fraction = log.dead_fraction.back();
  return result;
}

TrainResult train(const data::EmbeddingDataset& dataset, std::size_t d_z, std::size_t k, const TrainConfig& cfg) {
  const auto train_rows = dataset.rows_in(data::Split::train_sae);
  if (train_rows.empty()) throw UsageError("train: dataset has no train_sae rows");
  const auto monitor_rows = dataset.rows_in(data::Split::validation);
  return train(dataset.gather(train_rows), dataset.gather(monitor_rows), d_z, k, cfg);
}

RowMatrixF encode_rows(const SaeModel& model, const RowMatrixF& rows) {
  if (static_cast<std::size_t>(rows.cols()) != model.d_in())
    throw UsageError("encode: input dim " + std::to_string(rows.cols()) + " != d_in " + std::to_string(model.d_in()));
  const RowMatrixF pre = (rows.rowwise() - model.b_pre.transpose()) * model.w_enc.transpose();
  RowMatrixF codes = RowMatrixF::Zero(rows.rows(), pre.cols());
  for (Eigen::Index i = 0; i < pre.rows(); ++i) {
    const std::span<const float> view(pre.row(i).data(), static_cast<std::size_t>(pre.cols()));
    for (auto j : active_set(view, model.k)) codes(i, static_cast<Eigen::Index>(j)) = pre(i, static_cast<Eigen::Index>(j));
  }
  return codes;
}

RowMatrixF decode_rows(const SaeModel& model, const RowMatrixF& codes) {
  if (static_cast<std::size_t>(codes.cols()) != model.d_z()) throw UsageError("decode: code dim mismatch");
  return (codes * model.w_dec.transpose()).rowwise() + model.b_pre.transpose();
}

double normalized_mse(const SaeModel& model, const RowMatrixF& rows) {
  if (rows.rows() == 0) throw UsageError("normalized_mse: no rows");
  const RowMatrixF recon = decode_rows(model, encode_rows(model, rows));
  const double mse = batch_mse_loss<float>(rows, recon);
  const Eigen::RowVectorXd mean = rows.cast<double>().colwise().mean();
  double var = 0.0;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) var += (rows.row(i).cast<double>() - mean).squaredNorm();
  var /= static_cast<double>(rows.rows());
  if (!(var > 0.0)) throw NumericError("normalized_mse: inputs have zero variance");
  return mse / var;
}

}  // namespace saeprobe::sae
