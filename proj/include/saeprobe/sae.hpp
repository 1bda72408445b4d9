#pragma once

#include "saeprobe/dataset.hpp"
#include "saeprobe/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

// TopK sparse autoencoder:
//   z = TopK(W_enc (u - b_pre), k),   u_hat = W_dec z + b_pre.
// Survivors of the TopK selection are clamped at zero, so every code is
// nonnegative with at most k nonzeros.
namespace saeprobe::sae {

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using ColMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
struct BasicSaeModel {
  std::size_t k = 1;
  RowMat<Scalar> w_enc;  // d_z x d_in
  ColMat<Scalar> w_dec;  // d_in x d_z
  Vec<Scalar> b_pre;     // d_in

  std::size_t d_in() const { return static_cast<std::size_t>(w_enc.cols()); }
  std::size_t d_z() const { return static_cast<std::size_t>(w_enc.rows()); }

  void validate() const {
    if (w_enc.rows() == 0 || w_enc.cols() == 0) throw UsageError("sae: empty encoder");
    if (w_dec.rows() != w_enc.cols() || w_dec.cols() != w_enc.rows())
      throw UsageError("sae: decoder shape does not transpose encoder shape");
    if (b_pre.size() != w_enc.cols()) throw UsageError("sae: b_pre length differs from d_in");
    if (k < 1 || k > d_z()) throw UsageError("sae: k out of range [1, d_z]");
    if (!w_enc.allFinite() || !w_dec.allFinite() || !b_pre.allFinite())
      throw NumericError("sae: non-finite weights");
  }
};

using SaeModel = BasicSaeModel<float>;

// Indices of the k largest entries, ordered by value descending then index
// ascending.
template <typename Scalar>
std::vector<std::size_t> topk_indices(std::span<const Scalar> pre, std::size_t k) {
  if (k < 1 || k > pre.size())
    throw UsageError("topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(pre.size()) + "]");
  std::vector<std::size_t> idx(pre.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto before = [&](std::size_t a, std::size_t b) {
    return pre[a] > pre[b] || (pre[a] == pre[b] && a < b);
  };
  if (k < idx.size()) {
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - 1), idx.end(), before);
    idx.resize(k);
  }
  std::sort(idx.begin(), idx.end(), before);
  return idx;
}

// Surviving indices with strictly positive pre-activation, ascending. These
// are the coordinates gradients flow through.
template <typename Scalar>
std::vector<std::size_t> active_set(std::span<const Scalar> pre, std::size_t k) {
  auto idx = topk_indices(pre, k);
  std::erase_if(idx, [&](std::size_t i) { return !(pre[i] > Scalar(0)); });
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <typename Scalar>
Vec<Scalar> topk_activation(const Vec<Scalar>& pre, std::size_t k) {
  const std::span<const Scalar> view(pre.data(), static_cast<std::size_t>(pre.size()));
  Vec<Scalar> out = Vec<Scalar>::Zero(pre.size());
  for (auto i : active_set(view, k)) out(static_cast<Eigen::Index>(i)) = pre(static_cast<Eigen::Index>(i));
  return out;
}

template <typename Scalar>
Vec<Scalar> pre_activation(const BasicSaeModel<Scalar>& model, const Vec<Scalar>& u) {
  if (static_cast<std::size_t>(u.size()) != model.d_in())
    throw UsageError("encode: input dim " + std::to_string(u.size()) + " != d_in " + std::to_string(model.d_in()));
  return model.w_enc * (u - model.b_pre);
}

template <typename Scalar>
Vec<Scalar> encode(const BasicSaeModel<Scalar>& model, const Vec<Scalar>& u) {
  return topk_activation<Scalar>(pre_activation(model, u), model.k);
}

template <typename Scalar>
Vec<Scalar> decode(const BasicSaeModel<Scalar>& model, const Vec<Scalar>& z) {
  if (static_cast<std::size_t>(z.size()) != model.d_z())
    throw UsageError("decode: code dim " + std::to_string(z.size()) + " != d_z " + std::to_string(model.d_z()));
  return model.w_dec * z + model.b_pre;
}

// Squared reconstruction error, summed over dimensions.
template <typename Scalar>
Scalar mse_loss(const Vec<Scalar>& u, const Vec<Scalar>& u_hat) {
  if (u.size() != u_hat.size()) throw UsageError("mse_loss: dimension mismatch");
  return (u - u_hat).squaredNorm();
}

// Mean over rows of mse_loss.
template <typename Scalar>
double batch_mse_loss(const RowMat<Scalar>& u, const RowMat<Scalar>& u_hat) {
  if (u.rows() != u_hat.rows() || u.cols() != u_hat.cols()) throw UsageError("batch_mse_loss: shape mismatch");
  if (u.rows() == 0) return 0.0;
  double total = 0.0;
  for (Eigen::Index i = 0; i < u.rows(); ++i)
    total += static_cast<double>((u.row(i) - u_hat.row(i)).squaredNorm());
  return total / static_cast<double>(u.rows());
}

template <typename Scalar>
struct Gradients {
  RowMat<Scalar> w_enc;
  ColMat<Scalar> w_dec;
  Vec<Scalar> b_pre;

  explicit Gradients(const BasicSaeModel<Scalar>& m)
      : w_enc(RowMat<Scalar>::Zero(m.w_enc.rows(), m.w_enc.cols())),
        w_dec(ColMat<Scalar>::Zero(m.w_dec.rows(), m.w_dec.cols())),
        b_pre(Vec<Scalar>::Zero(m.b_pre.size())) {}
};

using ActiveSets = std::vector<std::vector<std::size_t>>;

// Batch-mean loss over the rows of `batch`. When `fixed` is given, each row's
// code is z_j = pre_j on that row's listed coordinates (the TopK selection is
// held constant); otherwise the selection is recomputed and written to
// `selected` if non-null. `grad`, if non-null, receives the exact gradient of
// the returned loss with the selection held fixed.
template <typename Scalar>
Scalar loss_and_gradient(const BasicSaeModel<Scalar>& model, const RowMat<Scalar>& batch,
                         Gradients<Scalar>* grad, const ActiveSets* fixed = nullptr,
                         ActiveSets* selected = nullptr) {
  const auto n = batch.rows();
  if (n == 0) throw UsageError("loss_and_gradient: empty batch");
  if (static_cast<std::size_t>(batch.cols()) != model.d_in()) throw UsageError("loss_and_gradient: input dim mismatch");
  const RowMat<Scalar> centered = batch.rowwise() - model.b_pre.transpose();
  const RowMat<Scalar> pre = centered * model.w_enc.transpose();
  if (selected) selected->assign(static_cast<std::size_t>(n), {});
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
  Scalar total = 0;
  Vec<Scalar> recon(batch.cols());
  Vec<Scalar> d_recon(batch.cols());
  std::vector<std::size_t> local;
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::vector<std::size_t>* active = nullptr;
    if (fixed) {
      active = &(*fixed)[static_cast<std::size_t>(i)];
    } else {
      local = active_set(std::span<const Scalar>(pre.row(i).data(), static_cast<std::size_t>(pre.cols())), model.k);
      active = &local;
      if (selected) (*selected)[static_cast<std::size_t>(i)] = local;
    }
    recon = model.b_pre;
    for (auto j : *active) recon += pre(i, static_cast<Eigen::Index>(j)) * model.w_dec.col(static_cast<Eigen::Index>(j));
    const Vec<Scalar> residual = recon - batch.row(i).transpose();
    total += residual.squaredNorm();
    if (!grad) continue;
    d_recon = Scalar(2) * inv_n * residual;
    grad->b_pre += d_recon;
    for (auto jj : *active) {
      const auto j = static_cast<Eigen::Index>(jj);
      grad->w_dec.col(j) += pre(i, j) * d_recon;
      const Scalar d_pre = model.w_dec.col(j).dot(d_recon);
      grad->w_enc.row(j) += d_pre * centered.row(i);
      grad->b_pre -= d_pre * model.w_enc.row(j).transpose();
    }
  }
  return total * inv_n;
}

struct TrainConfig {
  std::size_t batch_size = 1024;
  std::size_t epochs = 200;
  double learning_rate = 1e-5;
  double adam_epsilon = 6.25e-10;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainLog {
  double initial_loss = 0.0;
  std::vector<double> train_loss;    // per epoch, mean over that epoch's batches
  std::vector<double> monitor_loss;  // per epoch, empty when no monitor rows
  std::vector<double> dead_fraction; // per epoch, latents never active in the epoch
  double final_loss = 0.0;           // full pass over the training rows after the last step
  double final_dead_fraction = 0.0;
  double max_decoder_norm_error = 0.0;  // max |‖col‖ - 1| seen after any step
};

struct TrainResult {
  SaeModel model;
  TrainLog log;
};

// Initializes a model for `train`: unit-norm Gaussian decoder columns, encoder
// = decoder transpose, b_pre = mean of `rows`.
SaeModel init_model(const RowMatrixF& rows, std::size_t d_z, std::size_t k, std::uint64_t seed);

// Trains on rows; `monitor` may be empty. Throws NumericError on divergence.
TrainResult train(const RowMatrixF& rows, const RowMatrixF& monitor, std::size_t d_z, std::size_t k,
                  const TrainConfig& cfg);

// Trains on the train_sae split, monitoring the validation split.
TrainResult train(const data::EmbeddingDataset& dataset, std::size_t d_z, std::size_t k, const TrainConfig& cfg);

// Dense codes for every row (n x d_z).
RowMatrixF encode_rows(const SaeModel& model, const RowMatrixF& rows);
RowMatrixF decode_rows(const SaeModel& model, const RowMatrixF& codes);

// Mean squared reconstruction error divided by the mean squared deviation of
// the rows from their mean (fraction of variance unexplained).
double normalized_mse(const SaeModel& model, const RowMatrixF& rows);

// Checkpoint: "SPRC", u16 version, u32 header length, JSON header, then
// float32 LE w_enc (row-major d_z x d_in), w_dec (row-major d_in x d_z), b_pre.
struct CheckpointInfo {
  TrainConfig config;
  std::size_t epoch = 0;
  std::string source_id;
};

void save_checkpoint(const SaeModel& model, const CheckpointInfo& info, const std::filesystem::path& path);

struct LoadedCheckpoint {
  SaeModel model;
  CheckpointInfo info;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace saeprobe::sae
