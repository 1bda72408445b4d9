#include "oracles.hpp"
#include "saeprobe/error.hpp"
#include "saeprobe/sae.hpp"
#include "saeprobe/synth.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

namespace fs = std::filesystem;
using namespace saeprobe;
using sae::Vec;

namespace {

Vec<float> vec(std::initializer_list<float> v) {
  Vec<float> out(static_cast<Eigen::Index>(v.size()));
  std::size_t i = 0;
  for (float x : v) out(static_cast<Eigen::Index>(i++)) = x;
  return out;
}

sae::SaeModel random_model(std::size_t d_in, std::size_t d_z, std::size_t k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  sae::SaeModel m;
  m.k = k;
  m.w_enc = sae::RowMat<float>(d_z, d_in);
  m.w_dec = sae::ColMat<float>(d_in, d_z);
  m.b_pre = Vec<float>(d_in);
  for (Eigen::Index i = 0; i < m.w_enc.size(); ++i) m.w_enc.data()[i] = gauss(rng);
  for (Eigen::Index i = 0; i < m.w_dec.size(); ++i) m.w_dec.data()[i] = gauss(rng);
  for (Eigen::Index i = 0; i < m.b_pre.size(); ++i) m.b_pre(i) = 0.1f * gauss(rng);
  return m;
}

RowMatrixF gaussian_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  RowMatrixF x(n, d);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = gauss(rng);
  return x;
}

sae::TrainConfig fast_config(std::size_t epochs = 30, std::uint64_t seed = 3) {
  sae::TrainConfig cfg;
  cfg.batch_size = 64;
  cfg.learning_rate = 1e-3;
  cfg.epochs = epochs;
  cfg.seed = seed;
  return cfg;
}

synth::SynthResult small_synth(double noise, std::size_t n_train = 800) {
  synth::SynthSpec spec;
  spec.dim = 16;
  spec.num_atoms = 32;
  spec.active_per_sample = 2;
  spec.noise_sigma = noise;
  spec.seed = 5;
  spec.counts[static_cast<std::size_t>(data::Split::train_sae)] = {n_train / 2, n_train / 2};
  spec.counts[static_cast<std::size_t>(data::Split::validation)] = {50, 50};
  return synth::generate(spec);
}

}  // namespace

TEST(TopK, KeepsTwoLargest) { EXPECT_EQ(sae::topk_activation(vec({3, 1, 2}), 2), vec({3, 0, 2})); }

TEST(TopK, NegativeSurvivorsClamped) { EXPECT_EQ(sae::topk_activation(vec({-1, -2, -3}), 2), vec({0, 0, 0})); }

TEST(TopK, LowestIndexWinsTies) {
  EXPECT_EQ(sae::topk_activation(vec({5, 5, 5}), 1), vec({5, 0, 0}));
  const Vec<float> pre = vec({1, 4, 4, 2, 4});
  EXPECT_EQ(sae::topk_indices(std::span<const float>(pre.data(), 5), 2), (std::vector<std::size_t>{1, 2}));
}

TEST(TopK, FullWidthIsIdentityOnPositiveInput) {
  const Vec<float> pre = vec({0.5f, 2, 7, 1e-3f});
  EXPECT_EQ(sae::topk_activation(pre, 4), pre);
}

TEST(TopK, KOutOfRange) {
  EXPECT_THROW(sae::topk_activation(vec({1, 2}), 0), UsageError);
  EXPECT_THROW(sae::topk_activation(vec({1, 2}), 3), UsageError);
}

TEST(TopK, SelectionMatchesFullSortOracle) {
  std::mt19937_64 rng(11);
  std::normal_distribution<float> gauss;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t d_z = 1 + trial % 40, k = 1 + (trial * 7) % d_z;
    Vec<float> pre(static_cast<Eigen::Index>(d_z));
    for (Eigen::Index i = 0; i < pre.size(); ++i) pre(i) = trial % 2 ? gauss(rng) : std::round(gauss(rng));
    const std::vector<double> as_double(pre.data(), pre.data() + d_z);
    const auto want = oracle::topk(as_double, k);
    ASSERT_EQ(sae::topk_indices(std::span<const float>(pre.data(), d_z), k), want.order);
    const auto z = sae::topk_activation(pre, k);
    std::size_t nnz = 0;
    for (std::size_t i = 0; i < d_z; ++i) {
      ASSERT_EQ(static_cast<double>(z(static_cast<Eigen::Index>(i))), want.dense[i]);
      nnz += z(static_cast<Eigen::Index>(i)) != 0.0f;
      ASSERT_GE(z(static_cast<Eigen::Index>(i)), 0.0f);
    }
    ASSERT_LE(nnz, k);
  }
}

TEST(Encode, IdentityEncoder) {
  sae::SaeModel m;
  m.k = 2;
  m.w_enc = sae::RowMat<float>::Identity(3, 3);
  m.w_dec = sae::ColMat<float>::Identity(3, 3);
  m.b_pre = Vec<float>::Zero(3);
  EXPECT_EQ(sae::encode(m, vec({2, -1, 3})), vec({2, 0, 3}));
}

TEST(Encode, CenteredInputGivesZeroCode) {
  auto m = random_model(5, 12, 4, 1);
  const Vec<float> u = m.b_pre;
  EXPECT_EQ(sae::encode(m, u), Vec<float>(Vec<float>::Zero(12)));
}

TEST(Encode, MatchesDenseMatmulThenSortOracle) {
  auto m = random_model(6, 20, 5, 2);
  std::mt19937_64 rng(3);
  std::normal_distribution<float> gauss;
  oracle::Matrix w(20, std::vector<double>(6));
  for (int r = 0; r < 20; ++r)
    for (int c = 0; c < 6; ++c) w[r][c] = m.w_enc(r, c);
  const std::vector<double> b(m.b_pre.data(), m.b_pre.data() + 6);
  for (int trial = 0; trial < 200; ++trial) {
    Vec<float> u(6);
    for (int i = 0; i < 6; ++i) u(i) = gauss(rng);
    const auto pre = sae::pre_activation(m, u);
    const auto dense = oracle::affine(w, std::vector<double>(u.data(), u.data() + 6), b);
    for (int j = 0; j < 20; ++j) ASSERT_NEAR(pre(j), dense[j], 1e-5);
    const auto want = oracle::topk(std::vector<double>(pre.data(), pre.data() + 20), 5);
    const auto z = sae::encode(m, u);
    for (int j = 0; j < 20; ++j) ASSERT_EQ(static_cast<double>(z(j)), want.dense[j]);
  }
}

TEST(Encode, DimensionMismatch) {
  auto m = random_model(4, 8, 2, 4);
  EXPECT_THROW(sae::encode(m, vec({1, 2, 3})), UsageError);
  EXPECT_THROW(sae::decode(m, vec({1, 2, 3})), UsageError);
}

TEST(Decode, ZeroCodeReturnsBias) {
  auto m = random_model(4, 8, 2, 5);
  EXPECT_EQ(sae::decode(m, Vec<float>(Vec<float>::Zero(8))), m.b_pre);
}

TEST(Decode, UnitCodeExtractsColumn) {
  auto m = random_model(4, 8, 2, 6);
  for (int j = 0; j < 8; ++j) {
    Vec<float> z = Vec<float>::Zero(8);
    z(j) = 1.0f;
    EXPECT_TRUE(sae::decode(m, z).isApprox(Vec<float>(m.w_dec.col(j) + m.b_pre)));
  }
}

TEST(Decode, PseudoInverseRecoversInSpanInput) {
  // W_enc = [I; P] with P > 0 and u > 0 keeps every pre-activation positive,
  // so with k = d_z the code is linear and pinv(W_enc) inverts it.
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> pos(0.1, 1.0);
  const int d_in = 3, d_z = 6;
  Eigen::MatrixXd enc(d_z, d_in);
  enc.topRows(d_in) = Eigen::MatrixXd::Identity(d_in, d_in);
  for (int r = d_in; r < d_z; ++r)
    for (int c = 0; c < d_in; ++c) enc(r, c) = pos(rng);
  const Eigen::MatrixXd dec = enc.completeOrthogonalDecomposition().pseudoInverse();
  sae::SaeModel m;
  m.k = d_z;
  m.w_enc = enc.cast<float>();
  m.w_dec = dec.cast<float>();
  m.b_pre = Vec<float>::Zero(d_in);
  for (int trial = 0; trial < 20; ++trial) {
    Vec<float> u(d_in);
    for (int i = 0; i < d_in; ++i) u(i) = static_cast<float>(pos(rng));
    const auto u_hat = sae::decode(m, sae::encode(m, u));
    EXPECT_LT((u_hat - u).cwiseAbs().maxCoeff(), 1e-4f);
  }
}

TEST(Mse, HandValues) {
  EXPECT_EQ(sae::mse_loss(vec({1, 2}), vec({1, 2})), 0.0f);
  EXPECT_EQ(sae::mse_loss(vec({1, 0}), vec({0, 1})), 2.0f);
  EXPECT_THROW(sae::mse_loss(vec({1, 0}), vec({0, 1, 2})), UsageError);
}

TEST(Mse, BatchMeanMatchesScalarOracle) {
  const auto a = gaussian_rows(50, 7, 8), b = gaussian_rows(50, 7, 9);
  double want = 0.0;
  for (int i = 0; i < 50; ++i) {
    std::vector<double> ra(a.row(i).data(), a.row(i).data() + 7), rb(b.row(i).data(), b.row(i).data() + 7);
    want += oracle::squared_error(ra, rb);
  }
  want /= 50;
  EXPECT_NEAR(sae::batch_mse_loss<float>(a, b), want, 1e-6 * want);
}

TEST(Gradient, MatchesFiniteDifferencesInDouble) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> gauss;
  sae::BasicSaeModel<double> m;
  m.k = 3;
  m.w_enc = sae::RowMat<double>(8, 4);
  m.w_dec = sae::ColMat<double>(4, 8);
  m.b_pre = Vec<double>(4);
  for (Eigen::Index i = 0; i < m.w_enc.size(); ++i) m.w_enc.data()[i] = gauss(rng);
  for (Eigen::Index i = 0; i < m.w_dec.size(); ++i) m.w_dec.data()[i] = gauss(rng);
  for (Eigen::Index i = 0; i < 4; ++i) m.b_pre(i) = gauss(rng);
  sae::RowMat<double> batch(5, 4);
  for (Eigen::Index i = 0; i < batch.size(); ++i) batch.data()[i] = gauss(rng);
  sae::ActiveSets mask;
  sae::Gradients<double> g(m);
  const double loss = sae::loss_and_gradient<double>(m, batch, &g, nullptr, &mask);

  oracle::Matrix rows(5, std::vector<double>(4));
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 4; ++j) rows[i][j] = batch(i, j);
  const auto oracle_loss = [&] {
    oracle::Matrix we(8, std::vector<double>(4)), wd(4, std::vector<double>(8));
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 4; ++c) {
        we[r][c] = m.w_enc(r, c);
        wd[c][r] = m.w_dec(c, r);
      }
    return oracle::sae_loss_fixed(we, wd, std::vector<double>(m.b_pre.data(), m.b_pre.data() + 4), rows, mask);
  };
  EXPECT_NEAR(loss, oracle_loss(), 1e-12 * loss);
  const double h = 1e-6;
  const auto check = [&](auto& param, const auto& grad) {
    for (Eigen::Index i = 0; i < param.size(); ++i) {
      const double keep = param.data()[i];
      param.data()[i] = keep + h;
      const double up = oracle_loss();
      param.data()[i] = keep - h;
      const double down = oracle_loss();
      param.data()[i] = keep;
      const double fd = (up - down) / (2 * h);
      EXPECT_NEAR(grad.data()[i], fd, 1e-4 * std::max(1.0, std::abs(fd)));
    }
  };
  check(m.w_enc, g.w_enc);
  check(m.w_dec, g.w_dec);
  check(m.b_pre, g.b_pre);
}

TEST(Gradient, FixedMaskReproducesSelection) {
  auto mf = random_model(4, 8, 3, 13);
  const auto batch = gaussian_rows(10, 4, 14);
  sae::ActiveSets mask;
  sae::Gradients<float> g1(mf), g2(mf);
  const float a = sae::loss_and_gradient<float>(mf, batch, &g1, nullptr, &mask);
  const float b = sae::loss_and_gradient<float>(mf, batch, &g2, &mask);
  EXPECT_EQ(a, b);
  EXPECT_EQ(g1.w_enc, g2.w_enc);
  for (const auto& row : mask) EXPECT_LE(row.size(), 3u);
}

TEST(Init, DecoderUnitNormEncoderTransposeBiasMean) {
  const auto rows = gaussian_rows(100, 6, 15);
  const auto m = sae::init_model(rows, 18, 4, 1);
  for (Eigen::Index j = 0; j < 18; ++j) EXPECT_NEAR(m.w_dec.col(j).norm(), 1.0f, 1e-6f);
  EXPECT_EQ(sae::RowMat<float>(m.w_dec.transpose()), m.w_enc);
  const Eigen::VectorXf mean = rows.colwise().mean().transpose();
  EXPECT_TRUE(m.b_pre.isApprox(mean, 1e-5f));
}

TEST(Train, DeterministicUnderSeed) {
  const auto s = small_synth(0.01, 300);
  const auto a = sae::train(s.dataset, 32, 4, fast_config(5));
  const auto b = sae::train(s.dataset, 32, 4, fast_config(5));
  EXPECT_EQ(a.model.w_enc, b.model.w_enc);
  EXPECT_EQ(a.model.w_dec, b.model.w_dec);
  EXPECT_EQ(a.model.b_pre, b.model.b_pre);
  EXPECT_EQ(a.log.train_loss, b.log.train_loss);
  const auto c = sae::train(s.dataset, 32, 4, fast_config(5, 99));
  EXPECT_NE(a.model.w_enc, c.model.w_enc);
}

TEST(Train, LossDecreasesAndDecoderStaysNormalized) {
  for (double noise : {0.0, 0.05}) {
    const auto s = small_synth(noise);
    const auto r = sae::train(s.dataset, 32, 4, fast_config(40));
    ASSERT_EQ(r.log.train_loss.size(), 40u);
    ASSERT_EQ(r.log.monitor_loss.size(), 40u);
    ASSERT_EQ(r.log.dead_fraction.size(), 40u);
    EXPECT_LT(r.log.final_loss, r.log.initial_loss);
    for (std::size_t e = 1; e < r.log.train_loss.size(); ++e)
      EXPECT_LE(r.log.train_loss[e], 1.05 * r.log.train_loss[e - 1]) << "epoch " << e;
    EXPECT_LT(r.log.max_decoder_norm_error, 1e-6);
    for (Eigen::Index j = 0; j < r.model.w_dec.cols(); ++j) EXPECT_NEAR(r.model.w_dec.col(j).norm(), 1.0f, 1e-6f);
    for (double d : r.log.dead_fraction) {
      EXPECT_GE(d, 0.0);
      EXPECT_LE(d, 1.0);
    }
  }
}

TEST(Train, RecoversNoiselessSynth) {
  const auto s = small_synth(0.0, 2000);
  const auto r = sae::train(s.dataset, 32, 4, fast_config(100));
  const auto rows = s.dataset.gather(s.dataset.rows_in(data::Split::train_sae));
  EXPECT_LT(sae::normalized_mse(r.model, rows), 0.1);
}

TEST(Train, CodesAreSparseAndNonnegative) {
  const auto s = small_synth(0.05, 300);
  const auto r = sae::train(s.dataset, 48, 5, fast_config(5));
  const auto codes = sae::encode_rows(r.model, s.dataset.vectors);
  for (Eigen::Index i = 0; i < codes.rows(); ++i) {
    int nnz = 0;
    for (Eigen::Index j = 0; j < codes.cols(); ++j) {
      EXPECT_GE(codes(i, j), 0.0f);
      nnz += codes(i, j) != 0.0f;
    }
    EXPECT_LE(nnz, 5);
  }
  const auto recon = sae::decode_rows(r.model, codes);
  EXPECT_EQ(recon.rows(), codes.rows());
  EXPECT_EQ(recon.cols(), 16);
}

TEST(Train, Errors) {
  const auto s = small_synth(0.01, 100);
  EXPECT_THROW(sae::train(s.dataset, 16, 4, fast_config(1)), UsageError);   // d_z == d_in
  EXPECT_THROW(sae::train(s.dataset, 32, 0, fast_config(1)), UsageError);
  EXPECT_THROW(sae::train(s.dataset, 32, 33, fast_config(1)), UsageError);
  auto cfg = fast_config(1);
  cfg.batch_size = 0;
  EXPECT_THROW(sae::train(s.dataset, 32, 4, cfg), UsageError);
  cfg = fast_config(1);
  cfg.learning_rate = -1;
  EXPECT_THROW(sae::train(s.dataset, 32, 4, cfg), UsageError);
  auto empty = s.dataset;
  for (auto& sp : empty.splits) sp = data::Split::test;
  EXPECT_THROW(sae::train(empty, 32, 4, fast_config(1)), UsageError);
}

TEST(Train, DivergenceRaisesNumericError) {
  const auto s = small_synth(0.01, 200);
  auto cfg = fast_config(20);
  cfg.learning_rate = 1e30;
  EXPECT_THROW(sae::train(s.dataset, 32, 4, cfg), NumericError);
}

TEST(Checkpoint, RoundTripBitExact) {
  const auto path = fs::temp_directory_path() / "saeprobe_ckpt_test.ckpt";
  const auto m = random_model(5, 15, 3, 16);
  sae::CheckpointInfo info;
  info.config = fast_config(7, 21);
  info.epoch = 7;
  info.source_id = "synthetic";
  sae::save_checkpoint(m, info, path);
  const auto back = sae::load_checkpoint(path);
  EXPECT_EQ(back.model.k, 3u);
  EXPECT_EQ(back.model.w_enc, m.w_enc);
  EXPECT_EQ(back.model.w_dec, m.w_dec);
  EXPECT_EQ(back.model.b_pre, m.b_pre);
  EXPECT_EQ(back.info.epoch, 7u);
  EXPECT_EQ(back.info.source_id, "synthetic");
  EXPECT_EQ(back.info.config.seed, 21u);
  EXPECT_EQ(back.info.config.learning_rate, 1e-3);
  EXPECT_EQ(back.info.config.batch_size, 64u);

  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  EXPECT_EQ(bytes.substr(0, 4), "SPRC");
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes.substr(0, bytes.size() - 4);
  }
  EXPECT_THROW(sae::load_checkpoint(path), PayloadLengthError);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "XXXX" << bytes.substr(4);
  }
  EXPECT_THROW(sae::load_checkpoint(path), BadMagicError);
  fs::remove(path);
}

TEST(NormalizedMse, PerfectModelIsZero) {
  // Identity SAE on 2D data embedded in d_z = 4 with +/- latents.
  sae::SaeModel m;
  m.k = 4;
  m.w_enc = sae::RowMat<float>(4, 2);
  m.w_enc << 1, 0, 0, 1, -1, 0, 0, -1;
  m.w_dec = m.w_enc.transpose();
  m.b_pre = Vec<float>::Zero(2);
  const auto rows = gaussian_rows(40, 2, 17);
  EXPECT_NEAR(sae::normalized_mse(m, rows), 0.0, 1e-10);
}
