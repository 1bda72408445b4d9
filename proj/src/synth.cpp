#include "saeprobe/synth.hpp"

#include "saeprobe/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>

namespace saeprobe::synth {
namespace {

std::mt19937_64 substream(std::uint64_t seed, std::uint32_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream,
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace

std::string_view to_string(CodingMode mode) {
  return mode == CodingMode::position_coded ? "position_coded" : "magnitude_coded";
}

CodingMode parse_coding_mode(std::string_view text) {
  if (text == "position_coded" || text == "position") return CodingMode::position_coded;
  if (text == "magnitude_coded" || text == "magnitude") return CodingMode::magnitude_coded;
  throw UsageError("unknown coding mode '" + std::string(text) + "'");
}

void SynthSpec::validate() const {
  if (dim == 0 || num_atoms == 0 || active_per_sample == 0)
    throw UsageError("synth: dim, num_atoms and active_per_sample must be positive");
  if (active_per_sample > num_atoms) throw UsageError("synth: active_per_sample exceeds num_atoms");
  if (!(noise_sigma >= 0.0)) throw UsageError("synth: noise_sigma must be nonnegative");
  if (!(magnitude_scale > 0.0)) throw UsageError("synth: magnitude_scale must be positive");
  if (coding_mode == CodingMode::position_coded) {
    const auto reserved = effective_reserved();
    if (reserved < active_per_sample)
      throw UsageError("synth: reserved atom subset (" + std::to_string(reserved) +
                       ") smaller than active_per_sample (" + std::to_string(active_per_sample) + ")");
    if (num_atoms - std::min(reserved, num_atoms) < active_per_sample)
      throw UsageError("synth: too few unreserved atoms for class 0");
  }
}

SynthResult generate(const SynthSpec& spec) {
  spec.validate();
  const auto dim = static_cast<Eigen::Index>(spec.dim);
  const auto m = spec.num_atoms;

  SynthResult result;
  auto& truth = result.truth;
  {
    auto rng = substream(spec.seed, 0, 0);
    std::normal_distribution<double> normal;
    truth.dictionary.resize(dim, static_cast<Eigen::Index>(m));
    for (Eigen::Index c = 0; c < truth.dictionary.cols(); ++c) {
      for (Eigen::Index r = 0; r < dim; ++r) truth.dictionary(r, c) = normal(rng);
      truth.dictionary.col(c).normalize();
    }
  }

  auto& ds = result.dataset;
  ds.source_id = "synthetic";
  for (auto split : data::kAllSplits) {
    const auto& c = spec.counts[static_cast<std::size_t>(split)];
    std::vector<std::uint8_t> labels(c.negatives, 0);
    labels.insert(labels.end(), c.positives, 1);
    auto rng = substream(spec.seed, 2, static_cast<std::uint64_t>(split));
    std::shuffle(labels.begin(), labels.end(), rng);
    ds.labels.insert(ds.labels.end(), labels.begin(), labels.end());
    ds.splits.insert(ds.splits.end(), labels.size(), split);
  }

  const std::size_t n = ds.labels.size();
  const std::size_t reserved = spec.effective_reserved();
  std::vector<std::size_t> all_atoms(m), class0_atoms, class1_atoms;
  std::iota(all_atoms.begin(), all_atoms.end(), 0);
  if (spec.coding_mode == CodingMode::position_coded) {
    class0_atoms.assign(all_atoms.begin(), all_atoms.end() - static_cast<std::ptrdiff_t>(reserved));
    class1_atoms.assign(all_atoms.end() - static_cast<std::ptrdiff_t>(reserved), all_atoms.end());
  } else {
    class0_atoms = all_atoms;
    class1_atoms = all_atoms;
  }

  ds.vectors.resize(static_cast<Eigen::Index>(n), dim);
  truth.supports.resize(n);
  truth.coefficients.resize(n);
  truth.noiseless.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = substream(spec.seed, 1, i);
    std::normal_distribution<double> normal;
    const bool positive = ds.labels[i] == 1;
    auto pool = positive ? class1_atoms : class0_atoms;
    // Partial Fisher-Yates: the first k* entries become the support.
    for (std::size_t j = 0; j < spec.active_per_sample; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, pool.size() - 1);
      std::swap(pool[j], pool[pick(rng)]);
    }
    std::vector<std::size_t> support(pool.begin(),
                                     pool.begin() + static_cast<std::ptrdiff_t>(spec.active_per_sample));
    std::sort(support.begin(), support.end());
    const double scale =
        (spec.coding_mode == CodingMode::magnitude_coded && positive) ? spec.magnitude_scale : 1.0;
    std::vector<double> coefs;
    Eigen::VectorXd u = Eigen::VectorXd::Zero(dim);
    for (auto atom : support) {
      const double a = scale * (std::abs(normal(rng)) + 0.5);
      coefs.push_back(a);
      u += a * truth.dictionary.col(static_cast<Eigen::Index>(atom));
    }
    truth.noiseless[i] = u.cast<float>();
    if (spec.noise_sigma > 0.0)
      for (Eigen::Index r = 0; r < dim; ++r) u(r) += spec.noise_sigma * normal(rng);
    ds.vectors.row(static_cast<Eigen::Index>(i)) = u.cast<float>().transpose();
    truth.supports[i] = std::move(support);
    truth.coefficients[i] = std::move(coefs);
  }
  return result;
}

RowMatrixD support_indicators(const GroundTruth& truth, std::size_t num_atoms,
                              std::span<const std::size_t> rows) {
  RowMatrixD out = RowMatrixD::Zero(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(num_atoms));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (auto atom : truth.supports[rows[i]]) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(atom)) = 1.0;
  return out;
}

RowMatrixD sorted_coefficients(const GroundTruth& truth, std::size_t active_per_sample,
                               std::span<const std::size_t> rows) {
  RowMatrixD out = RowMatrixD::Zero(static_cast<Eigen::Index>(rows.size()),
                                    static_cast<Eigen::Index>(active_per_sample));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto c = truth.coefficients[rows[i]];
    std::sort(c.begin(), c.end(), std::greater<>());
    for (std::size_t j = 0; j < c.size() && j < active_per_sample; ++j)
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = c[j];
  }
  return out;
}

void write_ground_truth(const SynthSpec& spec, const GroundTruth& truth, const std::filesystem::path& path) {
  nlohmann::json j;
  j["dim"] = spec.dim;
  j["num_atoms"] = spec.num_atoms;
  j["active_per_sample"] = spec.active_per_sample;
  j["coding_mode"] = std::string(to_string(spec.coding_mode));
  j["reserved_atoms"] = spec.effective_reserved();
  j["magnitude_scale"] = spec.magnitude_scale;
  j["noise_sigma"] = spec.noise_sigma;
  j["seed"] = spec.seed;
  auto& dict = j["dictionary"] = nlohmann::json::array();
  for (Eigen::Index r = 0; r < truth.dictionary.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(truth.dictionary.cols()));
    for (Eigen::Index c = 0; c < truth.dictionary.cols(); ++c) row[static_cast<std::size_t>(c)] = truth.dictionary(r, c);
    dict.push_back(row);
  }
  j["supports"] = truth.supports;
  j["coefficients"] = truth.coefficients;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << j.dump() << '\n';
}

}  // namespace saeprobe::synth
