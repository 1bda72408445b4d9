#include "saeprobe/experiment.hpp"

#include "saeprobe/error.hpp"
#include "saeprobe/log.hpp"
#include "saeprobe/numfmt.hpp"

#include <json.hpp>

#include <atomic>
#include <bit>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

namespace saeprobe::experiment {
namespace {

using nlohmann::json;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

bool same_s(double a, double b) { return std::abs(a - b) < 1e-12; }

// FNV-1a over vector bits, labels and splits; identifies the dataset a
// persisted cell was computed from.
std::string dataset_fingerprint(const data::EmbeddingDataset& ds) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  mix(ds.size());
  mix(ds.dim());
  for (Eigen::Index i = 0; i < ds.vectors.size(); ++i) mix(std::bit_cast<std::uint32_t>(ds.vectors.data()[i]));
  for (std::size_t i = 0; i < ds.size(); ++i) mix((std::uint64_t{ds.labels[i]} << 8) | static_cast<std::uint64_t>(ds.splits[i]));
  std::ostringstream out;
  out << std::hex << h;
  return out.str();
}

json train_json(const sae::TrainConfig& t) {
  return {{"batch_size", t.batch_size},       {"epochs", t.epochs},         {"learning_rate", t.learning_rate},
          {"adam_epsilon", t.adam_epsilon},   {"adam_beta1", t.adam_beta1}, {"adam_beta2", t.adam_beta2},
          {"seed", t.seed}};
}

json probe_json(const ProbeSettings& p) {
  json j = {{"max_iter", p.max_iter}, {"tol", p.tol}};
  j["lambda"] = p.lambda ? json(*p.lambda) : json(nullptr);
  return j;
}

std::string cell_dir_name(std::size_t q, double s) {
  return "q" + std::to_string(q) + "_s" + format_double(s);
}

json cell_to_json(const Cell& c) {
  return {{"q", c.q},
          {"d_z", c.d_z},
          {"s", c.s},
          {"k", c.k},
          {"feature_kind", std::string(features::to_string(c.feature_kind))},
          {"macro_f1", c.macro_f1},
          {"delta_f1", c.delta_f1},
          {"sae_final_loss", c.sae_final_loss},
          {"dead_latent_fraction", c.dead_latent_fraction}};
}

Cell cell_from_json(const json& j) {
  Cell c;
  c.q = j.at("q").get<std::size_t>();
  c.d_z = j.at("d_z").get<std::size_t>();
  c.s = j.at("s").get<double>();
  c.k = j.at("k").get<std::size_t>();
  c.feature_kind = features::parse_feature_kind(j.at("feature_kind").get<std::string>());
  c.macro_f1 = j.at("macro_f1").get<double>();
  c.delta_f1 = j.at("delta_f1").get<double>();
  c.sae_final_loss = j.at("sae_final_loss").get<double>();
  c.dead_latent_fraction = j.at("dead_latent_fraction").get<double>();
  return c;
}

json density_to_json(const DensityRow& d) {
  return {{"q", d.q}, {"d_z", d.d_z}, {"s", d.s}, {"k", d.k}, {"bins", d.bins}};
}

DensityRow density_from_json(const json& j) {
  return {j.at("q").get<std::size_t>(), j.at("d_z").get<std::size_t>(), j.at("s").get<double>(),
          j.at("k").get<std::size_t>(), j.at("bins").get<std::vector<double>>()};
}

struct CellOutcome {
  std::vector<Cell> cells;
  std::optional<DensityRow> density;
  std::optional<CellFailure> failure;
};

RowMatrixD to_double(const RowMatrixF& m) { return m.cast<double>(); }

CellOutcome run_cell(const data::EmbeddingDataset& ds, const SweepConfig& cfg, std::size_t q, double s,
                     double reference_f1, const std::string& data_fp,
                     const std::optional<std::filesystem::path>& artifact_dir) {
  CellOutcome outcome;
  const std::size_t dim = ds.dim();
  const std::size_t d_z = q * dim;
  const std::size_t k = std::min(derive_k(s, dim), d_z);

  sae::TrainConfig tc = cfg.train;
  tc.epochs = cfg.epochs_for(q, s);
  tc.seed = cell_seed(cfg.seed, q, s);

  json kinds = json::array();
  for (auto kind : cfg.feature_kinds) kinds.push_back(std::string(features::to_string(kind)));
  const json fingerprint = {{"dataset", data_fp},        {"q", q},
                            {"s", s},                    {"d_z", d_z},
                            {"k", k},                    {"train", train_json(tc)},
                            {"probe", probe_json(cfg.probe)}, {"feature_kinds", kinds},
                            {"density_groups", cfg.density_groups}, {"reference_f1", reference_f1}};

  std::optional<std::filesystem::path> cell_dir;
  if (artifact_dir) {
    cell_dir = *artifact_dir / "cells" / cell_dir_name(q, s);
    const auto result_path = *cell_dir / "cell.json";
    if (std::filesystem::exists(result_path)) {
      try {
        std::ifstream in(result_path);
        const auto saved = json::parse(in);
        if (saved.at("fingerprint") == fingerprint) {
          for (const auto& c : saved.at("cells")) outcome.cells.push_back(cell_from_json(c));
          outcome.density = density_from_json(saved.at("density"));
          log::info("cell_reused", {{"q", std::to_string(q)}, {"s", format_double(s)}});
          return outcome;
        }
      } catch (const std::exception& e) {
        log::info("cell_artifact_ignored", {{"path", result_path.string()}, {"reason", e.what()}});
      }
    }
  }

  try {
    log::info("cell_start", {{"q", std::to_string(q)},
                             {"s", format_double(s)},
                             {"d_z", std::to_string(d_z)},
                             {"k", std::to_string(k)},
                             {"epochs", std::to_string(tc.epochs)},
                             {"seed", std::to_string(tc.seed)}});
    auto trained = sae::train(ds, d_z, k, tc);
    const auto& model = trained.model;

    const auto probe_rows = ds.rows_in(data::Split::train_probe);
    const auto test_rows = ds.rows_in(data::Split::test);
    const auto probe_labels = ds.gather_labels(probe_rows);
    const auto test_labels = ds.gather_labels(test_rows);
    const RowMatrixF probe_codes = sae::encode_rows(model, ds.gather(probe_rows));
    const RowMatrixF test_codes = sae::encode_rows(model, ds.gather(test_rows));

    for (auto kind : cfg.feature_kinds) {
      const auto train_x = to_double(features::views_from_codes(probe_codes, k, kind));
      const auto test_x = to_double(features::views_from_codes(test_codes, k, kind));
      const auto fitted = probe::fit(train_x, probe_labels, cfg.probe.fit_options());
      const auto eval = probe::macro_f1(probe::predict(fitted, test_x), test_labels);
      Cell c;
      c.q = q;
      c.d_z = d_z;
      c.s = s;
      c.k = k;
      c.feature_kind = kind;
      c.macro_f1 = eval.macro_f1;
      c.delta_f1 = delta_f1(eval.macro_f1, reference_f1);
      c.sae_final_loss = trained.log.final_loss;
      c.dead_latent_fraction = trained.log.final_dead_fraction;
      outcome.cells.push_back(c);
    }
    outcome.density = DensityRow{q, d_z, s, k, activation_density(test_codes, cfg.density_groups)};

    if (cell_dir) {
      std::filesystem::create_directories(*cell_dir);
      sae::save_checkpoint(model, {tc, tc.epochs, ds.source_id}, *cell_dir / "sae.ckpt");
      json saved = {{"fingerprint", fingerprint}, {"cells", json::array()}, {"density", density_to_json(*outcome.density)}};
      for (const auto& c : outcome.cells) saved["cells"].push_back(cell_to_json(c));
      const auto tmp = *cell_dir / "cell.json.tmp";
      {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << saved.dump(2) << '\n';
      }
      std::filesystem::rename(tmp, *cell_dir / "cell.json");
    }
    log::info("cell_done", {{"q", std::to_string(q)},
                            {"s", format_double(s)},
                            {"final_loss", format_double(trained.log.final_loss)},
                            {"dead_fraction", format_double(trained.log.final_dead_fraction)}});
  } catch (const std::exception& e) {
    outcome.cells.clear();
    outcome.density.reset();
    outcome.failure = CellFailure{q, s, e.what()};
    log::info("cell_failed", {{"q", std::to_string(q)}, {"s", format_double(s)}, {"error", e.what()}});
  }
  return outcome;
}

}  // namespace

std::size_t derive_k(double s, std::size_t dim) {
  if (!(s > 0.0 && s <= 1.0)) throw UsageError("derive_k: s=" + format_double(s) + " outside (0, 1]");
  if (dim < 1) throw UsageError("derive_k: dim must be >= 1");
  // The small offset keeps products such as 0.1 * 10 from rounding up.
  const double product = s * static_cast<double>(dim);
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(product - 1e-9)));
}

F1Value delta_f1(F1Value cell, F1Value reference) {
  if (cell.unit != reference.unit) throw UsageError("delta_f1: cell and reference F1 use different units");
  return {cell.value - reference.value, cell.unit};
}

double delta_f1(double cell_fraction, double reference_fraction) {
  return delta_f1(F1Value{cell_fraction, Unit::fraction}, F1Value{reference_fraction, Unit::fraction}).value;
}

std::vector<std::size_t> group_bounds(std::size_t d_z, std::size_t groups) {
  if (groups < 1) throw UsageError("density: groups must be >= 1");
  if (groups > d_z) throw UsageError("density: more groups than latents");
  std::vector<std::size_t> bounds{0};
  const std::size_t base = d_z / groups, extra = d_z % groups;
  for (std::size_t g = 0; g < groups; ++g) bounds.push_back(bounds.back() + base + (g < extra ? 1 : 0));
  return bounds;
}

std::vector<double> activation_density(const RowMatrixF& codes, std::size_t groups) {
  if (codes.rows() == 0) throw UsageError("density: no rows to count activations over");
  const auto bounds = group_bounds(static_cast<std::size_t>(codes.cols()), groups);
  std::vector<std::size_t> counts(groups, 0);
  std::size_t total = 0;
  for (std::size_t g = 0; g < groups; ++g) {
    const auto first = static_cast<Eigen::Index>(bounds[g]);
    const auto width = static_cast<Eigen::Index>(bounds[g + 1] - bounds[g]);
    counts[g] = static_cast<std::size_t>((codes.middleCols(first, width).array() != 0.0f).count());
    total += counts[g];
  }
  if (total == 0) throw NumericError("density: no latent ever activated");
  std::vector<double> bins(groups);
  for (std::size_t g = 0; g < groups; ++g) bins[g] = static_cast<double>(counts[g]) / static_cast<double>(total);
  return bins;
}

std::vector<double> activation_density(const sae::SaeModel& model, const data::EmbeddingDataset& dataset,
                                       std::size_t groups) {
  const auto rows = dataset.rows_in(data::Split::test);
  if (rows.empty()) throw UsageError("density: test split is empty");
  return activation_density(sae::encode_rows(model, dataset.gather(rows)), groups);
}

void SweepConfig::validate(std::size_t dim) const {
  if (latent_ratios.empty() || sparsities.empty()) throw UsageError("sweep: empty grid");
  if (feature_kinds.empty()) throw UsageError("sweep: no feature kinds requested");
  for (auto q : latent_ratios)
    if (q < 2) throw UsageError("sweep: latent ratio q=" + std::to_string(q) + " must give d_z > dim (q >= 2)");
  for (auto s : sparsities)
    if (!(s > 0.0 && s <= 1.0)) throw UsageError("sweep: sparsity " + format_double(s) + " outside (0, 1]");
  if (dim < 1) throw UsageError("sweep: dataset dim must be >= 1");
  if (workers < 1) throw UsageError("sweep: workers must be >= 1");
  if (density_groups < 1) throw UsageError("sweep: density_groups must be >= 1");
  train.validate();
}

std::size_t SweepConfig::epochs_for(std::size_t q, double s) const {
  const bool slow_q = q == 2 || q == 5;
  const bool slow_s = same_s(s, 0.10) || same_s(s, 0.05);
  return (slow_epochs && slow_q && slow_s) ? *slow_epochs : train.epochs;
}

SweepConfig sweep_config_from_json(const std::string& text) {
  SweepConfig cfg;
  try {
    const auto j = json::parse(text);
    if (!j.is_object()) throw FormatError("sweep config must be a JSON object");
    for (const auto& [key, _] : j.items()) {
      static const std::vector<std::string> known = {"latent_ratios", "sparsities", "feature_kinds", "train",
                                                     "slow_epochs",   "probe",      "seed",          "density_groups",
                                                     "workers"};
      if (std::find(known.begin(), known.end(), key) == known.end())
        throw UsageError("sweep config: unknown key '" + key + "'");
    }
    if (j.contains("latent_ratios")) cfg.latent_ratios = j["latent_ratios"].get<std::vector<std::size_t>>();
    if (j.contains("sparsities")) cfg.sparsities = j["sparsities"].get<std::vector<double>>();
    if (j.contains("feature_kinds")) {
      cfg.feature_kinds.clear();
      for (const auto& k : j["feature_kinds"]) cfg.feature_kinds.push_back(features::parse_feature_kind(k.get<std::string>()));
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
      cfg.train.epochs = t.value("epochs", cfg.train.epochs);
      cfg.train.learning_rate = t.value("learning_rate", cfg.train.learning_rate);
      cfg.train.adam_epsilon = t.value("adam_epsilon", cfg.train.adam_epsilon);
      cfg.train.adam_beta1 = t.value("adam_beta1", cfg.train.adam_beta1);
      cfg.train.adam_beta2 = t.value("adam_beta2", cfg.train.adam_beta2);
    }
    if (j.contains("slow_epochs")) {
      if (j["slow_epochs"].is_null())
        cfg.slow_epochs.reset();
      else
        cfg.slow_epochs = j["slow_epochs"].get<std::size_t>();
    }
    if (j.contains("probe")) {
      const auto& p = j["probe"];
      if (p.contains("lambda") && !p["lambda"].is_null()) cfg.probe.lambda = p["lambda"].get<double>();
      cfg.probe.max_iter = p.value("max_iter", cfg.probe.max_iter);
      cfg.probe.tol = p.value("tol", cfg.probe.tol);
    }
    cfg.seed = j.value("seed", cfg.seed);
    cfg.density_groups = j.value("density_groups", cfg.density_groups);
    cfg.workers = j.value("workers", cfg.workers);
  } catch (const json::exception& e) {
    throw FormatError(std::string("sweep config: ") + e.what());
  }
  return cfg;
}

SweepConfig load_sweep_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return sweep_config_from_json(buf.str());
}

std::string sweep_config_to_json(const SweepConfig& cfg) {
  json kinds = json::array();
  for (auto k : cfg.feature_kinds) kinds.push_back(std::string(features::to_string(k)));
  json t = train_json(cfg.train);
  t.erase("seed");
  json j = {{"latent_ratios", cfg.latent_ratios},
            {"sparsities", cfg.sparsities},
            {"feature_kinds", kinds},
            {"train", t},
            {"probe", probe_json(cfg.probe)},
            {"seed", cfg.seed},
            {"density_groups", cfg.density_groups},
            {"workers", cfg.workers}};
  j["slow_epochs"] = cfg.slow_epochs ? json(*cfg.slow_epochs) : json(nullptr);
  return j.dump(2);
}

double reference_probe(const data::EmbeddingDataset& dataset, const ProbeSettings& settings) {
  const auto train_rows = dataset.rows_in(data::Split::train_probe);
  const auto test_rows = dataset.rows_in(data::Split::test);
  if (train_rows.empty() || test_rows.empty()) throw UsageError("reference_probe: train_probe and test splits must be non-empty");
  const auto fitted = probe::fit(to_double(dataset.gather(train_rows)), dataset.gather_labels(train_rows),
                                 settings.fit_options());
  return probe::macro_f1(probe::predict(fitted, to_double(dataset.gather(test_rows))), dataset.gather_labels(test_rows))
      .macro_f1;
}

std::uint64_t cell_seed(std::uint64_t base, std::size_t q, double s) {
  return splitmix64(splitmix64(base) ^ splitmix64(q) ^ std::bit_cast<std::uint64_t>(s));
}

void SweepReport::sort() {
  const auto key = [](std::size_t q, double s) { return std::pair{q, -s}; };
  std::sort(cells.begin(), cells.end(), [&](const Cell& a, const Cell& b) {
    return std::tuple{key(a.q, a.s), static_cast<int>(a.feature_kind)} <
           std::tuple{key(b.q, b.s), static_cast<int>(b.feature_kind)};
  });
  std::sort(density.begin(), density.end(),
            [&](const DensityRow& a, const DensityRow& b) { return key(a.q, a.s) < key(b.q, b.s); });
  std::sort(failures.begin(), failures.end(),
            [&](const CellFailure& a, const CellFailure& b) { return key(a.q, a.s) < key(b.q, b.s); });
}

SweepReport run_sweep(const data::EmbeddingDataset& dataset, const SweepConfig& cfg,
                      const std::optional<std::filesystem::path>& artifact_dir) {
  dataset.validate();
  cfg.validate(dataset.dim());
  if (dataset.count(data::Split::train_sae) == 0) throw UsageError("sweep: train_sae split is empty");
  if (dataset.count(data::Split::train_probe) == 0 || dataset.count(data::Split::test) == 0)
    throw UsageError("sweep: train_probe and test splits must be non-empty");

  SweepReport report;
  report.source_id = dataset.source_id;
  report.reference_f1 = reference_probe(dataset, cfg.probe);
  log::info("reference_probe", {{"source_id", dataset.source_id}, {"macro_f1", format_double(report.reference_f1)}});
  const auto data_fp = dataset_fingerprint(dataset);

  std::vector<std::pair<std::size_t, double>> grid;
  for (auto q : cfg.latent_ratios)
    for (auto s : cfg.sparsities) grid.emplace_back(q, s);
  std::vector<CellOutcome> outcomes(grid.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < grid.size(); i = next++)
      outcomes[i] = run_cell(dataset, cfg, grid[i].first, grid[i].second, report.reference_f1, data_fp, artifact_dir);
  };
  const std::size_t n_threads = std::min(cfg.workers, grid.size());
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }

  for (auto& o : outcomes) {
    report.cells.insert(report.cells.end(), o.cells.begin(), o.cells.end());
    if (o.density) report.density.push_back(std::move(*o.density));
    if (o.failure) report.failures.push_back(std::move(*o.failure));
  }
  report.sort();
  return report;
}

std::string report_json(const SweepReport& input) {
  SweepReport report = input;
  report.sort();
  json j = {{"source_id", report.source_id},
            {"reference_f1", report.reference_f1},
            {"cells", json::array()},
            {"density", json::array()},
            {"failures", json::array()}};
  for (const auto& c : report.cells) j["cells"].push_back(cell_to_json(c));
  for (const auto& d : report.density) j["density"].push_back(density_to_json(d));
  for (const auto& f : report.failures) j["failures"].push_back({{"q", f.q}, {"s", f.s}, {"message", f.message}});
  return j.dump(2) + "\n";
}

SweepReport report_from_json(const std::string& text) {
  try {
    const auto j = json::parse(text);
    SweepReport r;
    r.source_id = j.at("source_id").get<std::string>();
    r.reference_f1 = j.at("reference_f1").get<double>();
    for (const auto& c : j.at("cells")) r.cells.push_back(cell_from_json(c));
    for (const auto& d : j.at("density")) r.density.push_back(density_from_json(d));
    for (const auto& f : j.value("failures", json::array()))
      r.failures.push_back({f.at("q").get<std::size_t>(), f.at("s").get<double>(), f.at("message").get<std::string>()});
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("report json: ") + e.what());
  }
}

}  // namespace saeprobe::experiment
