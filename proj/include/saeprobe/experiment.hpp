#pragma once

#include "saeprobe/dataset.hpp"
#include "saeprobe/features.hpp"
#include "saeprobe/probe.hpp"
#include "saeprobe/sae.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace saeprobe::experiment {

// k = ceil(s * dim). Throws UsageError unless 0 < s <= 1 and dim >= 1.
std::size_t derive_k(double s, std::size_t dim);

enum class Unit { fraction, percent };

struct F1Value {
  double value = 0.0;
  Unit unit = Unit::fraction;
};

// cell - reference; both operands must carry the same unit.
F1Value delta_f1(F1Value cell, F1Value reference);
double delta_f1(double cell_fraction, double reference_fraction);

// Splits [0, d_z) into `groups` consecutive ranges; the first d_z % groups
// ranges get one extra latent. Returns groups + 1 boundaries.
std::vector<std::size_t> group_bounds(std::size_t d_z, std::size_t groups);

// Fraction of all nonzero activations falling in each latent group.
std::vector<double> activation_density(const RowMatrixF& codes, std::size_t groups = 16);
std::vector<double> activation_density(const sae::SaeModel& model, const data::EmbeddingDataset& dataset,
                                       std::size_t groups = 16);

struct ProbeSettings {
  std::optional<double> lambda;  // default 1 / n_train_probe
  std::size_t max_iter = 3000;
  double tol = 1e-7;

  probe::FitOptions fit_options() const { return {lambda, max_iter, tol}; }
};

struct SweepConfig {
  std::vector<std::size_t> latent_ratios{2, 5, 10, 20};
  std::vector<double> sparsities{0.5, 0.25, 0.10, 0.05};
  std::vector<features::FeatureKind> feature_kinds{features::FeatureKind::full, features::FeatureKind::position,
                                                   features::FeatureKind::magnitude};
  sae::TrainConfig train;
  // Epochs for the slow-converging cells q in {2, 5}, s in {0.10, 0.05}.
  // nullopt trains every cell for train.epochs.
  std::optional<std::size_t> slow_epochs = 500;
  ProbeSettings probe;
  std::uint64_t seed = 0;
  std::size_t density_groups = 16;
  std::size_t workers = 1;

  // Throws UsageError.
  void validate(std::size_t dim) const;
  // Epoch budget for one grid cell.
  std::size_t epochs_for(std::size_t q, double s) const;
};

// Missing keys keep their defaults. Throws UsageError / FormatError.
SweepConfig sweep_config_from_json(const std::string& text);
SweepConfig load_sweep_config(const std::filesystem::path& path);
std::string sweep_config_to_json(const SweepConfig& cfg);

struct Cell {
  std::size_t q = 0;
  std::size_t d_z = 0;
  double s = 0.0;
  std::size_t k = 0;
  features::FeatureKind feature_kind = features::FeatureKind::full;
  double macro_f1 = 0.0;
  double delta_f1 = 0.0;
  double sae_final_loss = 0.0;
  double dead_latent_fraction = 0.0;

  bool operator==(const Cell&) const = default;
};

struct DensityRow {
  std::size_t q = 0;
  std::size_t d_z = 0;
  double s = 0.0;
  std::size_t k = 0;
  std::vector<double> bins;

  bool operator==(const DensityRow&) const = default;
};

struct CellFailure {
  std::size_t q = 0;
  double s = 0.0;
  std::string message;

  bool operator==(const CellFailure&) const = default;
};

struct SweepReport {
  std::string source_id;
  double reference_f1 = 0.0;
  std::vector<Cell> cells;
  std::vector<DensityRow> density;
  std::vector<CellFailure> failures;

  // Sorts cells by (q, s descending, kind), density and failures by (q, s descending).
  void sort();
  bool operator==(const SweepReport&) const = default;
};

// Macro-F1 on the test split of a probe fit on raw (standardized) vectors
// from the train_probe split.
double reference_probe(const data::EmbeddingDataset& dataset, const ProbeSettings& settings = {});

// Seed used for the SAE of grid cell (q, s) under a base seed.
std::uint64_t cell_seed(std::uint64_t base, std::size_t q, double s);

// Trains one SAE per (q, s), probes each requested feature kind and fills
// the report. With `artifact_dir`, each finished cell persists its SAE
// checkpoint and results there and is reused on later runs with the same
// settings. A failing cell is recorded in `failures` and the sweep continues.
SweepReport run_sweep(const data::EmbeddingDataset& dataset, const SweepConfig& cfg,
                      const std::optional<std::filesystem::path>& artifact_dir = std::nullopt);

enum class ReportFormat { csv, json };

// csv: cells.csv and density.csv; json: report.json. Returns written paths.
std::vector<std::filesystem::path> emit_report(const SweepReport& report, ReportFormat format,
                                               const std::filesystem::path& out_dir);

std::string cells_csv(const SweepReport& report);
std::string density_csv(const SweepReport& report);
std::string report_json(const SweepReport& report);
SweepReport report_from_json(const std::string& text);
// Parses cells.csv text back into cells (header required).
std::vector<Cell> parse_cells_csv(const std::string& text);

// Human-readable tables with F1 values as percent, two decimals.
std::string render_summary(const SweepReport& report);

}  // namespace saeprobe::experiment
