#include "cli.hpp"

#include "saeprobe/dataset.hpp"
#include "saeprobe/error.hpp"
#include "saeprobe/experiment.hpp"
#include "saeprobe/features.hpp"
#include "saeprobe/log.hpp"
#include "saeprobe/numfmt.hpp"
#include "saeprobe/probe.hpp"
#include "saeprobe/sae.hpp"
#include "saeprobe/synth.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace saeprobe::cli {
namespace {

namespace fs = std::filesystem;
using experiment::SweepConfig;

constexpr const char* kFormatsHelp = R"(File formats:
  vectors (.sprb)  "SPRB", u16 version=1, u32 n, u32 dim, n*dim float32 LE, row-major
  frames  (.sprf)  "SPRF", u16 version=1, u32 T, u32 dim, T*dim float32 LE, row-major
  labels  (.csv)   header index,label,split; label in {0,1};
                   split in {train_sae, train_probe, validation, test}
  manifest (.csv)  header file,label[,split]; one frame file per row
  meta sidecar     <vectors>.meta.json with source_id (and checkpoint/kind for features)
  checkpoint       "SPRC", u16 version=1, u32 header bytes, JSON header, then float32 LE
                   w_enc (d_z x d_in), w_dec (d_in x d_z), b_pre (d_in)
Precedence: command-line flags override the config file, which overrides defaults.
Exit codes: 0 success, 1 usage error, 2 data-format error, 3 numeric failure.)";

fs::path absolute_of(const fs::path& p) { return fs::absolute(p).lexically_normal(); }

void log_written(const fs::path& p) { log::info("wrote", {{"path", absolute_of(p).string()}}); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << text;
  log_written(path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

struct Common {
  std::uint64_t seed = 0;
  bool verbose = false;
  bool quiet = false;
};

struct GenSynthArgs {
  synth::SynthSpec spec;
  std::size_t n_train_sae = 2000, n_train_probe = 1000, n_validation = 500, n_test = 1000;
  double positive_fraction = 0.5;
  std::string mode = "position_coded";
  std::string source_id = "synthetic";
  fs::path out;
};

int run_gen_synth(GenSynthArgs& a, const Common& common) {
  a.spec.coding_mode = synth::parse_coding_mode(a.mode);
  a.spec.seed = common.seed;
  if (!(a.positive_fraction > 0.0 && a.positive_fraction < 1.0))
    throw UsageError("--positive-fraction must lie in (0, 1)");
  const auto split_counts = [&](std::size_t n) {
    const auto pos = static_cast<std::size_t>(std::llround(static_cast<double>(n) * a.positive_fraction));
    return synth::ClassCounts{n - pos, pos};
  };
  a.spec.counts[static_cast<std::size_t>(data::Split::train_sae)] = split_counts(a.n_train_sae);
  a.spec.counts[static_cast<std::size_t>(data::Split::train_probe)] = split_counts(a.n_train_probe);
  a.spec.counts[static_cast<std::size_t>(data::Split::validation)] = split_counts(a.n_validation);
  a.spec.counts[static_cast<std::size_t>(data::Split::test)] = split_counts(a.n_test);
  auto result = synth::generate(a.spec);
  result.dataset.source_id = a.source_id;
  ensure_dir(a.out);
  data::write_dataset(result.dataset, a.out / "embeddings.sprb", a.out / "labels.csv");
  synth::write_ground_truth(a.spec, result.truth, a.out / "truth.json");
  log_written(a.out / "embeddings.sprb");
  log_written(data::meta_path(a.out / "embeddings.sprb"));
  log_written(a.out / "labels.csv");
  log_written(a.out / "truth.json");
  return kOk;
}

struct PoolArgs {
  fs::path frames, manifest, out;
  std::string split = "test";
  std::string source_id = "pooled";
};

int run_pool(const PoolArgs& a, std::ostream& out) {
  if (a.frames.empty() == a.manifest.empty()) throw UsageError("pool: give exactly one of --frames or --manifest");
  if (!a.frames.empty()) {
    const auto pooled = data::mean_pool(data::read_frames(a.frames));
    if (!a.out.empty()) {
      RowMatrixF row = pooled.transpose();
      data::write_vectors(row, a.out);
      log_written(a.out);
    } else {
      for (Eigen::Index j = 0; j < pooled.size(); ++j) out << format_double(pooled(j)) << '\n';
    }
    return kOk;
  }
  if (a.out.empty()) throw UsageError("pool: --manifest requires --out DIR");
  const auto ds = data::pool_manifest(a.manifest, data::parse_split(a.split), a.source_id);
  ensure_dir(a.out);
  data::write_dataset(ds, a.out / "embeddings.sprb", a.out / "labels.csv");
  log_written(a.out / "embeddings.sprb");
  log_written(a.out / "labels.csv");
  return kOk;
}

struct TrainSaeArgs {
  fs::path data, labels, out;
  std::size_t d_z = 0, q = 0, k = 0;
  double s = 0.0;
  sae::TrainConfig cfg;
  bool split_validation = false;
};

int run_train_sae(TrainSaeArgs& a, const Common& common) {
  auto ds = data::read_dataset(a.data, a.labels);
  if (a.split_validation) ds = data::split_validation(ds, common.seed);
  const std::size_t dim = ds.dim();
  if ((a.d_z == 0) == (a.q == 0)) throw UsageError("train-sae: give exactly one of --dz or --q");
  if ((a.k == 0) == (a.s == 0.0)) throw UsageError("train-sae: give exactly one of --k or --s");
  const std::size_t d_z = a.d_z ? a.d_z : a.q * dim;
  const std::size_t k = a.k ? a.k : experiment::derive_k(a.s, dim);
  a.cfg.seed = common.seed;
  const auto result = sae::train(ds, d_z, k, a.cfg);
  ensure_dir(a.out);
  sae::save_checkpoint(result.model, {a.cfg, a.cfg.epochs, ds.source_id}, a.out / "sae.ckpt");
  log_written(a.out / "sae.ckpt");
  const nlohmann::json log_json = {{"seed", common.seed},
                                   {"d_z", d_z},
                                   {"k", k},
                                   {"initial_loss", result.log.initial_loss},
                                   {"final_loss", result.log.final_loss},
                                   {"final_dead_fraction", result.log.final_dead_fraction},
                                   {"train_loss", result.log.train_loss},
                                   {"monitor_loss", result.log.monitor_loss},
                                   {"dead_fraction", result.log.dead_fraction}};
  write_text(a.out / "train_log.json", log_json.dump(2) + "\n");
  log::info("train_done", {{"seed", std::to_string(common.seed)},
                           {"final_loss", format_double(result.log.final_loss)},
                           {"normalized_mse", format_double(sae::normalized_mse(
                                                  result.model, ds.gather(ds.rows_in(data::Split::train_sae))))}});
  return kOk;
}

struct EncodeArgs {
  fs::path checkpoint, data, out;
  std::string kind = "full";
};

int run_encode(const EncodeArgs& a) {
  const auto ckpt = sae::load_checkpoint(a.checkpoint);
  const auto vectors = data::read_vectors(a.data);
  const auto kind = features::parse_feature_kind(a.kind);
  const auto feats = features::batch_features(ckpt.model, vectors, kind);
  std::string source_id = a.data.stem().string();
  if (fs::exists(data::meta_path(a.data))) {
    const auto meta = nlohmann::json::parse(read_text(data::meta_path(a.data)));
    source_id = meta.value("source_id", source_id);
  }
  features::write_features(feats, {source_id, absolute_of(a.checkpoint).string(), kind}, a.out);
  log_written(a.out);
  log_written(data::meta_path(a.out));
  return kOk;
}

struct ProbeArgs {
  fs::path features, labels, out, probe;
  std::string split;
  double lambda = -1.0;
  std::size_t max_iter = 3000;
  double tol = 1e-7;
};

std::pair<RowMatrixD, std::vector<std::uint8_t>> split_rows(const fs::path& features, const fs::path& labels,
                                                            data::Split split) {
  const auto vectors = data::read_vectors(features);
  const auto rows = data::read_labels(labels);
  if (rows.size() != static_cast<std::size_t>(vectors.rows()))
    throw LabelCountError(labels.string() + ": " + std::to_string(rows.size()) + " label rows for " +
                          std::to_string(vectors.rows()) + " feature rows");
  std::vector<std::size_t> idx;
  std::vector<std::uint8_t> y;
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i].split == split) {
      idx.push_back(i);
      y.push_back(rows[i].label);
    }
  if (idx.empty()) throw UsageError("no rows in split '" + std::string(data::to_string(split)) + "'");
  RowMatrixD x(static_cast<Eigen::Index>(idx.size()), vectors.cols());
  for (std::size_t i = 0; i < idx.size(); ++i)
    x.row(static_cast<Eigen::Index>(i)) = vectors.row(static_cast<Eigen::Index>(idx[i])).cast<double>();
  return {std::move(x), std::move(y)};
}

int run_train_probe(const ProbeArgs& a) {
  const auto [x, y] = split_rows(a.features, a.labels, data::parse_split(a.split.empty() ? "train_probe" : a.split));
  probe::FitOptions opts;
  if (a.lambda >= 0.0) opts.lambda = a.lambda;
  opts.max_iter = a.max_iter;
  opts.tol = a.tol;
  const auto model = probe::fit(x, y, opts);
  probe::save_probe(model, a.out);
  log_written(a.out);
  log::info("probe_fit", {{"lambda", format_double(model.lambda)},
                          {"converged", model.converged ? "true" : "false"},
                          {"iterations", std::to_string(model.iterations)},
                          {"objective", format_double(model.objective)}});
  return kOk;
}

int run_eval(const ProbeArgs& a, std::ostream& out) {
  const auto model = probe::load_probe(a.probe);
  const auto [x, y] = split_rows(a.features, a.labels, data::parse_split(a.split.empty() ? "test" : a.split));
  const auto result = probe::macro_f1(probe::predict(model, x), y);
  if (!a.out.empty()) {
    probe::save_eval(result, a.out);
    log_written(a.out);
  }
  out << format_double(result.macro_f1) << '\n';
  return kOk;
}

struct SweepArgs {
  fs::path config, data, labels, out;
  std::size_t workers = 1;
  bool split_validation = false;
};

int run_sweep(const SweepArgs& a, const Common& common, const CLI::App& sub) {
  SweepConfig cfg = a.config.empty() ? SweepConfig{} : experiment::load_sweep_config(a.config);
  if (sub.count("--seed") > 0 || a.config.empty()) cfg.seed = common.seed;
  if (sub.count("--workers") > 0) cfg.workers = a.workers;
  auto ds = data::read_dataset(a.data, a.labels);
  if (a.split_validation) ds = data::split_validation(ds, cfg.seed);
  log::info("sweep_start", {{"seed", std::to_string(cfg.seed)},
                            {"workers", std::to_string(cfg.workers)},
                            {"source_id", ds.source_id},
                            {"n", std::to_string(ds.size())},
                            {"dim", std::to_string(ds.dim())}});
  ensure_dir(a.out);
  const auto report = experiment::run_sweep(ds, cfg, a.out);
  for (const auto& p : experiment::emit_report(report, experiment::ReportFormat::json, a.out)) log_written(p);
  for (const auto& p : experiment::emit_report(report, experiment::ReportFormat::csv, a.out)) log_written(p);
  write_text(a.out / "summary.md", experiment::render_summary(report));
  write_text(a.out / "sweep_config.json", experiment::sweep_config_to_json(cfg) + "\n");
  if (!report.failures.empty()) {
    log::info("sweep_failures", {{"count", std::to_string(report.failures.size())}});
    bool numeric = true;
    for (const auto& f : report.failures) numeric = numeric && f.message.find("non-finite") != std::string::npos;
    if (report.cells.empty()) return numeric ? kNumeric : kDataFormat;
  }
  return kOk;
}

struct DensityArgs {
  fs::path checkpoint, data, labels, out;
  std::size_t groups = 16;
};

int run_density(const DensityArgs& a, std::ostream& out) {
  const auto ckpt = sae::load_checkpoint(a.checkpoint);
  const auto ds = data::read_dataset(a.data, a.labels);
  const auto bins = experiment::activation_density(ckpt.model, ds, a.groups);
  std::string text = "group,density\n";
  for (std::size_t g = 0; g < bins.size(); ++g) text += std::to_string(g) + "," + format_double(bins[g]) + "\n";
  if (a.out.empty())
    out << text;
  else
    write_text(a.out, text);
  return kOk;
}

struct ReportArgs {
  fs::path in, out;
  std::string format = "csv";
};

int run_report(const ReportArgs& a, std::ostream& out) {
  const auto report = experiment::report_from_json(read_text(a.in));
  if (a.format == "summary") {
    if (a.out.empty())
      out << experiment::render_summary(report);
    else {
      ensure_dir(a.out);
      write_text(a.out / "summary.md", experiment::render_summary(report));
    }
    return kOk;
  }
  if (a.out.empty()) throw UsageError("report: --out DIR is required for csv/json");
  const auto fmt = a.format == "json" ? experiment::ReportFormat::json : experiment::ReportFormat::csv;
  for (const auto& p : experiment::emit_report(report, fmt, a.out)) log_written(p);
  return kOk;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"saeprobe: TopK sparse autoencoders and linear probes over embedding files"};
  app.footer(kFormatsHelp);
  app.require_subcommand(1);
  app.allow_extras(false);

  Common common;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", common.seed, "Random seed (default 0)");
    sub->add_flag("-v,--verbose", common.verbose, "Per-epoch debug logging");
    sub->add_flag("--quiet", common.quiet, "Suppress informational logs");
    sub->footer(kFormatsHelp);
  };

  GenSynthArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-synth", "Generate a synthetic sparse-dictionary dataset");
  gen_cmd->add_option("--dim", gen.spec.dim, "Embedding dimension")->capture_default_str();
  gen_cmd->add_option("--atoms", gen.spec.num_atoms, "Ground-truth dictionary size")->capture_default_str();
  gen_cmd->add_option("--active", gen.spec.active_per_sample, "Active atoms per sample")->capture_default_str();
  gen_cmd->add_option("--mode", gen.mode, "position_coded | magnitude_coded")->capture_default_str();
  gen_cmd->add_option("--noise", gen.spec.noise_sigma, "Additive Gaussian noise sigma")->capture_default_str();
  gen_cmd->add_option("--reserved", gen.spec.reserved_atoms, "Class-1 atom subset size (0: atoms/2)");
  gen_cmd->add_option("--scale", gen.spec.magnitude_scale, "Class-1 coefficient scale")->capture_default_str();
  gen_cmd->add_option("--n-train-sae", gen.n_train_sae)->capture_default_str();
  gen_cmd->add_option("--n-train-probe", gen.n_train_probe)->capture_default_str();
  gen_cmd->add_option("--n-validation", gen.n_validation)->capture_default_str();
  gen_cmd->add_option("--n-test", gen.n_test)->capture_default_str();
  gen_cmd->add_option("--positive-fraction", gen.positive_fraction, "Share of label-1 rows per split")
      ->capture_default_str();
  gen_cmd->add_option("--source-id", gen.source_id)->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output directory (embeddings.sprb, labels.csv, truth.json)")->required();
  add_common(gen_cmd);

  PoolArgs pool;
  auto* pool_cmd = app.add_subcommand("pool", "Mean-pool frame files into utterance vectors");
  pool_cmd->add_option("--frames", pool.frames, "Single SPRF file; prints the pooled vector");
  pool_cmd->add_option("--manifest", pool.manifest, "Manifest CSV file,label[,split]");
  pool_cmd->add_option("--split", pool.split, "Split for manifest rows without one")->capture_default_str();
  pool_cmd->add_option("--source-id", pool.source_id)->capture_default_str();
  pool_cmd->add_option("--out", pool.out, "Output vectors file (--frames) or directory (--manifest)");
  add_common(pool_cmd);

  TrainSaeArgs tsa;
  auto* tsa_cmd = app.add_subcommand("train-sae", "Train a TopK SAE on the train_sae split");
  tsa_cmd->add_option("--data", tsa.data)->required();
  tsa_cmd->add_option("--labels", tsa.labels)->required();
  tsa_cmd->add_option("--dz", tsa.d_z, "Latent size");
  tsa_cmd->add_option("--q", tsa.q, "Latent ratio, d_z = q * dim");
  tsa_cmd->add_option("--k", tsa.k, "Active latents");
  tsa_cmd->add_option("--s", tsa.s, "Relative sparsity, k = ceil(s * dim)");
  tsa_cmd->add_option("--batch-size", tsa.cfg.batch_size)->capture_default_str();
  tsa_cmd->add_option("--epochs", tsa.cfg.epochs)->capture_default_str();
  tsa_cmd->add_option("--lr", tsa.cfg.learning_rate)->capture_default_str();
  tsa_cmd->add_option("--adam-eps", tsa.cfg.adam_epsilon)->capture_default_str();
  tsa_cmd->add_option("--beta1", tsa.cfg.adam_beta1)->capture_default_str();
  tsa_cmd->add_option("--beta2", tsa.cfg.adam_beta2)->capture_default_str();
  tsa_cmd->add_flag("--split-validation", tsa.split_validation, "Halve validation rows into monitor/probe sets");
  tsa_cmd->add_option("--out", tsa.out, "Output directory (sae.ckpt, train_log.json)")->required();
  add_common(tsa_cmd);

  EncodeArgs enc;
  auto* enc_cmd = app.add_subcommand("encode", "Encode vectors into full / position / magnitude features");
  enc_cmd->add_option("--checkpoint", enc.checkpoint)->required();
  enc_cmd->add_option("--data", enc.data)->required();
  enc_cmd->add_option("--kind", enc.kind, "full | position | magnitude")->capture_default_str();
  enc_cmd->add_option("--out", enc.out, "Output features file (vectors format)")->required();
  add_common(enc_cmd);

  ProbeArgs tp;
  auto* tp_cmd = app.add_subcommand("train-probe", "Fit an L1 logistic-regression probe");
  tp_cmd->add_option("--features", tp.features)->required();
  tp_cmd->add_option("--labels", tp.labels)->required();
  tp_cmd->add_option("--split", tp.split, "Rows to fit on (default train_probe)");
  tp_cmd->add_option("--lambda", tp.lambda, "L1 strength (default 1/n)");
  tp_cmd->add_option("--max-iter", tp.max_iter)->capture_default_str();
  tp_cmd->add_option("--tol", tp.tol)->capture_default_str();
  tp_cmd->add_option("--out", tp.out, "Probe JSON")->required();
  add_common(tp_cmd);

  ProbeArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "Evaluate a probe; prints macro-F1");
  ev_cmd->add_option("--probe", ev.probe)->required();
  ev_cmd->add_option("--features", ev.features)->required();
  ev_cmd->add_option("--labels", ev.labels)->required();
  ev_cmd->add_option("--split", ev.split, "Rows to evaluate (default test)");
  ev_cmd->add_option("--out", ev.out, "Optional evaluation JSON");
  add_common(ev_cmd);

  SweepArgs sw;
  auto* sw_cmd = app.add_subcommand("sweep", "Run the (q, s) grid and write the report");
  sw_cmd->add_option("--config", sw.config, "Sweep config JSON");
  sw_cmd->add_option("--data", sw.data)->required();
  sw_cmd->add_option("--labels", sw.labels)->required();
  sw_cmd->add_option("--out", sw.out, "Report and artifact directory")->required();
  sw_cmd->add_option("--workers", sw.workers, "Concurrent cells");
  sw_cmd->add_flag("--split-validation", sw.split_validation, "Halve validation rows into monitor/probe sets");
  add_common(sw_cmd);

  DensityArgs den;
  auto* den_cmd = app.add_subcommand("density", "Activation density over ordered latent groups (test split)");
  den_cmd->add_option("--checkpoint", den.checkpoint)->required();
  den_cmd->add_option("--data", den.data)->required();
  den_cmd->add_option("--labels", den.labels)->required();
  den_cmd->add_option("--groups", den.groups)->capture_default_str();
  den_cmd->add_option("--out", den.out, "Output CSV (default stdout)");
  add_common(den_cmd);

  ReportArgs rep;
  auto* rep_cmd = app.add_subcommand("report", "Re-emit a report.json as csv, json or summary");
  rep_cmd->add_option("--in", rep.in)->required();
  rep_cmd->add_option("--format", rep.format, "csv | json | summary")
      ->check(CLI::IsMember({"csv", "json", "summary"}))
      ->capture_default_str();
  rep_cmd->add_option("--out", rep.out, "Output directory");
  add_common(rep_cmd);

  double dk_s = 0.0;
  std::size_t dk_dim = 0;
  auto* dk_cmd = app.add_subcommand("derive-k", "Print k = ceil(s * dim)");
  dk_cmd->add_option("--s", dk_s)->required();
  dk_cmd->add_option("--dim", dk_dim)->required();
  add_common(dk_cmd);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  log::set_stream(&err);
  log::set_level(common.quiet ? log::Level::quiet : common.verbose ? log::Level::debug : log::Level::info);
  CLI::App* sub = app.get_subcommands().front();
  log::info("start", {{"subcommand", sub->get_name()}, {"seed", std::to_string(common.seed)}});
  try {
    if (sub == gen_cmd) return run_gen_synth(gen, common);
    if (sub == pool_cmd) return run_pool(pool, out);
    if (sub == tsa_cmd) return run_train_sae(tsa, common);
    if (sub == enc_cmd) return run_encode(enc);
    if (sub == tp_cmd) return run_train_probe(tp);
    if (sub == ev_cmd) return run_eval(ev, out);
    if (sub == sw_cmd) return run_sweep(sw, common, *sw_cmd);
    if (sub == den_cmd) return run_density(den, out);
    if (sub == rep_cmd) return run_report(rep, out);
    if (sub == dk_cmd) {
      out << experiment::derive_k(dk_s, dk_dim) << '\n';
      return kOk;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const FormatError& e) {
    err << "data format error: " << e.what() << '\n';
    return kDataFormat;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << '\n';
    return kDataFormat;
  } catch (const nlohmann::json::exception& e) {
    err << "data format error: " << e.what() << '\n';
    return kDataFormat;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "io error: " << e.what() << '\n';
    return kDataFormat;
  }
  return kUsage;
}

}  // namespace saeprobe::cli
