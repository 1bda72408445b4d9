#include "binio.hpp"
#include "saeprobe/sae.hpp"

#include <json.hpp>

#include <fstream>

namespace saeprobe::sae {
namespace {

constexpr char kMagic[4] = {'S', 'P', 'R', 'C'};
constexpr std::uint16_t kVersion = 1;

nlohmann::json config_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},     {"epochs", c.epochs},
          {"learning_rate", c.learning_rate}, {"adam_epsilon", c.adam_epsilon},
          {"adam_beta1", c.adam_beta1},     {"adam_beta2", c.adam_beta2},
          {"seed", c.seed}};
}

TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.adam_epsilon = j.at("adam_epsilon").get<double>();
  c.adam_beta1 = j.at("adam_beta1").get<double>();
  c.adam_beta2 = j.at("adam_beta2").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void save_checkpoint(const SaeModel& model, const CheckpointInfo& info, const std::filesystem::path& path) {
  model.validate();
  const nlohmann::json header = {{"format", "saeprobe-sae"},
                                 {"d_in", model.d_in()},
                                 {"d_z", model.d_z()},
                                 {"k", model.k},
                                 {"seed", info.config.seed},
                                 {"epoch", info.epoch},
                                 {"source_id", info.source_id},
                                 {"config", config_json(info.config)}};
  const auto text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(kMagic, 4);
  detail::put_u16(out, kVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  detail::put_f32(out, std::span<const float>(model.w_enc.data(), static_cast<std::size_t>(model.w_enc.size())));
  const RowMat<float> dec = model.w_dec;
  detail::put_f32(out, std::span<const float>(dec.data(), static_cast<std::size_t>(dec.size())));
  detail::put_f32(out, std::span<const float>(model.b_pre.data(), static_cast<std::size_t>(model.b_pre.size())));
  if (!out) throw IoError("write failed: " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  const auto what = path.string();
  char magic[4];
  if (!detail::get_bytes(in, magic, 4) || !std::equal(magic, magic + 4, kMagic))
    throw BadMagicError(what + ": expected magic SPRC");
  if (const auto v = detail::get_u16(in, what); v != kVersion)
    throw FormatError(what + ": unsupported checkpoint version " + std::to_string(v));
  const auto header_len = detail::get_u32(in, what);
  std::string text(header_len, '\0');
  if (!detail::get_bytes(in, text.data(), text.size())) throw FormatError(what + ": truncated header");

  LoadedCheckpoint out;
  std::size_t d_in = 0, d_z = 0;
  try {
    const auto header = nlohmann::json::parse(text);
    if (header.at("format") != "saeprobe-sae") throw FormatError(what + ": not an SAE checkpoint");
    d_in = header.at("d_in").get<std::size_t>();
    d_z = header.at("d_z").get<std::size_t>();
    out.model.k = header.at("k").get<std::size_t>();
    out.info.epoch = header.at("epoch").get<std::size_t>();
    out.info.source_id = header.value("source_id", "");
    out.info.config = config_from_json(header.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": bad header: " + e.what());
  }
  out.model.w_enc.resize(static_cast<Eigen::Index>(d_z), static_cast<Eigen::Index>(d_in));
  RowMat<float> dec(static_cast<Eigen::Index>(d_in), static_cast<Eigen::Index>(d_z));
  out.model.b_pre.resize(static_cast<Eigen::Index>(d_in));
  const bool ok =
      detail::get_f32(in, std::span<float>(out.model.w_enc.data(), static_cast<std::size_t>(out.model.w_enc.size()))) &&
      detail::get_f32(in, std::span<float>(dec.data(), static_cast<std::size_t>(dec.size()))) &&
      detail::get_f32(in, std::span<float>(out.model.b_pre.data(), static_cast<std::size_t>(out.model.b_pre.size())));
  if (!ok) throw PayloadLengthError(what + ": weight payload shorter than header dims");
  if (!detail::at_eof(in)) throw PayloadLengthError(what + ": trailing bytes after weights");
  out.model.w_dec = dec;
  out.model.validate();
  return out;
}

}  // namespace saeprobe::sae
