// Binary checkpoint: "SVOS", u32 version, u32 length + JSON header, tensor
// records (u32 name length, name, u32 rank, u32 dims, f32 values; all little
// endian) and a trailing CRC32 of everything before it.

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <sstream>

#include "svos/error.hpp"
#include "svos/training.hpp"

namespace svos {

namespace {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'S', 'V', 'O', 'S'};
const std::string kAdamM = "adam.m/";
const std::string kAdamV = "adam.v/";

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = crc32(crc, bytes.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

class Writer {
 public:
  void u32(std::uint32_t v) { raw(&v, 4); }
  void f32(float v) { raw(&v, 4); }
  void bytes(const std::string& s) { raw(s.data(), s.size()); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  void tensor(const std::string& name, const Tensor<float>& t) {
    u32(static_cast<std::uint32_t>(name.size()));
    bytes(name);
    u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) u32(static_cast<std::uint32_t>(d));
    raw(t.data().data(), t.size() * sizeof(float));
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  std::size_t remaining() const { return bytes_.size() - pos_; }
  void need(std::size_t n) const {
    if (remaining() < n) throw FormatError("checkpoint is truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::pair<std::string, Tensor<float>> tensor() {
    auto name = str(u32());
    const auto rank = u32();
    if (rank > 8) throw FormatError("tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(u32());
    const auto n = shape_numel(shape);
    need(n * sizeof(float));
    std::vector<float> values(n);
    std::memcpy(values.data(), bytes_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
    return {std::move(name), Tensor<float>(std::move(shape), std::move(values))};
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

json model_to_json(const ModelConfig& m) {
  return {{"preset", m.preset},
          {"input_h", m.input_h},
          {"input_w", m.input_w},
          {"encoder_channels", m.encoder_channels},
          {"convs_per_stage", m.convs_per_stage},
          {"fc_channels", m.fc_channels},
          {"lstm_channels", m.lstm_channels},
          {"decoder_channels", m.decoder_channels},
          {"init_variant", std::string(to_string(m.init_variant))},
          {"encoder_variant", std::string(to_string(m.encoder_variant))}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.preset = j.at("preset").get<std::string>();
  m.input_h = j.at("input_h").get<int>();
  m.input_w = j.at("input_w").get<int>();
  m.encoder_channels = j.at("encoder_channels").get<std::vector<int>>();
  m.convs_per_stage = j.at("convs_per_stage").get<std::vector<int>>();
  m.fc_channels = j.at("fc_channels").get<int>();
  m.lstm_channels = j.at("lstm_channels").get<int>();
  m.decoder_channels = j.at("decoder_channels").get<std::vector<int>>();
  m.init_variant = parse_init_variant(j.at("init_variant").get<std::string>());
  m.encoder_variant = parse_encoder_variant(j.at("encoder_variant").get<std::string>());
  m.validate();
  return m;
}

}  // namespace

std::string crc32_hex(std::span<const std::uint8_t> bytes) {
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << crc32_of(bytes);
  return os.str();
}

std::string tensors_digest(const NamedTensors<float>& tensors) {
  Writer w;
  for (const auto& [name, t] : tensors) w.tensor(name, t);
  return crc32_hex(w.out);
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  json header;
  header["model"] = model_to_json(ck.model);
  header["progress"] = {{"step", ck.progress.step},
                        {"epoch", ck.progress.epoch},
                        {"stage", std::string(to_string(ck.progress.stage))},
                        {"curriculum", ck.progress.curriculum},
                        {"stage_switch_step", ck.progress.stage_switch_step},
                        {"curriculum_switch_step", ck.progress.curriculum_switch_step}};
  // Reals go through their bit patterns so the round trip is exact.
  auto& history = header["progress"]["plateau_history_bits"] = json::array();
  for (double v : ck.progress.plateau_history) history.push_back(std::bit_cast<std::uint64_t>(v));
  header["optimizer"] = {{"lr_bits", std::bit_cast<std::uint64_t>(ck.optimizer.options.lr)},
                         {"beta1_bits", std::bit_cast<std::uint64_t>(ck.optimizer.options.beta1)},
                         {"beta2_bits", std::bit_cast<std::uint64_t>(ck.optimizer.options.beta2)},
                         {"epsilon_bits", std::bit_cast<std::uint64_t>(ck.optimizer.options.epsilon)},
                         {"lr", ck.optimizer.options.lr},
                         {"step", ck.optimizer.step}};
  header["rng"] = ck.rng_state;
  header["train_config"] = ck.train_config;
  const std::string text = header.dump();

  Writer w;
  w.raw(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
  for (const auto& [name, t] : ck.params.named()) w.tensor(name, t);
  for (const auto& [name, m] : ck.optimizer.moments) {
    w.tensor(kAdamM + name, m.m);
    w.tensor(kAdamV + name, m.v);
  }
  w.u32(crc32_of(w.out));
  return std::move(w.out);
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  if (bytes.size() < 16) throw FormatError("checkpoint is truncated");
  Reader head(bytes.subspan(4));
  const auto version = head.u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const auto header_len = head.u32();
  if (head.remaining() < static_cast<std::size_t>(header_len) + 4) throw FormatError("checkpoint is truncated");

  const auto body = bytes.first(bytes.size() - 4);
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 4);
  if (crc32_of(body) != stored) throw ChecksumError("checkpoint checksum mismatch");

  Reader r(body.subspan(12));
  json header;
  try {
    header = json::parse(r.str(header_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }

  Checkpoint ck;
  try {
    ck.model = model_from_json(header.at("model"));
    const auto& p = header.at("progress");
    ck.progress.step = p.at("step").get<long>();
    ck.progress.epoch = p.at("epoch").get<long>();
    ck.progress.stage = parse_train_stage(p.at("stage").get<std::string>());
    ck.progress.curriculum = p.at("curriculum").get<bool>();
    ck.progress.stage_switch_step = p.at("stage_switch_step").get<long>();
    ck.progress.curriculum_switch_step = p.at("curriculum_switch_step").get<long>();
    for (const auto& bits : p.at("plateau_history_bits"))
      ck.progress.plateau_history.push_back(std::bit_cast<double>(bits.get<std::uint64_t>()));
    const auto& o = header.at("optimizer");
    ck.optimizer.options.lr = std::bit_cast<double>(o.at("lr_bits").get<std::uint64_t>());
    ck.optimizer.options.beta1 = std::bit_cast<double>(o.at("beta1_bits").get<std::uint64_t>());
    ck.optimizer.options.beta2 = std::bit_cast<double>(o.at("beta2_bits").get<std::uint64_t>());
    ck.optimizer.options.epsilon = std::bit_cast<double>(o.at("epsilon_bits").get<std::uint64_t>());
    ck.optimizer.step = o.at("step").get<std::uint64_t>();
    ck.rng_state = header.at("rng").get<std::string>();
    ck.train_config = header.at("train_config").get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }

  while (r.remaining() > 0) {
    auto [name, t] = r.tensor();
    if (name.starts_with(kAdamM)) {
      ck.optimizer.moments[name.substr(kAdamM.size())].m = std::move(t);
    } else if (name.starts_with(kAdamV)) {
      ck.optimizer.moments[name.substr(kAdamV.size())].v = std::move(t);
    } else {
      t.set_requires_grad(true);
      ck.params.add(std::move(name), std::move(t));
    }
  }
  for (const auto& [name, m] : ck.optimizer.moments)
    if (!m.m.defined() || !m.v.defined()) throw FormatError("optimizer state for '" + name + "' is incomplete");

  // Throws if the tensors do not match the recorded configuration.
  (void)SegmentationModel<float>(ck.model, ck.params);
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ck);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint '" + path.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_preset) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Checkpoint ck;
  try {
    ck = parse_checkpoint(bytes);
  } catch (const FormatError& e) {
    // Keeps the exception's dynamic type (ChecksumError stays a ChecksumError).
    if (dynamic_cast<const ChecksumError*>(&e)) throw ChecksumError(path.string() + ": " + e.what());
    throw FormatError(path.string() + ": " + e.what());
  }
  if (!expected_preset.empty()) {
    const auto want = ModelConfig::from_preset(expected_preset).preset;
    if (ck.model.preset != want)
      throw ConfigError("checkpoint '" + path.string() + "' was trained with preset '" + ck.model.preset +
                        "', not '" + want + "'");
  }
  return ck;
}

}  // namespace svos
