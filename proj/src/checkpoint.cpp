#include "cbqa/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cbqa/digest.hpp"
#include "cbqa/error.hpp"

namespace cbqa {

namespace {

constexpr std::string_view kMagic = "CBQA-CKPT v1";

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw IoError("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

void put_tensor(std::string& out, const std::string& name, const Matrix<float>& t) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rows()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.cols()));
  for (Eigen::Index i = 0; i < t.size(); ++i) put_le<float>(out, t.data()[i]);
}

std::pair<std::string, Matrix<float>> get_tensor(std::istream& in) {
  const auto name_len = get_le<std::uint32_t>(in);
  if (name_len > 4096) throw IoError("checkpoint: implausible tensor name length");
  std::string name(name_len, '\0');
  if (!in.read(name.data(), name_len)) throw IoError("checkpoint truncated");
  const auto rows = get_le<std::uint32_t>(in);
  const auto cols = get_le<std::uint32_t>(in);
  Matrix<float> t(rows, cols);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = get_le<float>(in);
  return {std::move(name), std::move(t)};
}

std::string encode_tensors(const Parameters<float>& params) {
  std::string out;
  for (const auto& [name, t] : params.tensors) put_tensor(out, name, t);
  return out;
}

}  // namespace

std::string parameter_digest(const Parameters<float>& params) { return sha256_hex(encode_tensors(params)); }

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  Parameters<float> optimizer_tensors;
  if (ckpt.optimizer) {
    for (const auto& [name, slot] : ckpt.optimizer->slots) {
      if (slot.factored) {
        optimizer_tensors.tensors.emplace(name + "#row", Matrix<float>(slot.row));
        optimizer_tensors.tensors.emplace(name + "#col", Matrix<float>(slot.col));
      } else {
        optimizer_tensors.tensors.emplace(name + "#full", slot.full);
      }
    }
  }
  nlohmann::json header;
  header["config"] = ckpt.config.to_json();
  header["meta"] = ckpt.meta;
  header["param_tensors"] = ckpt.params.tensors.size();
  header["optimizer_tensors"] = optimizer_tensors.tensors.size();
  header["optimizer_step"] = ckpt.optimizer ? ckpt.optimizer->step : 0;
  header["has_optimizer"] = ckpt.optimizer.has_value();

  std::string blob(kMagic);
  blob += '\n';
  blob += header.dump();
  blob += '\n';
  blob += encode_tensors(ckpt.params);
  blob += encode_tensors(optimizer_tensors);

  const auto tmp = std::filesystem::path(path).concat(".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kMagic) throw IoError(path.string() + ": not a CBQA-CKPT v1 file");
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path.string() + ": bad checkpoint header: " + e.what());
  }

  Checkpoint ckpt;
  ckpt.config = ModelConfig::from_json(header.at("config"));
  ckpt.meta = header.value("meta", nlohmann::json::object());
  const auto n_params = header.at("param_tensors").get<std::size_t>();
  for (std::size_t i = 0; i < n_params; ++i) ckpt.params.tensors.insert(get_tensor(in));
  if (header.value("has_optimizer", false)) {
    AdafactorState<float> state = init_state(ckpt.params);
    state.step = header.at("optimizer_step").get<std::uint64_t>();
    const auto n_opt = header.at("optimizer_tensors").get<std::size_t>();
    for (std::size_t i = 0; i < n_opt; ++i) {
      auto [name, t] = get_tensor(in);
      const auto hash = name.rfind('#');
      if (hash == std::string::npos) throw IoError("checkpoint: bad optimizer tensor name " + name);
      auto& slot = state.slots.at(name.substr(0, hash));
      const auto kind = name.substr(hash + 1);
      if (kind == "row") {
        slot.row = t.col(0);
      } else if (kind == "col") {
        slot.col = t.col(0);
      } else {
        slot.full = std::move(t);
      }
    }
    ckpt.optimizer = std::move(state);
  }
  return ckpt;
}

}  // namespace cbqa
