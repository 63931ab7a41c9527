#include <cstring>
#include <filesystem>

#include "fcbgan/data_io/data_io.hpp"
#include "json.hpp"

namespace fcbgan {

namespace {

constexpr char kMagic[] = "FCBGANCK";
constexpr std::size_t kMagicLen = 8;

template <class U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

template <class U>
U take(const std::string& in, std::size_t& pos) {
  if (in.size() < pos + sizeof(U)) throw IoError("checkpoint truncated");
  U v;
  std::memcpy(&v, in.data() + pos, sizeof(U));
  pos += sizeof(U);
  return v;
}

void check_entry(const Tensor& have, const Tensor& want, const std::string& key) {
  if (have.shape() != want.shape() || have.dtype() != want.dtype()) {
    throw IoError("checkpoint entry '" + key + "' is " + shape_str(have.shape()) + " " + dtype_name(have.dtype()) +
                  ", module expects " + shape_str(want.shape()) + " " + dtype_name(want.dtype()));
  }
}

}  // namespace

const std::string& Checkpoint::get_meta(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw IoError("checkpoint has no metadata '" + key + "'");
  return it->second;
}

const Tensor& Checkpoint::get_tensor(const std::string& key) const {
  auto it = tensors.find(key);
  if (it == tensors.end()) throw IoError("checkpoint has no tensor '" + key + "'");
  return it->second;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["meta"] = ckpt.meta;
  auto& list = manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    const auto bytes = static_cast<std::uint64_t>(t.numel()) * (t.dtype() == DType::f32 ? 4 : 8);
    list.push_back({{"name", name}, {"dtype", dtype_name(t.dtype())}, {"shape", t.shape()}, {"offset", offset},
                    {"bytes", bytes}});
    offset += bytes;
  }
  const std::string text = manifest.dump();

  std::string out(kMagic, kMagicLen);
  put<std::uint32_t>(out, ckpt.version);
  put<std::uint64_t>(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : ckpt.tensors) {
    dispatch(t.dtype(), [&]<class T>() {
      auto d = t.data<T>();
      out.append(reinterpret_cast<const char*>(d.data()), d.size_bytes());
    });
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < kMagicLen || bytes.compare(0, kMagicLen, kMagic) != 0) throw IoError("not a checkpoint (bad magic)");
  std::size_t pos = kMagicLen;
  Checkpoint ckpt;
  ckpt.version = take<std::uint32_t>(bytes, pos);
  if (ckpt.version != Checkpoint::kVersion) {
    throw CheckpointVersionError("checkpoint format version " + std::to_string(ckpt.version) + ", this build reads " +
                                 std::to_string(Checkpoint::kVersion));
  }
  const auto len = take<std::uint64_t>(bytes, pos);
  if (bytes.size() - pos < len) throw IoError("checkpoint truncated");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(pos, len));
    pos += len;
    ckpt.meta = manifest.at("meta").get<std::map<std::string, std::string>>();
    for (const auto& e : manifest.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto dt = e.at("dtype").get<std::string>();
      DType dtype;
      if (dt == "f32") {
        dtype = DType::f32;
      } else if (dt == "f64") {
        dtype = DType::f64;
      } else {
        throw IoError("checkpoint tensor '" + name + "' has dtype " + dt);
      }
      Tensor t = Tensor::uninitialized(e.at("shape").get<Shape>(), dtype);
      const auto off = e.at("offset").get<std::uint64_t>();
      dispatch(dtype, [&]<class T>() {
        auto d = t.data<T>();
        if (e.at("bytes").get<std::uint64_t>() != d.size_bytes() || bytes.size() - pos < off + d.size_bytes()) {
          throw IoError("checkpoint tensor '" + name + "' payload out of range");
        }
        std::memcpy(d.data(), bytes.data() + pos + off, d.size_bytes());
      });
      ckpt.tensors.emplace(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad checkpoint manifest: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw IoError(std::string("bad checkpoint manifest: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const std::string tmp = path + ".tmp";
  write_file(tmp, serialize_checkpoint(ckpt));
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move checkpoint into '" + path + "'");
  }
}

Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path)); }

void export_module(const Module& module, const std::string& prefix, Checkpoint& ckpt) {
  for (const auto& np : module.named_parameters()) {
    const std::string key = prefix + np.name;
    ckpt.tensors[key] = np.param->value();
    if (const auto& sn = np.param->spectral()) {
      ckpt.tensors[key + ".sn_u"] = sn->u;
      ckpt.tensors[key + ".sn_v"] = sn->v;
    }
  }
  for (const auto& ns : module.named_stats()) {
    const std::string key = prefix + ns.name;
    ckpt.tensors[key + ".running_mean"] = ns.stats->running_mean;
    ckpt.tensors[key + ".running_var"] = ns.stats->running_var;
    ckpt.meta[key + ".initialized"] = ns.stats->initialized ? "1" : "0";
  }
}

void import_module(Module& module, const std::string& prefix, const Checkpoint& ckpt) {
  auto load = [&](Tensor& dst, const std::string& key) {
    const Tensor& src = ckpt.get_tensor(key);
    check_entry(src, dst, key);
    dst = src;
  };
  // Validate everything before touching the module.
  for (const auto& np : module.named_parameters()) {
    const std::string key = prefix + np.name;
    check_entry(ckpt.get_tensor(key), np.param->value(), key);
    if (const auto& sn = np.param->spectral()) {
      check_entry(ckpt.get_tensor(key + ".sn_u"), sn->u, key + ".sn_u");
      check_entry(ckpt.get_tensor(key + ".sn_v"), sn->v, key + ".sn_v");
    }
  }
  for (const auto& ns : module.named_stats()) {
    const std::string key = prefix + ns.name;
    check_entry(ckpt.get_tensor(key + ".running_mean"), ns.stats->running_mean, key + ".running_mean");
    check_entry(ckpt.get_tensor(key + ".running_var"), ns.stats->running_var, key + ".running_var");
    ckpt.get_meta(key + ".initialized");
  }
  for (const auto& np : module.named_parameters()) {
    const std::string key = prefix + np.name;
    load(np.param->mutable_value(), key);
    if (auto& sn = np.param->spectral()) {
      load(sn->u, key + ".sn_u");
      load(sn->v, key + ".sn_v");
    }
  }
  for (const auto& ns : module.named_stats()) {
    const std::string key = prefix + ns.name;
    load(ns.stats->running_mean, key + ".running_mean");
    load(ns.stats->running_var, key + ".running_var");
    ns.stats->initialized = ckpt.get_meta(key + ".initialized") == "1";
  }
}

}  // namespace fcbgan
