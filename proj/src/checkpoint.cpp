#include "thinseg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "thinseg/image_io.hpp"

namespace thinseg {

namespace {

constexpr const char* kMagic = "THINSEG-CHECKPOINT v1\n";

template <class T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "float32" : "float64";
}

template <class T>
void append(std::string& blob, const std::vector<T>& v) {
  const auto* p = reinterpret_cast<const char*>(v.data());
  blob.append(p, p + v.size() * sizeof(T));
}

template <class Src, class T>
void read_into(const char* src, std::vector<T>& dst) {
  if constexpr (std::is_same_v<Src, T>) {
    std::memcpy(dst.data(), src, dst.size() * sizeof(T));
  } else {
    for (std::size_t i = 0; i < dst.size(); ++i) {
      Src s;
      std::memcpy(&s, src + i * sizeof(Src), sizeof(Src));
      dst[i] = static_cast<T>(s);
    }
  }
}

}  // namespace

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt) {
  const auto specs = parameter_layout(ckpt.params.config);
  if (specs.size() != ckpt.params.tensors.size()) throw Error("save_checkpoint: parameters do not match config");
  nlohmann::json header;
  header["config"] = ckpt.params.config.to_json();
  header["fingerprint"] = ckpt.params.config.fingerprint();
  header["dtype"] = dtype_name<T>();
  header["epoch"] = ckpt.epoch;
  header["best_val_dice"] = ckpt.best_val_dice;
  header["metadata"] = ckpt.metadata;
  header["optimizer"] = {{"step", ckpt.optimizer.step}, {"has_moments", !ckpt.optimizer.m.empty()}};

  std::string blob;
  nlohmann::json table = nlohmann::json::array();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    table.push_back({{"name", specs[i].name}, {"shape", ckpt.params.tensors[i].shape}});
    append(blob, ckpt.params.tensors[i].values);
  }
  if (!ckpt.optimizer.m.empty()) {
    for (std::size_t i = 0; i < specs.size(); ++i) {
      append(blob, ckpt.optimizer.m[i].values);
      append(blob, ckpt.optimizer.v[i].values);
    }
  }
  header["tensors"] = table;
  header["blob_bytes"] = blob.size();

  const std::string h = header.dump();
  write_atomic(path, [&](const std::filesystem::path& tmp) {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + tmp.string());
    out.write(kMagic, static_cast<std::streamsize>(std::strlen(kMagic)));
    unsigned char len[8];
    std::uint64_t n = h.size();
    for (int i = 0; i < 8; ++i) len[i] = static_cast<unsigned char>(n >> (8 * i));
    out.write(reinterpret_cast<const char*>(len), 8);
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw Error("failed writing checkpoint " + tmp.string());
  });
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string data = ss.str();
  const std::size_t ml = std::strlen(kMagic);
  if (data.size() < ml + 8 || data.compare(0, ml, kMagic) != 0) throw Error(path.string() + " is not a checkpoint");
  std::uint64_t n = 0;
  for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[ml + i])) << (8 * i);
  if (data.size() < ml + 8 + n) throw Error("checkpoint header truncated: " + path.string());
  const auto header = nlohmann::json::parse(data.substr(ml + 8, n));
  const char* blob = data.data() + ml + 8 + n;
  const std::size_t blob_size = data.size() - ml - 8 - n;

  Checkpoint<T> ck;
  ck.params.config = UNetConfig::from_json(header.at("config"));
  if (header.at("fingerprint").get<std::string>() != ck.params.config.fingerprint()) {
    throw Error("checkpoint fingerprint does not match its architecture config");
  }
  ck.epoch = header.value("epoch", 0);
  ck.best_val_dice = header.value("best_val_dice", 0.0);
  ck.metadata = header.value("metadata", nlohmann::json::object());
  ck.optimizer.step = header.at("optimizer").value("step", std::int64_t{0});
  const bool moments = header.at("optimizer").value("has_moments", false);
  const std::string dtype = header.at("dtype").get<std::string>();
  const std::size_t elem = dtype == "float32" ? 4 : dtype == "float64" ? 8 : 0;
  if (elem == 0) throw Error("checkpoint has unknown dtype " + dtype);

  const auto specs = parameter_layout(ck.params.config);
  const auto& table = header.at("tensors");
  if (table.size() != specs.size()) throw Error("checkpoint tensor table does not match architecture");
  std::size_t total = 0;
  for (const auto& s : specs) {
    std::size_t count = 1;
    for (int d : s.shape) count *= static_cast<std::size_t>(d);
    total += count;
  }
  if (blob_size != total * elem * (moments ? 3 : 1)) throw Error("checkpoint blob size mismatch: " + path.string());

  std::size_t off = 0;
  auto next = [&](const std::vector<int>& shape) {
    Tensor<T> t(shape);
    if (elem == 4) {
      read_into<float>(blob + off, t.values);
    } else {
      read_into<double>(blob + off, t.values);
    }
    off += t.size() * elem;
    return t;
  };
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (table[i].at("name").get<std::string>() != specs[i].name ||
        table[i].at("shape").get<std::vector<int>>() != specs[i].shape) {
      throw Error("checkpoint tensor '" + specs[i].name + "' does not match architecture");
    }
    ck.params.tensors.push_back(next(specs[i].shape));
  }
  if (moments) {
    for (const auto& s : specs) {
      ck.optimizer.m.push_back(next(s.shape));
      ck.optimizer.v.push_back(next(s.shape));
    }
  }
  return ck;
}

template void save_checkpoint<float>(const std::filesystem::path&, const Checkpoint<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, const Checkpoint<double>&);
template Checkpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace thinseg
