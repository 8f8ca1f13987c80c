#include "kd/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace kd {

namespace {

constexpr char kMagic[8] = {'K', 'D', 'C', 'K', 'P', 'T', '0', '1'};

template <class T>
void write_le(std::ostream& os, T v) {
  // Little-endian host assumed (x86/arm64); bytes written as stored.
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ValueError("truncated checkpoint");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::map<std::string, Tensor>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValueError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, sizeof(kMagic));
  write_le<uint32_t>(os, static_cast<uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    write_le<uint16_t>(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_le<uint8_t>(os, 1);  // f64
    write_le<uint8_t>(os, static_cast<uint8_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i)
      write_le<uint32_t>(os, static_cast<uint32_t>(t.dim(i)));
    os.write(reinterpret_cast<const char*>(t.values().data()),
             static_cast<std::streamsize>(t.values().size() * sizeof(double)));
  }
  if (!os) throw ValueError("failed writing checkpoint: " + path);
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValueError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw ValueError("bad checkpoint magic in " + path);
  const uint32_t count = read_le<uint32_t>(is);
  std::map<std::string, Tensor> out;
  for (uint32_t e = 0; e < count; ++e) {
    const uint16_t name_len = read_le<uint16_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const uint8_t dtype = read_le<uint8_t>(is);
    if (dtype > 1)
      throw ValueError("unknown dtype " + std::to_string(dtype) + " in " + path);
    const uint8_t rank = read_le<uint8_t>(is);
    Shape shape(rank);
    for (uint8_t i = 0; i < rank; ++i)
      shape[i] = static_cast<int>(read_le<uint32_t>(is));
    const int64_t n = shape_numel(shape);
    std::vector<double> values(static_cast<size_t>(n));
    if (dtype == 1) {
      is.read(reinterpret_cast<char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(double)));
    } else {
      std::vector<float> f(static_cast<size_t>(n));
      is.read(reinterpret_cast<char*>(f.data()),
              static_cast<std::streamsize>(f.size() * sizeof(float)));
      for (size_t i = 0; i < f.size(); ++i) values[i] = f[i];
    }
    if (!is) throw ValueError("truncated checkpoint: " + path);
    out.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return out;
}

void load_checkpoint_into(const std::string& path,
                          std::map<std::string, Tensor>& params) {
  auto loaded = load_checkpoint(path);
  if (loaded.size() != params.size())
    throw ConfigError("checkpoint " + path + " has " +
                      std::to_string(loaded.size()) + " entries, expected " +
                      std::to_string(params.size()));
  for (auto& [name, t] : params) {
    auto it = loaded.find(name);
    if (it == loaded.end())
      throw ConfigError("checkpoint " + path + " missing parameter " + name);
    if (it->second.shape() != t.shape())
      throw ConfigError("checkpoint parameter " + name + " has shape " +
                        shape_str(it->second.shape()) + ", expected " +
                        shape_str(t.shape()));
    t.values() = it->second.values();
  }
}

}  // namespace kd
