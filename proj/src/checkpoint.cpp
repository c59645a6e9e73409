#include "cosinegate/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace cosinegate {

namespace {

constexpr char kMagic[4] = {'C', 'G', 'V', '1'};

void write_u32(std::ofstream& f, uint32_t v) {
  // Fields are little-endian regardless of host.
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  f.write(b, 4);
}

uint32_t read_u32(std::ifstream& f, const std::string& path) {
  unsigned char b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4)) {
    throw std::runtime_error("truncated checkpoint " + path);
  }
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<NamedTensor<float>>& tensors) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path);
  f.write(kMagic, 4);
  write_u32(f, static_cast<uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    write_u32(f, static_cast<uint32_t>(t.name.size()));
    f.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    const Shape& s = t.tensor.shape();
    write_u32(f, static_cast<uint32_t>(s.size()));
    for (int d : s) write_u32(f, static_cast<uint32_t>(d));
    static_assert(sizeof(float) == 4);
    f.write(reinterpret_cast<const char*>(t.tensor.data()),
            static_cast<std::streamsize>(t.tensor.size() * 4));
  }
  if (!f) throw std::runtime_error("write failed for checkpoint " + path);
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("bad checkpoint magic in " + path);
  }
  uint32_t count = read_u32(f, path);
  std::map<std::string, Tensor> out;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = read_u32(f, path);
    std::string name(name_len, '\0');
    if (!f.read(name.data(), name_len)) {
      throw std::runtime_error("truncated checkpoint " + path);
    }
    uint32_t rank = read_u32(f, path);
    Shape shape(rank);
    int64_t n = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      shape[d] = static_cast<int>(read_u32(f, path));
      n *= shape[d];
    }
    std::vector<float> data(static_cast<size_t>(n));
    if (!f.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(n * 4))) {
      throw std::runtime_error("truncated checkpoint " + path);
    }
    if (out.count(name)) {
      throw std::runtime_error("duplicate tensor '" + name + "' in " + path);
    }
    out.emplace(name, Tensor::from_data(shape, std::move(data)));
  }
  return out;
}

void load_checkpoint_into(const std::string& path,
                          std::vector<NamedTensor<float>>& tensors) {
  auto loaded = load_checkpoint(path);
  if (loaded.size() != tensors.size()) {
    throw std::runtime_error("checkpoint " + path + " holds " +
                             std::to_string(loaded.size()) + " tensors, model expects " +
                             std::to_string(tensors.size()));
  }
  for (auto& t : tensors) {
    auto it = loaded.find(t.name);
    if (it == loaded.end()) {
      throw std::runtime_error("checkpoint " + path + " is missing tensor '" + t.name +
                               "'");
    }
    if (it->second.shape() != t.tensor.shape()) {
      throw std::runtime_error("checkpoint tensor '" + t.name + "' has shape " +
                               shape_str(it->second.shape()) + ", model expects " +
                               shape_str(t.tensor.shape()));
    }
    std::copy(it->second.data(), it->second.data() + it->second.size(), t.tensor.data());
  }
}

}  // namespace cosinegate
