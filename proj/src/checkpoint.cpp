#include "msdm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

#include "msdm/errors.hpp"
#include "msdm/rng.hpp"

namespace msdm {

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get_le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("checkpoint truncated");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const NamedTensors& tensors) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put_le<std::uint64_t>(out, e);
    for (double v : t.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

NamedTensors decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.get_string(4) != std::string(kCheckpointMagic, 4)) throw IoError("bad checkpoint magic");
  const auto version = r.get_le<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get_le<std::uint32_t>();
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get_le<std::uint32_t>();
    std::string name = r.get_string(name_len);
    const auto rank = r.get_le<std::uint32_t>();
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(r.get_le<std::uint64_t>());
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = std::bit_cast<double>(r.get_le<std::uint64_t>());
    out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw IoError("trailing bytes after checkpoint payload");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  const auto bytes = encode_checkpoint(tensors);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void assign_by_name(NamedTensors& target, const NamedTensors& source) {
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : source) by_name[name] = &t;
  for (auto& [name, t] : target) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("checkpoint is missing tensor '" + name + "'");
    if (it->second->shape() != t.shape()) {
      throw DimensionError("checkpoint tensor '" + name + "' has shape " +
                           shape_str(it->second->shape()) + ", expected " + shape_str(t.shape()));
    }
    auto dst = t.mutable_data();
    const auto src = it->second->data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

std::uint64_t digest(const NamedTensors& tensors) {
  const auto bytes = encode_checkpoint(tensors);
  return hash_string(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

}  // namespace msdm
