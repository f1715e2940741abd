#include "mtkd/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <type_traits>

#include "mtkd/errors.hpp"

namespace mtkd {

namespace {

constexpr char kMagic[4] = {'M', 'T', 'K', 'D'};

template <typename T>
void append(std::vector<unsigned char>& buf, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.insert(buf.end(), raw, raw + sizeof(T));
}

class Reader {
 public:
  Reader(const unsigned char* data, std::size_t n) : data_(data), n_(n) {}

  template <typename T>
  T take(const char* field) {
    if (pos_ + sizeof(T) > n_)
      throw IntegrityError(std::string("checkpoint truncated while reading ") + field);
    T v;
    std::memcpy(&v, data_ + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string take_string(std::size_t len, const char* field) {
    if (pos_ + len > n_)
      throw IntegrityError(std::string("checkpoint truncated while reading ") + field);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), len);
    pos_ += len;
    return s;
  }

  std::size_t pos() const { return pos_; }

 private:
  const unsigned char* data_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t fnv1a64_bytes(const unsigned char* data, std::size_t n, std::uint64_t h) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
  std::vector<unsigned char> payload;
  append(payload, kCheckpointVersion);
  append(payload, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    append(payload, static_cast<std::uint32_t>(name.size()));
    payload.insert(payload.end(), name.begin(), name.end());
    append(payload, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t e : t.shape) append(payload, static_cast<std::uint64_t>(e));
    for (float v : t.values) append(payload, v);
  }
  const std::uint64_t checksum = fnv1a64_bytes(payload.data(), payload.size());

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IntegrityError("cannot open " + path + " for writing");
  f.write(kMagic, sizeof(kMagic));
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size()));
  f.write(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
  if (!f) throw IntegrityError("write failed for " + path);
}

NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IntegrityError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof(kMagic) + sizeof(std::uint64_t))
    throw IntegrityError("checkpoint truncated: shorter than header + checksum");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw IntegrityError("checkpoint magic mismatch (not an MTKD file)");

  const std::size_t payload_len = bytes.size() - sizeof(kMagic) - sizeof(std::uint64_t);
  const unsigned char* payload = bytes.data() + sizeof(kMagic);
  std::uint64_t stored;
  std::memcpy(&stored, payload + payload_len, sizeof(stored));
  const std::uint64_t actual = fnv1a64_bytes(payload, payload_len);
  if (stored != actual) throw IntegrityError("checkpoint checksum mismatch");

  Reader r(payload, payload_len);
  const auto version = r.take<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw IntegrityError("checkpoint version " + std::to_string(version) +
                         " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");
  const auto count = r.take<std::uint32_t>("tensor count");
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.take<std::uint32_t>("name length");
    std::string name = r.take_string(name_len, "name");
    const auto rank = r.take<std::uint32_t>("rank");
    std::vector<std::size_t> shape;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto e = r.take<std::uint64_t>("extent");
      shape.push_back(static_cast<std::size_t>(e));
      numel *= static_cast<std::size_t>(e);
    }
    std::vector<float> values(numel);
    for (std::size_t k = 0; k < numel; ++k) values[k] = r.take<float>("tensor data");
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (r.pos() != payload_len)
    throw IntegrityError("checkpoint has trailing bytes after the tensor table");
  return out;
}

}  // namespace mtkd
