#include <cstring>
#include <iterator>
#include <fstream>

#include "gcalab/backbone.hpp"
#include "gcalab/error.hpp"

namespace gcalab {

namespace {

constexpr char kMagic[8] = {'G', 'C', 'A', 'L', 'A', 'B', 'C', 'K'};

// Fixed-width little-endian encoding; the host byte order is not assumed.
template <typename T>
void put(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& path) : b_(bytes), path_(path) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw ParseError(path_ + ": truncated checkpoint at byte " + std::to_string(pos_));
  }
  const std::string& b_;
  const std::string& path_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string head(kMagic, sizeof(kMagic));
  put<std::uint32_t>(head, ckpt.version);
  put<std::uint32_t>(head, static_cast<std::uint32_t>(ckpt.metadata.size()));
  head += ckpt.metadata;
  put<std::uint32_t>(head, static_cast<std::uint32_t>(ckpt.arrays.size()));
  std::uint64_t offset = 0;
  for (const auto& a : ckpt.arrays) {
    if (shape_numel(a.shape) != a.values.size()) throw ContractError("checkpoint array '" + a.name + "' shape/size mismatch");
    put<std::uint32_t>(head, static_cast<std::uint32_t>(a.name.size()));
    head += a.name;
    put<std::uint32_t>(head, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) put<std::uint64_t>(head, d);
    put<std::uint64_t>(head, offset);
    offset += 8 * a.values.size();
  }
  for (const auto& a : ckpt.arrays) {
    for (double v : a.values) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      put<std::uint64_t>(head, bits);
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  if (!out) throw Error("failed writing checkpoint '" + path + "'");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(bytes, path);
  if (r.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) throw ParseError(path + ": not a checkpoint file");
  Checkpoint ck;
  ck.version = r.get<std::uint32_t>();
  if (ck.version != kCheckpointVersion) {
    throw ParseError(path + ": unsupported checkpoint version " + std::to_string(ck.version));
  }
  ck.metadata = r.bytes(r.get<std::uint32_t>());
  const auto n = r.get<std::uint32_t>();
  std::vector<std::uint64_t> offsets;
  for (std::uint32_t i = 0; i < n; ++i) {
    NamedArray a;
    a.name = r.bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) a.shape.push_back(r.get<std::uint64_t>());
    offsets.push_back(r.get<std::uint64_t>());
    ck.arrays.push_back(std::move(a));
  }
  const std::size_t payload = r.pos();
  for (std::size_t i = 0; i < ck.arrays.size(); ++i) {
    auto& a = ck.arrays[i];
    const std::size_t count = shape_numel(a.shape);
    const std::size_t start = payload + offsets[i];
    if (start + 8 * count > bytes.size()) throw ParseError(path + ": payload for '" + a.name + "' out of bounds");
    a.values.resize(count);
    for (std::size_t k = 0; k < count; ++k) {
      std::uint64_t bits = 0;
      for (std::size_t j = 0; j < 8; ++j) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[start + 8 * k + j])) << (8 * j);
      std::memcpy(&a.values[k], &bits, sizeof(bits));
    }
  }
  return ck;
}

Checkpoint make_checkpoint(const Model& model, std::string metadata) {
  Checkpoint ck;
  ck.version = kCheckpointVersion;
  ck.metadata = std::move(metadata);
  for (const auto& p : model.params().all()) {
    const auto v = p.tensor.data();
    ck.arrays.push_back({p.name, p.tensor.shape(), std::vector<double>(v.begin(), v.end())});
  }
  return ck;
}

void load_checkpoint_into(Model& model, const Checkpoint& ckpt) {
  auto& params = model.params().all();
  if (params.size() != ckpt.arrays.size()) {
    throw ContractError("checkpoint has " + std::to_string(ckpt.arrays.size()) + " arrays, model has " +
                        std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& a = ckpt.arrays[i];
    if (a.name != params[i].name || a.shape != params[i].tensor.shape()) {
      throw ContractError("checkpoint entry '" + a.name + "' " + shape_str(a.shape) + " does not match parameter '" +
                          params[i].name + "' " + shape_str(params[i].tensor.shape()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor.mutable_data();
    std::copy(ckpt.arrays[i].values.begin(), ckpt.arrays[i].values.end(), dst.begin());
  }
}

}  // namespace gcalab
