#include "taskroute/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "taskroute/errors.hpp"

namespace taskroute {

namespace {

constexpr char kMagic[8] = {'T', 'R', 'C', 'K', 'P', 'T', '\r', '\n'};

class Writer {
 public:
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

  std::uint64_t le(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(le(4, what)); }
  std::uint64_t u64(const char* what) { return le(8, what); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw ParseError(std::string("checkpoint truncated while reading ") + what + ": need " + std::to_string(n) +
                           " bytes, " + std::to_string(in_.size() - pos_) + " left",
                       pos_);
    }
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

}  // namespace

const CheckpointRecord* Checkpoint::find(const std::string& name) const {
  for (const auto& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.metadata.size()));
  w.bytes(ckpt.metadata.data(), ckpt.metadata.size());
  w.u32(static_cast<std::uint32_t>(ckpt.records.size()));
  for (const auto& r : ckpt.records) {
    if (shape_numel(r.shape) != r.values.size()) {
      throw UsageError("checkpoint record '" + r.name + "' has " + std::to_string(r.values.size()) +
                       " values for shape " + shape_str(r.shape));
    }
    w.u32(static_cast<std::uint32_t>(r.name.size()));
    w.bytes(r.name.data(), r.name.size());
    w.u32(static_cast<std::uint32_t>(r.dtype));
    w.u32(static_cast<std::uint32_t>(r.shape.size()));
    for (const auto d : r.shape) w.u64(d);
    for (const double v : r.values) {
      if (r.dtype == CheckpointRecord::DType::f32) {
        w.f32(static_cast<float>(v));
      } else {
        w.f64(v);
      }
    }
  }
  return w.take();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const std::string magic = r.str(sizeof(kMagic), "magic");
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) throw ParseError("not a checkpoint: bad magic", 0);
  const auto version_at = r.pos();
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  Checkpoint ckpt;
  const auto meta_len = r.u32("metadata length");
  ckpt.metadata = r.str(meta_len, "metadata");
  const auto count = r.u32("record count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointRecord rec;
    rec.name = r.str(r.u32("name length"), "record name");
    const auto dtype_at = r.pos();
    const auto dtype = r.u32("dtype");
    if (dtype != 1 && dtype != 2) throw ParseError("unknown dtype code " + std::to_string(dtype), dtype_at);
    rec.dtype = static_cast<CheckpointRecord::DType>(dtype);
    const auto rank = r.u32("rank");
    if (rank > 8) throw ParseError("implausible rank " + std::to_string(rank), r.pos() - 4);
    for (std::uint32_t k = 0; k < rank; ++k) rec.shape.push_back(static_cast<std::size_t>(r.u64("dimension")));
    const std::size_t n = shape_numel(rec.shape);
    const std::size_t width = dtype == 1 ? 4 : 8;
    if (n > (bytes.size() - r.pos()) / width) r.need(n * width, "record values");
    rec.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      rec.values[k] = dtype == 1 ? static_cast<double>(std::bit_cast<float>(r.u32("value")))
                                 : std::bit_cast<double>(r.u64("value"));
    }
    ckpt.records.push_back(std::move(rec));
  }
  if (!r.done()) throw ParseError("trailing bytes after last record", r.pos());
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw LoadError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace taskroute
