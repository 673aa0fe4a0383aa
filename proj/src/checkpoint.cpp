#include "slm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "slm/error.hpp"

namespace slm {

namespace {

constexpr char kMagic[4] = {'S', 'L', 'M', 'C'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError("checkpoint truncated");
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(ckpt.config.size()));
  out += ckpt.config;
  put_u32(out, static_cast<std::uint32_t>(ckpt.parameters.size()));
  for (const auto& rec : ckpt.parameters) {
    std::size_t count = 1;
    for (auto d : rec.shape) count *= d;
    if (count != rec.values.size() || rec.shape.empty() || rec.shape.size() > 2) {
      throw PreconditionError("checkpoint record '" + rec.name + "' has inconsistent shape");
    }
    put_u32(out, static_cast<std::uint32_t>(rec.name.size()));
    out += rec.name;
    put_u32(out, static_cast<std::uint32_t>(rec.shape.size()));
    for (auto d : rec.shape) put_u32(out, d);
    for (float f : rec.values) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.raw(4) != std::string(kMagic, 4)) throw DataError("not a checkpoint (bad magic)");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.config = in.raw(in.u32());
  const std::uint32_t records = in.u32();
  for (std::uint32_t r = 0; r < records; ++r) {
    ParameterRecord rec;
    rec.name = in.raw(in.u32());
    const std::uint32_t rank = in.u32();
    if (rank == 0 || rank > 2) throw DataError("checkpoint record '" + rec.name + "' has bad rank");
    std::size_t count = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      rec.shape.push_back(in.u32());
      count *= rec.shape.back();
    }
    if (count > bytes.size()) throw DataError("checkpoint truncated");
    rec.values.resize(count);
    for (auto& f : rec.values) f = std::bit_cast<float>(in.u32());
    ckpt.parameters.push_back(std::move(rec));
  }
  if (!in.done()) throw DataError("trailing bytes after checkpoint records");
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint(buf.str());
}

}  // namespace slm
