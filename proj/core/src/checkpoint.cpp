#include "dilnas/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "dilnas/errors.hpp"

namespace dilnas {

namespace {

constexpr char kMagic[4] = {'N', 'A', 'D', 'R'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& out, uint32_t v) {
  unsigned char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), 4);
}

void write_u64(std::ostream& out, uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), 8);
}

void write_f64(std::ostream& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(out, bits);
}

void write_string(std::ostream& out, const std::string& s) {
  write_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

uint32_t read_u32(std::istream& in, const std::string& path) {
  unsigned char buf[4];
  in.read(reinterpret_cast<char*>(buf), 4);
  if (!in) throw DataError(path + ": truncated checkpoint");
  uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | buf[i];
  return v;
}

uint64_t read_u64(std::istream& in, const std::string& path) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  if (!in) throw DataError(path + ": truncated checkpoint");
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | buf[i];
  return v;
}

double read_f64(std::istream& in, const std::string& path) {
  const uint64_t bits = read_u64(in, path);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

std::string read_string(std::istream& in, const std::string& path) {
  const uint64_t len = read_u64(in, path);
  std::string s(len, '\0');
  in.read(s.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError(path + ": truncated checkpoint");
  return s;
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path + ": cannot open for writing");
  out.write(kMagic, 4);
  write_u32(out, kVersion);
  write_u64(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    write_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<uint32_t>(t.shape.size()));
    for (int64_t d : t.shape) write_u64(out, static_cast<uint64_t>(d));
    for (double v : t.data) write_f64(out, v);
  }
  write_string(out, genotype_text);
  write_string(out, config_text);
  if (!out) throw DataError(path + ": write failed");
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path + ": cannot open");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw DataError(path + ": bad checkpoint magic");
  }
  const uint32_t version = read_u32(in, path);
  if (version != kVersion) {
    throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const uint64_t count = read_u64(in, path);
  for (uint64_t i = 0; i < count; ++i) {
    const uint32_t name_len = read_u32(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw DataError(path + ": truncated checkpoint");
    const uint32_t rank = read_u32(in, path);
    Shape shape(rank);
    for (uint32_t r = 0; r < rank; ++r) shape[r] = static_cast<int64_t>(read_u64(in, path));
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.data) v = read_f64(in, path);
    ckpt.tensors.emplace_back(std::move(name), std::move(t));
  }
  ckpt.genotype_text = read_string(in, path);
  ckpt.config_text = read_string(in, path);
  return ckpt;
}

}  // namespace dilnas
