#include "nmt/checkpoint.hpp"

#include <array>
#include <cmath>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "nmt/error.hpp"

namespace nmt {

namespace {

constexpr char kMagic[] = "NMTF1";
constexpr std::size_t kMagicLen = 5;
constexpr std::uint64_t kMaxRank = 16;

void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> bytes{};
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes.data(), bytes.size());
}

void put_f32(std::ostream& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  std::array<char, 4> bytes{};
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  out.write(bytes.data(), bytes.size());
}

std::uint64_t get_u64(std::istream& in, const std::filesystem::path& path) {
  std::array<unsigned char, 8> bytes{};
  if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw IoError("truncated checkpoint " + path.string());
  }
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | bytes[i];
  return v;
}

float get_f32(std::istream& in, const std::filesystem::path& path) {
  std::array<unsigned char, 4> bytes{};
  if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw IoError("truncated checkpoint " + path.string());
  }
  std::uint32_t bits = 0;
  for (int i = 3; i >= 0; --i) bits = (bits << 8) | bytes[i];
  return std::bit_cast<float>(bits);
}

}  // namespace

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  for (const auto& [name, tensor] : tensors) {
    for (Real v : tensor.data()) {
      if (!std::isfinite(static_cast<float>(v))) {
        throw NumericError("tensor " + name + " holds a value that is not a finite 32-bit float");
      }
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kMagic, kMagicLen);
  put_u64(out, tensors.size());
  for (const auto& [name, tensor] : tensors) {
    put_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(out, tensor.rank());
    for (std::size_t e : tensor.shape()) put_u64(out, e);
    for (Real v : tensor.data()) put_f32(out, static_cast<float>(v));
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

std::vector<NamedTensor> load_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[kMagicLen];
  if (!in.read(magic, kMagicLen) || std::memcmp(magic, kMagic, kMagicLen) != 0) {
    throw IoError(path.string() + " is not an NMTF1 checkpoint");
  }
  const std::uint64_t count = get_u64(in, path);
  std::vector<NamedTensor> tensors;
  for (std::uint64_t t = 0; t < count; ++t) {
    const std::uint64_t name_len = get_u64(in, path);
    if (name_len > (1u << 16)) throw IoError("corrupt tensor name in " + path.string());
    std::string name(name_len, '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name_len))) {
      throw IoError("truncated checkpoint " + path.string());
    }
    const std::uint64_t rank = get_u64(in, path);
    if (rank == 0 || rank > kMaxRank) throw IoError("corrupt rank for tensor " + name);
    Shape shape(rank);
    for (auto& e : shape) e = get_u64(in, path);
    std::vector<Real> data(shape_numel(shape));
    for (auto& v : data) v = get_f32(in, path);
    tensors.push_back({std::move(name), Tensor::from(std::move(shape), std::move(data))});
  }
  return tensors;
}

}  // namespace nmt
