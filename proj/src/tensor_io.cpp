#include "xt2c/tensor_io.hpp"

#include "xt2c/errors.hpp"

#include <bit>
#include <istream>
#include <ostream>

namespace xt2c {

namespace {

template <typename U>
void put(std::ostream& out, U v) {
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U get(std::istream& in) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw FormatError("unexpected end of file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void write_u32(std::ostream& out, std::uint32_t v) { put(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { put(out, v); }
std::uint32_t read_u32(std::istream& in) { return get<std::uint32_t>(in); }
std::uint64_t read_u64(std::istream& in) { return get<std::uint64_t>(in); }

void write_string(std::ostream& out, const std::string& s) {
  write_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in, std::uint64_t max_length) {
  const std::uint64_t n = read_u64(in);
  if (n > max_length) throw FormatError("string length " + std::to_string(n) + " exceeds limit");
  std::string s(n, '\0');
  if (n > 0 && !in.read(s.data(), static_cast<std::streamsize>(n))) throw FormatError("unexpected end of file");
  return s;
}

void write_tensor(std::ostream& out, const std::string& name, const Tensor<float>& t) {
  write_string(out, name);
  write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t s : t.shape()) write_u64(out, s);
  for (float v : t.data()) write_u32(out, std::bit_cast<std::uint32_t>(v));
}

std::pair<std::string, Tensor<float>> read_tensor(std::istream& in) {
  std::string name = read_string(in, 4096);
  const std::uint32_t rank = read_u32(in);
  if (rank == 0 || rank > 8) throw FormatError("tensor " + name + ": bad rank " + std::to_string(rank));
  std::vector<std::size_t> shape(rank);
  std::uint64_t count = 1;
  for (auto& s : shape) {
    const std::uint64_t dim = read_u64(in);
    if (dim == 0 || dim > (1ULL << 32)) throw FormatError("tensor " + name + ": bad dimension");
    s = static_cast<std::size_t>(dim);
    count *= dim;
    if (count > (1ULL << 34)) throw FormatError("tensor " + name + ": too large");
  }
  std::vector<float> data(static_cast<std::size_t>(count));
  for (auto& v : data) v = std::bit_cast<float>(read_u32(in));
  return {std::move(name), Tensor<float>(std::move(shape), std::move(data))};
}

}  // namespace xt2c
