#pragma once

#include "xt2c/tensor.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>

namespace xt2c {

// Little-endian primitives shared by the binary formats.
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_string(std::ostream& out, const std::string& s);  // u64 length + bytes
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
std::string read_string(std::istream& in, std::uint64_t max_length = 1ULL << 30);

// name, rank, shape, then the elements as little-endian float32.
void write_tensor(std::ostream& out, const std::string& name, const Tensor<float>& t);
std::pair<std::string, Tensor<float>> read_tensor(std::istream& in);

}  // namespace xt2c
