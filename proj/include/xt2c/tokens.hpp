#pragma once

namespace xt2c::tokens {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;

}  // namespace xt2c::tokens
