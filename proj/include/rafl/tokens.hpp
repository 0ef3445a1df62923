#pragma once

#include <cstdint>

namespace rafl {

using TokenId = std::int32_t;

// Reserved vocabulary ids. Everything below kFirstRegularToken is special and
// never selected for masking.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kCls = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kMask = 4;
inline constexpr TokenId kFirstRegularToken = 5;

} // namespace rafl
