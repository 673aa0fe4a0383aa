#pragma once

#include <cstdint>

namespace slm {

using TokenId = std::int32_t;

// Reserved rows shared by every vocabulary.
inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kEolId = 1;
inline constexpr TokenId kEorId = 2;
inline constexpr TokenId kFirstRealId = 3;

inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kEolToken = "[EOL]";
inline constexpr const char* kEorToken = "[EOR]";

inline constexpr bool is_special(TokenId id) { return id < kFirstRealId; }

}  // namespace slm
