#pragma once

namespace netlmm {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace netlmm
