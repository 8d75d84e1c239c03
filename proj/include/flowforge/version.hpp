#pragma once

namespace flowforge {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace flowforge
