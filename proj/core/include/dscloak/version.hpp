#pragma once

namespace dscloak {

inline constexpr const char* kLibraryVersion = "0.1.0";

}  // namespace dscloak
