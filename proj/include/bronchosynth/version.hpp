#pragma once

namespace bsynth {
inline constexpr const char* kToolVersion = "0.3.0";
}
