#include "bronchosynth/hash.hpp"

#include <cstdio>

namespace bsynth {

std::string hex_digest(std::string_view data) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(data)));
  return buf;
}

}  // namespace bsynth
