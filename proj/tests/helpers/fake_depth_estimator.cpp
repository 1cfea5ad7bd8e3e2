// Stand-in for an external depth model: `fake_depth_estimator [--fail|--shape] <in> <out>`.
// Writes 16-bit inverse depth (near = bright) from the input luminance.
#include <cmath>
#include <cstdio>
#include <string>

#include "bronchosynth/image.hpp"
#include "bronchosynth/png_io.hpp"

int main(int argc, char** argv) {
  if (argc < 3) {
    std::fprintf(stderr, "usage: %s [--fail|--shape] <in> <out>\n", argv[0]);
    return 2;
  }
  const std::string mode = argc > 3 ? argv[1] : "";
  if (mode == "--fail") {
    std::fprintf(stderr, "model weights not found\n");
    return 3;
  }
  try {
    const bsynth::RgbImage image = bsynth::png::read_rgb(argv[argc - 2]);
    const auto luma = bsynth::luminance(image);
    bsynth::png::Gray16 out{image.height, image.width, {}};
    if (mode == "--shape") out.width -= 1;
    out.values.resize(static_cast<std::size_t>(out.height) * out.width);
    for (int r = 0; r < out.height; ++r) {
      for (int c = 0; c < out.width; ++c) {
        const double y = luma[static_cast<std::size_t>(r) * image.width + c];
        out.values[static_cast<std::size_t>(r) * out.width + c] = static_cast<std::uint16_t>(std::lround(y * 65535.0));
      }
    }
    bsynth::png::write_gray16(argv[argc - 1], out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  }
  return 0;
}
