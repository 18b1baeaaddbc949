#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "stdsnn/serialize.hpp"
#include "stdsnn/tensor.hpp"

namespace stdsnn {

struct Rgb {
  std::uint8_t r, g, b;
};

// class color scheme: brain red, heart green, left kidney blue, right kidney
// black, bladder yellow
inline constexpr std::array<Rgb, 6> overlay_colors = {{
    {0, 0, 0},      // background (unused; grayscale shows through)
    {255, 0, 0},    // brain
    {0, 255, 0},    // heart
    {0, 0, 255},    // left kidney
    {0, 0, 0},      // right kidney
    {255, 255, 0},  // bladder
}};

/// Renders one slice as binary PPM (P6): grayscale base from the image,
/// labeled pixels painted in their exact class color.
inline void render_overlay(const Tensor<float>& image_slice, const Tensor<std::int32_t>& labels,
                           const std::filesystem::path& path) {
  detail::check(labels.rank() >= 2, "render_overlay: labels must have spatial dims");
  const std::int64_t h = labels.dim(labels.rank() - 2);
  const std::int64_t w = labels.dim(labels.rank() - 1);
  detail::check(labels.numel() == h * w, "render_overlay: labels must be a single slice");
  detail::check(image_slice.numel() == h * w,
                "render_overlay: image " + shape_str(image_slice.shape()) + " does not match " +
                    shape_str(labels.shape()));

  float mx = 0;
  for (std::int64_t i = 0; i < image_slice.numel(); ++i) mx = std::max(mx, image_slice[i]);
  const float scale = mx > 0 ? 255.0f / mx : 0.0f;

  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(3 * h * w));
  for (std::int64_t i = 0; i < h * w; ++i) {
    const auto cls = labels[i];
    Rgb px{};
    if (cls > 0 && cls < static_cast<std::int32_t>(overlay_colors.size())) {
      px = overlay_colors[static_cast<std::size_t>(cls)];
    } else {
      const auto g = static_cast<std::uint8_t>(
          std::clamp(image_slice[i] * scale, 0.0f, 255.0f));
      px = {g, g, g};
    }
    pixels[static_cast<std::size_t>(3 * i)] = px.r;
    pixels[static_cast<std::size_t>(3 * i + 1)] = px.g;
    pixels[static_cast<std::size_t>(3 * i + 2)] = px.b;
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error(io_error::kind::open_failed, "cannot write " + path.string());
  out << "P6\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
  if (!out) throw io_error(io_error::kind::truncated, "short write to " + path.string());
}

}  // namespace stdsnn
