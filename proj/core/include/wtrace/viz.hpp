#pragma once

#include <string>
#include <vector>

#include "wtrace/dataset.hpp"
#include "wtrace/explain.hpp"

namespace wtrace {

enum class LabelPlacement : std::uint8_t { kLeft, kRight };

struct RidgePlotStyle {
  int width = 720;
  int margin = 24;
  int label_width = 140;
  int row_offset = 56;     ///< vertical distance between ridge baselines, > 0
  int curve_height = 84;   ///< height of the tallest curve
  std::string color = "#5b7aa6";
  std::string highlight_color = "#d1495b";
  LabelPlacement labels = LabelPlacement::kLeft;

  void validate() const;
};

/// Stacked per-class density curves, one <path> per shown class with samples,
/// predicted class drawn in the highlight color. Byte-deterministic.
std::string render_ridge(const RidgeData& rd, const RidgePlotStyle& style = {});

struct GalleryStyle {
  int scale = 3;    ///< screen pixels per image pixel
  int columns = 4;
  int padding = 10;
};

struct Gallery {
  std::string svg;
  std::vector<std::string> warnings;
};

/// The input image top-left followed by the report's top-k examples in order,
/// each captioned with label and Gamma. Images are embedded as base64 PGM.
/// Throws UnsupportedRenderError unless the dataset holds single-channel 2-D
/// images.
Gallery render_gallery(const InfluenceReport& report, const Dataset& ds, const Tensor& input, std::size_t k,
                       const GalleryStyle& style = {});

/// Binary PGM (P5) of a [H x W] or [1 x H x W] image with values in [0, 1].
std::vector<std::byte> to_pgm(const Tensor& image);

}  // namespace wtrace
