#include "wtrace/viz.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "wtrace/error.hpp"

namespace wtrace {

namespace {

// Six significant digits; "-0" normalized so equal geometry prints equally.
std::string num(double v) {
  if (v == 0.0) v = 0.0;
  return fmt::format("{:.6g}", v);
}

std::string svg_open(int w, int h) {
  return fmt::format(
      "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      "<svg xmlns=\"http://www.w3.org/2000/svg\" xmlns:xlink=\"http://www.w3.org/1999/xlink\" version=\"1.1\" "
      "width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\" font-family=\"sans-serif\" font-size=\"12\">\n",
      w, h);
}

std::string base64(std::span<const std::byte> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

}  // namespace

void RidgePlotStyle::validate() const {
  if (row_offset <= 0) throw ConfigError("ridge row offset must be positive");
  if (curve_height <= 0 || width <= 2 * margin + label_width) throw ConfigError("ridge plot dimensions too small");
}

std::string render_ridge(const RidgeData& rd, const RidgePlotStyle& style) {
  style.validate();
  if (rd.shown_classes.empty()) {
    std::string s = svg_open(style.width, 80);
    s += fmt::format("<text x=\"{}\" y=\"44\" text-anchor=\"middle\">no ridge data to display</text>\n</svg>\n",
                     style.width / 2);
    return s;
  }
  const int rows = static_cast<int>(rd.shown_classes.size());
  const int top = style.margin + style.curve_height;
  const int height = top + (rows - 1) * style.row_offset + 40 + style.margin;
  const int plot_left = style.margin + (style.labels == LabelPlacement::kLeft ? style.label_width : 0);
  const int plot_right = style.width - style.margin - (style.labels == LabelPlacement::kRight ? style.label_width : 0);
  const double plot_w = plot_right - plot_left;

  double peak = 0.0;
  for (auto c : rd.shown_classes)
    for (double d : rd.ridge(c).density) peak = std::max(peak, d);
  const double yscale = peak > 0.0 ? style.curve_height / peak : 0.0;
  const auto gx = [&](double g) { return plot_left + (g + 1.0) * 0.5 * plot_w; };

  std::string s = svg_open(style.width, height);
  s += fmt::format("<title>layer {} ridge plot, predicted class {}</title>\n", rd.layer_id, rd.predicted_class);
  for (int i = 0; i < rows; ++i) {
    const ClassId c = rd.shown_classes[static_cast<std::size_t>(i)];
    const auto& cr = rd.ridge(c);
    const bool predicted = c == rd.predicted_class;
    const double base = top + i * style.row_offset;
    const auto& color = predicted ? style.highlight_color : style.color;
    s += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#bbbbbb\" stroke-width=\"1\"/>\n", plot_left,
                     num(base), plot_right, num(base));
    const double lx = style.labels == LabelPlacement::kLeft ? style.margin : plot_right + 8;
    s += fmt::format("<text x=\"{}\" y=\"{}\" fill=\"{}\"{}>class {} (p={})</text>\n", num(lx), num(base - 4), color,
                     predicted ? " font-weight=\"bold\"" : "", c, num(cr.probability));
    if (cr.density.empty() || cr.density.size() != rd.grid.size()) {
      s += fmt::format("<text x=\"{}\" y=\"{}\" fill=\"#888888\">no samples</text>\n", num(gx(0.0)), num(base - 4));
      continue;
    }
    std::string d = fmt::format("M{} {}", num(gx(rd.grid.front())), num(base));
    for (std::size_t k = 0; k < rd.grid.size(); ++k) {
      d += fmt::format(" L{} {}", num(gx(rd.grid[k])), num(base - cr.density[k] * yscale));
    }
    d += fmt::format(" L{} {} Z", num(gx(rd.grid.back())), num(base));
    s += fmt::format(
        "<path class=\"ridge{}\" data-class=\"{}\" d=\"{}\" fill=\"{}\" fill-opacity=\"{}\" stroke=\"{}\" "
        "stroke-width=\"{}\"/>\n",
        predicted ? " predicted" : "", c, d, color, predicted ? "0.55" : "0.35", color, predicted ? 2 : 1);
  }
  const double axis_y = top + (rows - 1) * style.row_offset + 14;
  s += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333333\" stroke-width=\"1\"/>\n", plot_left,
                   num(axis_y), plot_right, num(axis_y));
  for (double t : {-1.0, -0.5, 0.0, 0.5, 1.0}) {
    s += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", num(gx(t)), num(axis_y + 16),
                     num(t));
  }
  s += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">cosine similarity</text>\n",
                   num(plot_left + plot_w / 2), num(axis_y + 30));
  s += "</svg>\n";
  return s;
}

std::vector<std::byte> to_pgm(const Tensor& image) {
  const auto& sh = image.shape();
  const bool ok = (sh.size() == 2) || (sh.size() == 3 && sh[0] == 1);
  if (!ok) throw UnsupportedRenderError("PGM needs a single-channel 2-D image, got " + shape_str(sh));
  const std::size_t h = sh[sh.size() - 2], w = sh.back();
  const auto header = fmt::format("P5\n{} {}\n255\n", w, h);
  std::vector<std::byte> out;
  out.reserve(header.size() + w * h);
  for (char ch : header) out.push_back(static_cast<std::byte>(ch));
  for (float v : image.data()) {
    const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
    out.push_back(static_cast<std::byte>(static_cast<unsigned>(std::lround(c * 255.0))));
  }
  return out;
}

Gallery render_gallery(const InfluenceReport& report, const Dataset& ds, const Tensor& input, std::size_t k,
                       const GalleryStyle& style) {
  const auto& fs = ds.feature_shape();
  if (!((fs.size() == 2) || (fs.size() == 3 && fs[0] == 1))) {
    throw UnsupportedRenderError("features of shape " + shape_str(fs) +
                                 " are not grayscale images; use the JSON export instead");
  }
  if (input.size() != ds.feature_size()) {
    throw DimensionError("input " + shape_str(input.shape()) + " does not match dataset features " + shape_str(fs));
  }
  Gallery g;
  if (k > ds.size()) {
    g.warnings.push_back(fmt::format("k={} exceeds the dataset size {}; clamped", k, ds.size()));
    k = ds.size();
  }
  if (k > report.top_k.size()) {
    g.warnings.push_back(fmt::format("k={} exceeds the report's {} ranked examples; clamped", k, report.top_k.size()));
    k = report.top_k.size();
  }
  const std::size_t h = fs[fs.size() - 2], w = fs.back();
  const int tile_w = static_cast<int>(w) * style.scale, tile_h = static_cast<int>(h) * style.scale;
  const int cell_w = tile_w + style.padding, cell_h = tile_h + 34 + style.padding;
  const int cols = std::max(1, std::min(style.columns, static_cast<int>(k + 1)));
  const int rows = static_cast<int>((k + 1 + static_cast<std::size_t>(cols) - 1) / static_cast<std::size_t>(cols));
  g.svg = svg_open(style.padding + cols * cell_w, style.padding + rows * cell_h);
  g.svg += fmt::format("<title>layer {} most influential training examples</title>\n", report.layer_id);

  const auto tile = [&](std::size_t slot, const Tensor& img, const std::string& line1, const std::string& line2,
                        const char* cls) {
    const int x = style.padding + static_cast<int>(slot % static_cast<std::size_t>(cols)) * cell_w;
    const int y = style.padding + static_cast<int>(slot / static_cast<std::size_t>(cols)) * cell_h;
    g.svg += fmt::format(
        "<image class=\"{}\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" style=\"image-rendering:pixelated\" "
        "xlink:href=\"data:image/x-portable-graymap;base64,{}\"/>\n",
        cls, x, y, tile_w, tile_h, base64(to_pgm(img)));
    g.svg += fmt::format("<text x=\"{}\" y=\"{}\">{}</text>\n", x, y + tile_h + 14, line1);
    if (!line2.empty()) g.svg += fmt::format("<text x=\"{}\" y=\"{}\">{}</text>\n", x, y + tile_h + 28, line2);
  };
  tile(0, input.reshaped({h, w}), "input", "", "input");
  for (std::size_t i = 0; i < k; ++i) {
    const auto [id, gamma] = report.top_k[i];
    if (id >= ds.size()) throw IndexError(fmt::format("report names example {} outside the dataset", id));
    tile(i + 1, ds.example(id).reshaped({h, w}), fmt::format("#{} id {} class {}", i + 1, id, ds.label(id)),
         fmt::format("&#915;={}", num(gamma)), "influential");
  }
  g.svg += "</svg>\n";
  return g;
}

}  // namespace wtrace
