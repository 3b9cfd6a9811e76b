#include "pcc/image_io.hpp"

#include "pcc/errors.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <png.h>

#include <cstdio>
#include <memory>
#include <vector>

namespace pcc::io {

vit::ImageSample load_rgb(const std::filesystem::path& path, std::optional<int> side) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IOError("cannot read image " + path.string());
  if (side && (bgr.rows != *side || bgr.cols != *side)) {
    cv::resize(bgr, bgr, cv::Size(*side, *side), 0, 0, cv::INTER_LINEAR);
  }
  vit::ImageSample s;
  s.identifier = path.stem().string();
  s.pixels.resize(bgr.rows, static_cast<Eigen::Index>(bgr.cols) * 3);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      for (int c = 0; c < 3; ++c) s.pixels(y, x * 3 + c) = row[x][2 - c] / 255.0;
    }
  }
  return s;
}

void save_rgb_png(const std::filesystem::path& path, const vit::ImageSample& image) {
  cv::Mat bgr(image.height(), image.width(), CV_8UC3);
  for (int y = 0; y < image.height(); ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < image.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        row[x][2 - c] = cv::saturate_cast<std::uint8_t>(image.at(y, x, c) * 255.0 + 0.5);
      }
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw IOError("cannot write image " + path.string());
}

std::array<std::array<std::uint8_t, 3>, 256> voc_colormap() {
  std::array<std::array<std::uint8_t, 3>, 256> map{};
  for (int i = 0; i < 256; ++i) {
    int r = 0, g = 0, b = 0, c = i;
    for (int j = 0; j < 8; ++j) {
      r |= ((c >> 0) & 1) << (7 - j);
      g |= ((c >> 1) & 1) << (7 - j);
      b |= ((c >> 2) & 1) << (7 - j);
      c >>= 3;
    }
    map[static_cast<std::size_t>(i)] = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g),
                                        static_cast<std::uint8_t>(b)};
  }
  return map;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

pseudo::PseudoLabelMap read_label_png(const std::filesystem::path& path, std::optional<int> side) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw IOError("cannot open label image " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("corrupt label image " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int color_type = png_get_color_type(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  if (color_type != PNG_COLOR_TYPE_PALETTE && color_type != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("label image " + path.string() + " is neither palette nor greyscale");
  }
  if (bit_depth == 16) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("16-bit label image " + path.string() + " is not supported");
  }
  if (bit_depth < 8) png_set_packing(png);
  png_read_update_info(png, info);
  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  std::vector<png_byte> buffer(static_cast<std::size_t>(width) * height);
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) rows[static_cast<std::size_t>(y)] = buffer.data() + static_cast<std::size_t>(y) * width;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  pseudo::PseudoLabelMap out(height, width, path.stem().string());
  for (std::size_t i = 0; i < buffer.size(); ++i) out.labels[i] = buffer[i];
  if (side && (height != *side || width != *side)) return resize_nearest(out, *side, *side);
  return out;
}

void write_label_png(const std::filesystem::path& path, const pseudo::PseudoLabelMap& labels) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw IOError("cannot write label image " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IOError("failed while encoding " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(labels.width), static_cast<png_uint_32>(labels.height), 8,
               PNG_COLOR_TYPE_PALETTE, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  const auto cmap = voc_colormap();
  std::array<png_color, 256> palette{};
  for (std::size_t i = 0; i < 256; ++i) palette[i] = {cmap[i][0], cmap[i][1], cmap[i][2]};
  png_set_PLTE(png, info, palette.data(), 256);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<std::size_t>(labels.width));
  for (int y = 0; y < labels.height; ++y) {
    for (int x = 0; x < labels.width; ++x) {
      const int v = labels.at(y, x);
      if (v < 0 || v > 255) {
        png_destroy_write_struct(&png, &info);
        throw FormatError("label value " + std::to_string(v) + " does not fit a palette image");
      }
      row[static_cast<std::size_t>(x)] = static_cast<png_byte>(v);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

pseudo::PseudoLabelMap resize_nearest(const pseudo::PseudoLabelMap& labels, int height, int width) {
  pseudo::PseudoLabelMap out(height, width, labels.source_id);
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(labels.height - 1, static_cast<int>((y + 0.5) * labels.height / height));
    for (int x = 0; x < width; ++x) {
      const int sx = std::min(labels.width - 1, static_cast<int>((x + 0.5) * labels.width / width));
      out.at(y, x) = labels.at(sy, sx);
    }
  }
  return out;
}

}  // namespace pcc::io
