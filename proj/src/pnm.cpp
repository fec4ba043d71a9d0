#include "ses/pnm.hpp"

#include "ses/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>

namespace ses {

namespace {

void skip_space_and_comments(std::istream& in) {
  while (true) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (c != EOF && std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

std::size_t read_header_int(std::istream& in, const std::string& path) {
  skip_space_and_comments(in);
  long v = -1;
  if (!(in >> v) || v <= 0) throw IoError(path + ": malformed PNM header");
  return static_cast<std::size_t>(v);
}

}  // namespace

Image8 read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || std::string("2356").find(magic[1]) == std::string::npos)
    throw IoError(path + ": not a P2/P3/P5/P6 file");
  const bool ascii = magic[1] == '2' || magic[1] == '3';
  const std::size_t channels = (magic[1] == '3' || magic[1] == '6') ? 3 : 1;
  const std::size_t w = read_header_int(in, path);
  const std::size_t h = read_header_int(in, path);
  const std::size_t maxval = read_header_int(in, path);
  if (maxval > 255) throw IoError(path + ": 16-bit PNM is not supported");

  Image8 img(w, h, channels);
  const double rescale = 255.0 / static_cast<double>(maxval);
  if (ascii) {
    for (auto& px : img.data) {
      skip_space_and_comments(in);
      long v = -1;
      if (!(in >> v) || v < 0 || static_cast<std::size_t>(v) > maxval) throw IoError(path + ": bad sample value");
      px = static_cast<std::uint8_t>(std::lround(static_cast<double>(v) * rescale));
    }
  } else {
    if (!std::isspace(in.get())) throw IoError(path + ": malformed PNM header");
    in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
    if (!in) throw IoError(path + ": truncated pixel data");
    if (maxval != 255)
      for (auto& px : img.data) px = static_cast<std::uint8_t>(std::lround(std::min<double>(px, maxval) * rescale));
  }
  return img;
}

void write_pnm(const std::string& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw ValueError("PNM images have 1 or 3 channels");
  if (img.data.size() != img.width * img.height * img.channels) throw ShapeError("image buffer size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (!out) throw IoError("write failed: " + path);
}

ImageGrid to_grid(const Image8& img) {
  ImageGrid g(img.channels, img.height, img.width);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) g.at(c, y, x) = img.at(y, x, c) / 255.0;
  return g;
}

Image8 from_grid(const ImageGrid& grid) {
  if (grid.channels() != 1 && grid.channels() != 3) throw ValueError("PNM images have 1 or 3 channels");
  Image8 img(grid.width(), grid.height(), grid.channels());
  for (std::size_t c = 0; c < grid.channels(); ++c)
    for (std::size_t y = 0; y < grid.height(); ++y)
      for (std::size_t x = 0; x < grid.width(); ++x)
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(grid.at(c, y, x), 0.0, 1.0) * 255.0));
  return img;
}

}  // namespace ses
