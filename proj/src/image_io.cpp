#include "bml/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "bml/errors.hpp"

namespace bml {

namespace {

void skip_space_and_comments(std::istream& is) {
  for (;;) {
    const int c = is.peek();
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (c != EOF && std::isspace(c)) {
      is.get();
    } else {
      return;
    }
  }
}

unsigned long read_header_number(std::istream& is, const char* what) {
  skip_space_and_comments(is);
  unsigned long v = 0;
  if (!(is >> v)) throw ParseError(std::string("pnm: cannot read ") + what);
  return v;
}

void check_image_shape(const Tensor& image) {
  if (image.rank() != 3 || (image.dim(2) != 1 && image.dim(2) != 3) || image.dim(0) == 0 || image.dim(1) == 0) {
    throw DimensionError("image must be H x W x 1 or H x W x 3, got " + shape_to_string(image.shape()));
  }
}

}  // namespace

Tensor read_pnm(std::istream& is) {
  char magic[2] = {0, 0};
  if (!is.read(magic, 2) || magic[0] != 'P') throw ParseError("pnm: missing magic number");
  const char kind = magic[1];
  if (kind != '2' && kind != '3' && kind != '5' && kind != '6') {
    throw ParseError(std::string("pnm: unsupported format P") + kind);
  }
  const std::size_t channels = (kind == '3' || kind == '6') ? 3 : 1;
  const unsigned long width = read_header_number(is, "width");
  const unsigned long height = read_header_number(is, "height");
  const unsigned long maxval = read_header_number(is, "maxval");
  if (width == 0 || height == 0) throw ParseError("pnm: empty image");
  if (maxval == 0 || maxval > 65535) throw ParseError("pnm: maxval " + std::to_string(maxval) + " out of range");
  Tensor out({height, width, channels});
  const double scale = 1.0 / static_cast<double>(maxval);
  const std::size_t n = out.size();
  if (kind == '2' || kind == '3') {
    for (std::size_t i = 0; i < n; ++i) {
      const unsigned long v = read_header_number(is, "sample");
      if (v > maxval) throw ParseError("pnm: sample " + std::to_string(v) + " exceeds maxval");
      out[i] = static_cast<double>(v) * scale;
    }
    return out;
  }
  // Exactly one whitespace byte separates the header from binary data.
  if (!std::isspace(is.get())) throw ParseError("pnm: malformed header");
  const std::size_t bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(n * bytes);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw ParseError("pnm: truncated pixel data");
  }
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned v = bytes == 2 ? (unsigned{raw[2 * i]} << 8) | raw[2 * i + 1] : raw[i];
    if (v > maxval) throw ParseError("pnm: sample exceeds maxval");
    out[i] = static_cast<double>(v) * scale;
  }
  return out;
}

Tensor load_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return read_pnm(is);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::uint8_t to_byte(double v) {
  const double c = std::clamp(std::isnan(v) ? 0.0 : v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

std::vector<std::uint8_t> to_bytes(const Tensor& image) {
  std::vector<std::uint8_t> out(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) out[i] = to_byte(image[i]);
  return out;
}

void write_pnm(std::ostream& os, const Tensor& image) {
  check_image_shape(image);
  os << (image.dim(2) == 3 ? "P6" : "P5") << '\n' << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
  const auto bytes = to_bytes(image);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void save_pnm(const std::filesystem::path& path, const Tensor& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  write_pnm(os, image);
  if (!os) throw IoError("failed writing " + path.string());
}

std::string image_to_svg(const Tensor& image) {
  check_image_shape(image);
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  const auto bytes = to_bytes(image);
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << w << ' ' << h << "\" width=\"" << w * 4
     << "\" height=\"" << h * 4 << "\" shape-rendering=\"crispEdges\">\n";
  char colour[8];
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = (y * w + x) * c;
      const unsigned r = bytes[i], g = bytes[c == 3 ? i + 1 : i], b = bytes[c == 3 ? i + 2 : i];
      std::snprintf(colour, sizeof colour, "#%02x%02x%02x", r, g, b);
      os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"1\" height=\"1\" fill=\"" << colour << "\"/>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace bml
