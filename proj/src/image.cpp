#include "svos/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>

namespace svos {

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](auto v) { return v != 0; }));
}

namespace {

int read_header_int(std::istream& in, const std::filesystem::path& path) {
  // skip whitespace and comments
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string discard;
      std::getline(in, discard);
    } else if (c != EOF && std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  int value = 0;
  if (!(in >> value) || value <= 0) throw FormatError("bad PNM header in " + path.string());
  return value;
}

PnmHeader parse_header(std::istream& in, const std::filesystem::path& path) {
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
    throw FormatError("not a binary PNM file: " + path.string());
  PnmHeader h;
  h.kind = magic[1];
  h.width = read_header_int(in, path);
  h.height = read_header_int(in, path);
  h.maxval = read_header_int(in, path);
  if (h.maxval > 255) throw FormatError("16-bit PNM not supported: " + path.string());
  const int sep = in.get();
  if (sep == EOF || !std::isspace(sep)) throw FormatError("bad PNM header in " + path.string());
  return h;
}

std::ifstream open_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

void write_pnm(const std::filesystem::path& path, char kind, int w, int h, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << 'P' << kind << '\n' << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

PnmHeader read_pnm_header(const std::filesystem::path& path) {
  auto in = open_binary(path);
  return parse_header(in, path);
}

Image read_ppm(const std::filesystem::path& path) {
  auto in = open_binary(path);
  const auto h = parse_header(in, path);
  if (h.kind != '6') throw FormatError("expected a P6 pixmap: " + path.string());
  Image image(h.width, h.height);
  in.read(reinterpret_cast<char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
  if (!in) throw FormatError("truncated pixmap: " + path.string());
  if (h.maxval != 255)
    for (auto& v : image.rgb) v = static_cast<std::uint8_t>(std::lround(v * 255.0 / h.maxval));
  return image;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  write_pnm(path, '6', image.width, image.height, image.rgb);
}

Mask read_mask_pgm(const std::filesystem::path& path) {
  auto in = open_binary(path);
  const auto h = parse_header(in, path);
  if (h.kind != '5') throw FormatError("expected a P5 graymap: " + path.string());
  Mask mask(h.width, h.height);
  in.read(reinterpret_cast<char*>(mask.values.data()), static_cast<std::streamsize>(mask.values.size()));
  if (!in) throw FormatError("truncated graymap: " + path.string());
  for (auto& v : mask.values) {
    if (v == h.maxval) {
      v = 1;
    } else if (v != 0) {
      throw FormatError("mask is not binary (0/" + std::to_string(h.maxval) + "): " + path.string());
    }
  }
  return mask;
}

void write_mask_pgm(const std::filesystem::path& path, const Mask& mask) {
  std::vector<std::uint8_t> bytes(mask.values.size());
  std::transform(mask.values.begin(), mask.values.end(), bytes.begin(),
                 [](auto v) { return static_cast<std::uint8_t>(v ? 255 : 0); });
  write_pnm(path, '5', mask.width, mask.height, bytes);
}

template <typename Real>
Tensor<Real> image_to_tensor(const Image& image) {
  const auto w = static_cast<std::size_t>(image.width), h = static_cast<std::size_t>(image.height);
  Tensor<Real> out(Shape{3, h, w});
  auto d = out.mutable_data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        d[(c * h + y) * w + x] = static_cast<Real>(image.rgb[(y * w + x) * 3 + c]) / Real(255);
  return out;
}

template <typename Real>
Image tensor_to_image(const Tensor<Real>& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw ShapeError("tensor_to_image needs 3 x H x W");
  const std::size_t h = t.dim(1), w = t.dim(2);
  Image image(static_cast<int>(w), static_cast<int>(h));
  auto d = t.data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(d[(c * h + y) * w + x]), 0.0, 1.0);
        image.rgb[(y * w + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  return image;
}

template <typename Real>
Tensor<Real> mask_to_tensor(const Mask& mask) {
  Tensor<Real> out(Shape{1, static_cast<std::size_t>(mask.height), static_cast<std::size_t>(mask.width)});
  auto d = out.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = mask.values[i] ? Real(1) : Real(0);
  return out;
}

template <typename Real>
Mask tensor_to_mask(const Tensor<Real>& t, double threshold) {
  if (t.rank() != 3 || t.dim(0) != 1) throw ShapeError("tensor_to_mask needs 1 x H x W, got " + shape_str(t.shape()));
  Mask mask(static_cast<int>(t.dim(2)), static_cast<int>(t.dim(1)));
  auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) mask.values[i] = d[i] > threshold ? 1 : 0;
  return mask;
}

template <typename Real>
bool is_binary(const Tensor<Real>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](Real v) { return v == Real(0) || v == Real(1); });
}

namespace {

inline double align_corners_scale(int in, int out) {
  return out > 1 ? static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
}

template <typename Real>
void check_resize(const Tensor<Real>& image, int out_h, int out_w) {
  if (image.rank() != 3) throw ShapeError("resize expects C x H x W, got " + shape_str(image.shape()));
  if (out_h < 1 || out_w < 1) throw ShapeError("resize target extents must be >= 1");
}

}  // namespace

template <typename Real>
Tensor<Real> resize_bilinear(const Tensor<Real>& image, int out_h, int out_w) {
  check_resize(image, out_h, out_w);
  const int c = static_cast<int>(image.dim(0)), h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
  if (h == out_h && w == out_w) return image.detach();
  const double sy = align_corners_scale(h, out_h), sx = align_corners_scale(w, out_w);
  Tensor<Real> out(Shape{static_cast<std::size_t>(c), static_cast<std::size_t>(out_h), static_cast<std::size_t>(out_w)});
  auto src = image.data();
  auto dst = out.mutable_data();
  for (int y = 0; y < out_h; ++y) {
    const double fy = y * sy;
    const int y0 = std::min(static_cast<int>(std::floor(fy)), h - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double ay = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = x * sx;
      const int x0 = std::min(static_cast<int>(std::floor(fx)), w - 1);
      const int x1 = std::min(x0 + 1, w - 1);
      const double ax = fx - x0;
      for (int ch = 0; ch < c; ++ch) {
        const Real* p = src.data() + static_cast<std::size_t>(ch) * h * w;
        const double top = p[y0 * w + x0] * (1 - ax) + p[y0 * w + x1] * ax;
        const double bottom = p[y1 * w + x0] * (1 - ax) + p[y1 * w + x1] * ax;
        dst[(static_cast<std::size_t>(ch) * out_h + y) * out_w + x] = static_cast<Real>(top * (1 - ay) + bottom * ay);
      }
    }
  }
  return out;
}

template <typename Real>
Tensor<Real> resize_nearest(const Tensor<Real>& image, int out_h, int out_w) {
  check_resize(image, out_h, out_w);
  const int c = static_cast<int>(image.dim(0)), h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
  if (h == out_h && w == out_w) return image.detach();
  const double sy = align_corners_scale(h, out_h), sx = align_corners_scale(w, out_w);
  Tensor<Real> out(Shape{static_cast<std::size_t>(c), static_cast<std::size_t>(out_h), static_cast<std::size_t>(out_w)});
  auto src = image.data();
  auto dst = out.mutable_data();
  for (int y = 0; y < out_h; ++y) {
    const int sy_i = std::min(static_cast<int>(std::lround(y * sy)), h - 1);
    for (int x = 0; x < out_w; ++x) {
      const int sx_i = std::min(static_cast<int>(std::lround(x * sx)), w - 1);
      for (int ch = 0; ch < c; ++ch)
        dst[(static_cast<std::size_t>(ch) * out_h + y) * out_w + x] =
            src[(static_cast<std::size_t>(ch) * h + sy_i) * w + sx_i];
    }
  }
  return out;
}

#define SVOS_INSTANTIATE(Real)                                              \
  template Tensor<Real> image_to_tensor<Real>(const Image&);                \
  template Image tensor_to_image(const Tensor<Real>&);                      \
  template Tensor<Real> mask_to_tensor<Real>(const Mask&);                  \
  template Mask tensor_to_mask(const Tensor<Real>&, double);                \
  template bool is_binary(const Tensor<Real>&);                             \
  template Tensor<Real> resize_bilinear(const Tensor<Real>&, int, int);     \
  template Tensor<Real> resize_nearest(const Tensor<Real>&, int, int);

SVOS_INSTANTIATE(float)
SVOS_INSTANTIATE(double)

}  // namespace svos
