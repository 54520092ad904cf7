#include "svos/data.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace svos {

namespace fs = std::filesystem;
using nlohmann::json;

void VideoSequence::validate() const {
  if (frames.empty()) throw FormatError("video '" + id + "' has no frames");
  if (annotation_stride < 1) throw FormatError("video '" + id + "' has annotation_stride < 1");
  for (const auto& f : frames)
    if (f.width != width() || f.height != height())
      throw FormatError("video '" + id + "' has frames of differing size");
  for (const auto& obj : objects) {
    if (obj.masks.size() != frames.size())
      throw FormatError("video '" + id + "' object " + std::to_string(obj.id) + " has " +
                        std::to_string(obj.masks.size()) + " mask slots for " + std::to_string(frames.size()) +
                        " frames");
    if (!obj.masks.front()) throw FormatError("video '" + id + "' object " + std::to_string(obj.id) + " lacks a frame-0 mask");
    for (std::size_t t = 0; t < obj.masks.size(); ++t) {
      if (!obj.masks[t]) continue;
      if (static_cast<int>(t) % annotation_stride != 0)
        throw FormatError("video '" + id + "' mask at frame " + std::to_string(t) + " is off the annotation stride " +
                          std::to_string(annotation_stride));
      if (obj.masks[t]->width != width() || obj.masks[t]->height != height())
        throw FormatError("video '" + id + "' mask at frame " + std::to_string(t) + " does not match frame size");
    }
  }
}

std::vector<bool> VideoDescriptor::mask_present(std::size_t object) const {
  std::vector<bool> present(frames.size(), false);
  for (const auto& m : objects.at(object).masks) present[static_cast<std::size_t>(m.frame_index)] = true;
  return present;
}

std::vector<int> VideoDescriptor::annotated_indices() const {
  std::set<int> indices;
  for (const auto& obj : objects)
    for (const auto& m : obj.masks) indices.insert(m.frame_index);
  return {indices.begin(), indices.end()};
}

namespace {

template <typename T>
T require(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw FormatError(where + ": missing '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(where + ": bad '" + key + "': " + e.what());
  }
}

void check_file(const fs::path& p) {
  if (!fs::is_regular_file(p)) throw IoError("missing file: " + p.string());
}

}  // namespace

std::vector<VideoDescriptor> load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest " + path.string() + ": " + e.what());
  }
  const fs::path root = path.parent_path();
  if (!doc.is_object() || !doc.contains("videos") || !doc["videos"].is_array())
    throw FormatError("manifest " + path.string() + " must be an object with a 'videos' array");

  std::vector<VideoDescriptor> out;
  std::set<std::string> seen_ids;
  for (const auto& v : doc["videos"]) {
    VideoDescriptor d;
    d.id = require<std::string>(v, "id", "manifest video");
    const std::string where = "video '" + d.id + "'";
    if (!seen_ids.insert(d.id).second) throw FormatError("duplicate video id '" + d.id + "'");
    d.fps = require<double>(v, "fps", where);
    d.annotation_stride = require<int>(v, "annotation_stride", where);
    if (d.annotation_stride < 1) throw FormatError(where + ": annotation_stride must be >= 1");
    for (const auto& f : require<std::vector<std::string>>(v, "frames", where)) d.frames.push_back(root / f);
    if (d.frames.empty()) throw FormatError(where + ": no frames");

    for (const auto& f : d.frames) {
      check_file(f);
      const auto h = read_pnm_header(f);
      if (h.kind != '6') throw FormatError(where + ": frame is not a P6 pixmap: " + f.string());
      if (d.width == 0) {
        d.width = h.width;
        d.height = h.height;
      } else if (h.width != d.width || h.height != d.height) {
        throw FormatError(where + ": frame " + f.string() + " is " + std::to_string(h.width) + "x" +
                          std::to_string(h.height) + ", expected " + std::to_string(d.width) + "x" +
                          std::to_string(d.height));
      }
    }

    if (!v.contains("objects") || !v["objects"].is_array()) throw FormatError(where + ": missing 'objects' array");
    for (const auto& o : v["objects"]) {
      ObjectDescriptor od;
      od.id = require<int>(o, "id", where);
      std::set<int> frames_seen;
      if (!o.contains("masks") || !o["masks"].is_array()) throw FormatError(where + ": object without 'masks'");
      for (const auto& m : o["masks"]) {
        MaskRef ref;
        ref.frame_index = require<int>(m, "frame_index", where);
        ref.path = root / require<std::string>(m, "path", where);
        if (ref.frame_index < 0 || ref.frame_index >= static_cast<int>(d.frames.size()))
          throw FormatError(where + ": mask frame_index " + std::to_string(ref.frame_index) + " out of range");
        if (ref.frame_index % d.annotation_stride != 0)
          throw FormatError(where + ": mask at frame " + std::to_string(ref.frame_index) +
                            " is not a multiple of annotation_stride " + std::to_string(d.annotation_stride));
        if (!frames_seen.insert(ref.frame_index).second)
          throw FormatError(where + ": two masks for frame " + std::to_string(ref.frame_index));
        check_file(ref.path);
        const auto h = read_pnm_header(ref.path);
        if (h.kind != '5') throw FormatError(where + ": mask is not a P5 graymap: " + ref.path.string());
        if (h.width != d.width || h.height != d.height)
          throw FormatError(where + ": mask " + ref.path.string() + " does not match frame dimensions");
        od.masks.push_back(std::move(ref));
      }
      if (!frames_seen.contains(0))
        throw FormatError(where + ": object " + std::to_string(od.id) + " has no frame-0 mask");
      std::sort(od.masks.begin(), od.masks.end(), [](const auto& a, const auto& b) { return a.frame_index < b.frame_index; });
      d.objects.push_back(std::move(od));
    }
    out.push_back(std::move(d));
  }
  return out;
}

VideoSequence load_video(const VideoDescriptor& d) {
  VideoSequence v;
  v.id = d.id;
  v.fps = d.fps;
  v.annotation_stride = d.annotation_stride;
  for (const auto& f : d.frames) v.frames.push_back(read_ppm(f));
  for (const auto& od : d.objects) {
    ObjectTrack track;
    track.id = od.id;
    track.masks.resize(d.frames.size());
    for (const auto& m : od.masks) track.masks[static_cast<std::size_t>(m.frame_index)] = read_mask_pgm(m.path);
    v.objects.push_back(std::move(track));
  }
  v.validate();
  return v;
}

std::vector<VideoSequence> load_dataset(const fs::path& manifest, int threads) {
  const auto descriptors = load_manifest(manifest);
  std::vector<VideoSequence> videos(descriptors.size());
  parallel_for(descriptors.size(), threads, [&](std::size_t i) { videos[i] = load_video(descriptors[i]); });
  return videos;
}

VideoDescriptor write_video(const fs::path& root, const VideoSequence& video) {
  video.validate();
  VideoDescriptor d;
  d.id = video.id;
  d.fps = video.fps;
  d.annotation_stride = video.annotation_stride;
  d.width = video.width();
  d.height = video.height();
  const fs::path dir = root / video.id;
  std::error_code ec;
  fs::create_directories(dir / "frames", ec);
  if (ec) throw IoError("cannot create " + (dir / "frames").string() + ": " + ec.message());
  auto numbered = [](std::size_t i, const char* ext) {
    std::ostringstream name;
    name << std::setw(5) << std::setfill('0') << i << ext;
    return name.str();
  };
  for (std::size_t t = 0; t < video.frames.size(); ++t) {
    const fs::path rel = fs::path(video.id) / "frames" / numbered(t, ".ppm");
    write_ppm(root / rel, video.frames[t]);
    d.frames.push_back(rel);
  }
  for (const auto& obj : video.objects) {
    ObjectDescriptor od;
    od.id = obj.id;
    const fs::path mask_dir = fs::path(video.id) / "masks" / std::to_string(obj.id);
    fs::create_directories(root / mask_dir, ec);
    if (ec) throw IoError("cannot create " + (root / mask_dir).string() + ": " + ec.message());
    for (std::size_t t = 0; t < obj.masks.size(); ++t) {
      if (!obj.masks[t]) continue;
      const fs::path rel = mask_dir / numbered(t, ".pgm");
      write_mask_pgm(root / rel, *obj.masks[t]);
      od.masks.push_back({static_cast<int>(t), rel});
    }
    d.objects.push_back(std::move(od));
  }
  return d;
}

void write_manifest(const fs::path& path, const std::vector<VideoDescriptor>& videos) {
  json doc;
  doc["videos"] = json::array();
  for (const auto& d : videos) {
    json v;
    v["id"] = d.id;
    v["fps"] = d.fps;
    v["annotation_stride"] = d.annotation_stride;
    v["frames"] = json::array();
    for (const auto& f : d.frames) v["frames"].push_back(f.generic_string());
    v["objects"] = json::array();
    for (const auto& o : d.objects) {
      json jo;
      jo["id"] = o.id;
      jo["masks"] = json::array();
      for (const auto& m : o.masks) jo["masks"].push_back({{"frame_index", m.frame_index}, {"path", m.path.generic_string()}});
      v["objects"].push_back(std::move(jo));
    }
    doc["videos"].push_back(std::move(v));
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("failed writing manifest " + path.string());
}

// Affine augmentation

void AffineRanges::validate() const {
  if (rotation_deg < 0 || translate < 0 || shear_deg < 0 || scale_min <= 0 || scale_min > scale_max)
    throw ConfigError("invalid affine ranges");
}

AffineParams sample_affine(Rng& rng, const AffineRanges& r) {
  r.validate();
  AffineParams p;
  p.rotation_deg = uniform(rng, -r.rotation_deg, r.rotation_deg);
  p.scale = uniform(rng, r.scale_min, r.scale_max);
  p.translate_x = uniform(rng, -r.translate, r.translate);
  p.translate_y = uniform(rng, -r.translate, r.translate);
  p.shear_deg = uniform(rng, -r.shear_deg, r.shear_deg);
  return p;
}

template <typename Real>
Tensor<Real> warp_affine(const Tensor<Real>& image, const AffineParams& p, bool nearest) {
  if (image.rank() != 3) throw ShapeError("warp_affine expects C x H x W");
  if (p.is_identity()) return image.detach();
  if (p.scale <= 0) throw ValueError("affine scale must be positive");
  const int c = static_cast<int>(image.dim(0)), h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
  const double theta = p.rotation_deg * std::numbers::pi / 180.0;
  const double shear = std::tan(p.shear_deg * std::numbers::pi / 180.0);
  // forward M = R(theta) * [[1, shear], [0, 1]] * scale
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double m00 = p.scale * cs, m01 = p.scale * (cs * shear - sn);
  const double m10 = p.scale * sn, m11 = p.scale * (sn * shear + cs);
  const double det = m00 * m11 - m01 * m10;
  const double i00 = m11 / det, i01 = -m01 / det, i10 = -m10 / det, i11 = m00 / det;
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  const double tx = p.translate_x * w, ty = p.translate_y * h;

  Tensor<Real> out(image.shape());
  auto src = image.data();
  auto dst = out.mutable_data();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double dx = x - cx - tx, dy = y - cy - ty;
      const double sx = std::clamp(cx + i00 * dx + i01 * dy, 0.0, w - 1.0);
      const double sy = std::clamp(cy + i10 * dx + i11 * dy, 0.0, h - 1.0);
      if (nearest) {
        const int ix = static_cast<int>(std::lround(sx)), iy = static_cast<int>(std::lround(sy));
        for (int ch = 0; ch < c; ++ch)
          dst[(static_cast<std::size_t>(ch) * h + y) * w + x] = src[(static_cast<std::size_t>(ch) * h + iy) * w + ix];
      } else {
        const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
        const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
        const double ax = sx - x0, ay = sy - y0;
        for (int ch = 0; ch < c; ++ch) {
          const Real* pl = src.data() + static_cast<std::size_t>(ch) * h * w;
          const double top = pl[y0 * w + x0] * (1 - ax) + pl[y0 * w + x1] * ax;
          const double bottom = pl[y1 * w + x0] * (1 - ax) + pl[y1 * w + x1] * ax;
          dst[(static_cast<std::size_t>(ch) * h + y) * w + x] = static_cast<Real>(top * (1 - ay) + bottom * ay);
        }
      }
    }
  }
  return out;
}

template <typename Real>
std::pair<Tensor<Real>, Tensor<Real>> affine_sample(const Tensor<Real>& frame, const Tensor<Real>& mask, Rng& rng,
                                                    const AffineRanges& ranges) {
  if (!is_binary(mask)) throw ValueError("affine_sample: mask must be binary");
  if (frame.rank() != 3 || mask.rank() != 3 || frame.dim(1) != mask.dim(1) || frame.dim(2) != mask.dim(2))
    throw ShapeError("affine_sample: frame " + shape_str(frame.shape()) + " and mask " + shape_str(mask.shape()) +
                     " disagree");
  constexpr int kAttempts = 10;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    const auto params = sample_affine(rng, ranges);
    auto warped_mask = warp_affine(mask, params, true);
    const bool empty = std::none_of(warped_mask.data().begin(), warped_mask.data().end(), [](Real v) { return v != 0; });
    if (empty) continue;
    return {warp_affine(frame, params, false), std::move(warped_mask)};
  }
  throw ValueError("affine_sample: mask empty after " + std::to_string(kAttempts) + " draws");
}

template Tensor<float> warp_affine(const Tensor<float>&, const AffineParams&, bool);
template Tensor<double> warp_affine(const Tensor<double>&, const AffineParams&, bool);
template std::pair<Tensor<float>, Tensor<float>> affine_sample(const Tensor<float>&, const Tensor<float>&, Rng&,
                                                               const AffineRanges&);
template std::pair<Tensor<double>, Tensor<double>> affine_sample(const Tensor<double>&, const Tensor<double>&, Rng&,
                                                                 const AffineRanges&);

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(workers, n); ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

int default_thread_count() {
  if (const char* env = std::getenv("SVOS_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return 1;
}

}  // namespace svos
