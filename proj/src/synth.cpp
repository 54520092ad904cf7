#include "svos/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>

namespace svos {

namespace {

std::string_view shape_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::disc: return "disc";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
  }
  return "?";
}

ShapeKind parse_shape(const std::string& s) {
  if (s == "disc") return ShapeKind::disc;
  if (s == "square") return ShapeKind::square;
  if (s == "triangle") return ShapeKind::triangle;
  throw ConfigError("unknown shape '" + s + "'");
}

std::string fmt(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

using Color = std::array<double, 3>;

struct SceneObject {
  ShapeKind kind;
  double x, y, vx, vy;
  double radius;
  double angle, spin;
  Color color;
  double stripe_freq;

  bool contains(double px, double py, double& u) const {
    const double dx = px - x, dy = py - y;
    const double c = std::cos(angle), s = std::sin(angle);
    u = dx * c + dy * s;
    const double v = -dx * s + dy * c;
    switch (kind) {
      case ShapeKind::disc: return u * u + v * v <= radius * radius;
      case ShapeKind::square: return std::max(std::abs(u), std::abs(v)) <= 0.8 * radius;
      case ShapeKind::triangle: {
        const double r = 1.2 * radius;
        for (double a : {-std::numbers::pi / 2, std::numbers::pi / 6, 5 * std::numbers::pi / 6})
          if (u * std::cos(a) + v * std::sin(a) > r / 2) return false;
        return true;
      }
    }
    return false;
  }

  double full_area() const {
    switch (kind) {
      case ShapeKind::disc: return std::numbers::pi * radius * radius;
      case ShapeKind::square: return 2.56 * radius * radius;
      case ShapeKind::triangle: {
        const double r = 1.2 * radius;
        return 3.0 * std::sqrt(3.0) / 4.0 * r * r;
      }
    }
    return 0.0;
  }
};

struct Occluder {
  double x, y, vx, half_w, half_h;
  Color color;
};

struct Background {
  Color base;
  std::array<std::array<double, 4>, 3> waves;  // fx, fy, phase, amplitude (one per channel)
  std::uint64_t noise_seed;

  double value(int ch, int wx, int wy) const {
    const auto& w = waves[static_cast<std::size_t>(ch)];
    double v = base[static_cast<std::size_t>(ch)] + w[3] * std::sin(w[0] * wx + w[1] * wy + w[2]);
    const std::uint64_t h = mix_seed(noise_seed, (static_cast<std::uint64_t>(static_cast<std::uint32_t>(wx)) << 32) ^
                                                     static_cast<std::uint32_t>(wy) ^ (static_cast<std::uint64_t>(ch) << 60));
    v += (static_cast<double>(h >> 11) * 0x1.0p-53 - 0.5) * 24.0;
    return v;
  }
};

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0))); }

double color_distance(const Color& a, const Color& b) {
  double d = 0;
  for (int i = 0; i < 3; ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(d);
}

void bounce(double& pos, double& vel, double lo, double hi) {
  if (hi <= lo) return;
  for (int i = 0; i < 4 && (pos < lo || pos > hi); ++i) {
    if (pos < lo) {
      pos = 2 * lo - pos;
      vel = -vel;
    } else if (pos > hi) {
      pos = 2 * hi - pos;
      vel = -vel;
    }
  }
  pos = std::clamp(pos, lo, hi);
}

// Renders one frame; owner[i] = object index or -1 (background) or -2 (occluder).
void render(const SynthConfig& cfg, const Background& bg, const std::vector<SceneObject>& objects,
            const std::vector<Occluder>& occluders, int cam_x, int cam_y, Image& image, std::vector<int>& owner) {
  image = Image(cfg.width, cfg.height);
  owner.assign(static_cast<std::size_t>(cfg.width) * cfg.height, -1);
  for (int y = 0; y < cfg.height; ++y) {
    for (int x = 0; x < cfg.width; ++x) {
      const int wx = x + cam_x, wy = y + cam_y;
      Color c{bg.value(0, wx, wy), bg.value(1, wx, wy), bg.value(2, wx, wy)};
      int who = -1;
      for (std::size_t k = 0; k < objects.size(); ++k) {
        double u = 0;
        if (objects[k].contains(wx, wy, u)) {
          const double stripe = 28.0 * std::sin(objects[k].stripe_freq * u);
          for (int ch = 0; ch < 3; ++ch) c[ch] = objects[k].color[ch] + stripe;
          who = static_cast<int>(k);
        }
      }
      for (const auto& o : occluders) {
        if (std::abs(wx - o.x) <= o.half_w && std::abs(wy - o.y) <= o.half_h) {
          c = o.color;
          who = -2;
        }
      }
      auto* px = image.pixel(x, y);
      for (int ch = 0; ch < 3; ++ch) px[ch] = to_byte(c[ch]);
      owner[static_cast<std::size_t>(y) * cfg.width + x] = who;
    }
  }
}

}  // namespace

void SynthConfig::validate() const {
  if (num_objects < 1) throw ConfigError("synth: num_objects must be >= 1");
  if (shapes.empty()) throw ConfigError("synth: shape set is empty");
  if (velocity_x_min > velocity_x_max || velocity_y_min > velocity_y_max)
    throw ConfigError("synth: empty velocity range");
  if (radius_min <= 0 || radius_min > radius_max) throw ConfigError("synth: empty radius range");
  if (color_drift < 0 || camera_jitter < 0 || occluders < 0) throw ConfigError("synth: negative rate");
  if (frames < 1 || height < 4 || width < 4) throw ConfigError("synth: extents too small");
  if (annotation_stride < 1) throw ConfigError("synth: annotation_stride must be >= 1");
  if (2 * radius_max >= std::min(height, width)) throw ConfigError("synth: objects larger than the frame");
}

SynthConfig SynthConfig::from_key_values(KeyValues& kv) {
  SynthConfig c;
  if (auto v = kv.take_int("num_objects")) c.num_objects = static_cast<int>(*v);
  if (auto v = kv.take_string("shapes")) {
    c.shapes.clear();
    std::stringstream in(*v);
    std::string item;
    while (std::getline(in, item, ',')) {
      item.erase(0, item.find_first_not_of(' '));
      item.erase(item.find_last_not_of(' ') + 1);
      c.shapes.push_back(parse_shape(item));
    }
  }
  if (auto v = kv.take_range("velocity_x")) std::tie(c.velocity_x_min, c.velocity_x_max) = *v;
  if (auto v = kv.take_range("velocity_y")) std::tie(c.velocity_y_min, c.velocity_y_max) = *v;
  if (auto v = kv.take_range("radius")) std::tie(c.radius_min, c.radius_max) = *v;
  if (auto v = kv.take_double("color_drift")) c.color_drift = *v;
  if (auto v = kv.take_double("camera_jitter")) c.camera_jitter = *v;
  if (auto v = kv.take_int("occluders")) c.occluders = static_cast<int>(*v);
  if (auto v = kv.take_int("frames")) c.frames = static_cast<int>(*v);
  if (auto v = kv.take_int("height")) c.height = static_cast<int>(*v);
  if (auto v = kv.take_int("width")) c.width = static_cast<int>(*v);
  if (auto v = kv.take_int("annotation_stride")) c.annotation_stride = static_cast<int>(*v);
  if (auto v = kv.take_double("fps")) c.fps = *v;
  if (auto v = kv.take_int("seed")) c.seed = static_cast<std::uint64_t>(*v);
  c.validate();
  return c;
}

std::map<std::string, std::string> SynthConfig::to_key_values() const {
  std::string shape_list;
  for (auto s : shapes) shape_list += (shape_list.empty() ? "" : ",") + std::string(shape_name(s));
  return {{"num_objects", std::to_string(num_objects)},
          {"shapes", shape_list},
          {"velocity_x", fmt(velocity_x_min) + "," + fmt(velocity_x_max)},
          {"velocity_y", fmt(velocity_y_min) + "," + fmt(velocity_y_max)},
          {"radius", fmt(radius_min) + "," + fmt(radius_max)},
          {"color_drift", fmt(color_drift)},
          {"camera_jitter", fmt(camera_jitter)},
          {"occluders", std::to_string(occluders)},
          {"frames", std::to_string(frames)},
          {"height", std::to_string(height)},
          {"width", std::to_string(width)},
          {"annotation_stride", std::to_string(annotation_stride)},
          {"fps", fmt(fps)},
          {"seed", std::to_string(seed)}};
}

VideoSequence synth_generate(const SynthConfig& cfg, const std::string& id) {
  cfg.validate();
  Rng rng(cfg.seed);

  Background bg;
  for (auto& c : bg.base) c = uniform(rng, 60, 190);
  for (auto& w : bg.waves) {
    const double freq = uniform(rng, 0.05, 0.25), dir = uniform(rng, 0, 2 * std::numbers::pi);
    w = {freq * std::cos(dir), freq * std::sin(dir), uniform(rng, 0, 2 * std::numbers::pi), uniform(rng, 10, 30)};
  }
  bg.noise_seed = rng();

  VideoSequence video;
  video.id = id;
  video.fps = cfg.fps;
  video.annotation_stride = cfg.annotation_stride;

  std::vector<SceneObject> objects;
  std::vector<Occluder> occluders;
  Image image;
  std::vector<int> owner;
  // Lay out the scene until every object is at least half visible in frame 0.
  for (int attempt = 0;; ++attempt) {
    objects.clear();
    occluders.clear();
    for (int k = 0; k < cfg.num_objects; ++k) {
      SceneObject o{};
      o.kind = cfg.shapes[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(cfg.shapes.size()) - 1))];
      o.radius = uniform(rng, cfg.radius_min, cfg.radius_max);
      o.x = uniform(rng, o.radius, cfg.width - 1 - o.radius);
      o.y = uniform(rng, o.radius, cfg.height - 1 - o.radius);
      o.vx = uniform(rng, cfg.velocity_x_min, cfg.velocity_x_max);
      o.vy = uniform(rng, cfg.velocity_y_min, cfg.velocity_y_max);
      o.angle = uniform(rng, 0, 2 * std::numbers::pi);
      o.spin = uniform(rng, -0.05, 0.05);
      o.stripe_freq = uniform(rng, 0.4, 1.2);
      for (int tries = 0; tries < 100; ++tries) {
        for (auto& c : o.color) c = uniform(rng, 20, 235);
        if (color_distance(o.color, bg.base) >= 100) break;
      }
      objects.push_back(o);
    }
    for (int k = 0; k < cfg.occluders; ++k) {
      Occluder o{};
      o.half_w = uniform(rng, 3, 8);
      o.half_h = uniform(rng, cfg.height * 0.15, cfg.height * 0.4);
      o.x = uniform(rng, 0, cfg.width - 1);
      o.y = uniform(rng, 0, cfg.height - 1);
      o.vx = uniform(rng, 1.0, 3.0) * (uniform01(rng) < 0.5 ? -1 : 1);
      const double gray = uniform(rng, 40, 220);
      o.color = {gray, gray, gray};
      occluders.push_back(o);
    }
    render(cfg, bg, objects, occluders, 0, 0, image, owner);
    bool visible = true;
    for (std::size_t k = 0; k < objects.size(); ++k) {
      const auto n = std::count(owner.begin(), owner.end(), static_cast<int>(k));
      if (static_cast<double>(n) < 0.5 * objects[k].full_area()) visible = false;
    }
    if (visible || attempt >= 1000) break;
  }

  video.objects.resize(objects.size());
  for (std::size_t k = 0; k < objects.size(); ++k) {
    video.objects[k].id = static_cast<int>(k) + 1;
    video.objects[k].masks.resize(static_cast<std::size_t>(cfg.frames));
  }
  for (int t = 0; t < cfg.frames; ++t) {
    int cam_x = 0, cam_y = 0;
    if (t > 0) {
      for (auto& o : objects) {
        o.x += o.vx;
        o.y += o.vy;
        bounce(o.x, o.vx, o.radius, cfg.width - 1 - o.radius);
        bounce(o.y, o.vy, o.radius, cfg.height - 1 - o.radius);
        o.angle += o.spin;
        for (auto& c : o.color) c = std::clamp(c + uniform(rng, -cfg.color_drift, cfg.color_drift), 20.0, 235.0);
      }
      for (auto& o : occluders) {
        o.x += o.vx;
        if (o.x < -o.half_w) o.x += cfg.width + 2 * o.half_w;
        if (o.x > cfg.width + o.half_w) o.x -= cfg.width + 2 * o.half_w;
      }
      if (cfg.camera_jitter > 0) {
        cam_x = static_cast<int>(std::lround(uniform(rng, -cfg.camera_jitter, cfg.camera_jitter)));
        cam_y = static_cast<int>(std::lround(uniform(rng, -cfg.camera_jitter, cfg.camera_jitter)));
      }
      render(cfg, bg, objects, occluders, cam_x, cam_y, image, owner);
    }
    video.frames.push_back(image);
    if (t % cfg.annotation_stride != 0) continue;
    for (std::size_t k = 0; k < objects.size(); ++k) {
      Mask m(cfg.width, cfg.height);
      for (std::size_t i = 0; i < owner.size(); ++i) m.values[i] = owner[i] == static_cast<int>(k) ? 1 : 0;
      video.objects[k].masks[static_cast<std::size_t>(t)] = std::move(m);
    }
  }
  return video;
}

std::vector<VideoSequence> synth_dataset(const SynthConfig& config, int count, const std::string& prefix) {
  std::vector<VideoSequence> out;
  out.reserve(static_cast<std::size_t>(std::max(0, count)));
  for (int i = 0; i < count; ++i) {
    SynthConfig c = config;
    c.seed = config.seed + static_cast<std::uint64_t>(i);
    out.push_back(synth_generate(c, prefix + "_" + std::to_string(i)));
  }
  return out;
}

}  // namespace svos
