#include "svos/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <sstream>

#include "svos/error.hpp"

namespace svos {

namespace {

void check_same_shape(const Mask& a, const Mask& b) {
  if (a.width != b.width || a.height != b.height)
    throw ShapeError("mask sizes differ: " + std::to_string(a.width) + "x" + std::to_string(a.height) + " vs " +
                     std::to_string(b.width) + "x" + std::to_string(b.height));
}

// Boundary pixels of `from` that have a boundary pixel of `to` within the
// offset disk.
std::size_t matched(const Mask& from, const Mask& to, const std::vector<std::pair<int, int>>& disk) {
  std::size_t n = 0;
  for (int y = 0; y < from.height; ++y)
    for (int x = 0; x < from.width; ++x) {
      if (!from.at(x, y)) continue;
      for (auto [dx, dy] : disk) {
        const int u = x + dx, v = y + dy;
        if (u >= 0 && v >= 0 && u < to.width && v < to.height && to.at(u, v)) {
          ++n;
          break;
        }
      }
    }
  return n;
}

std::string real_str(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

double region_similarity(const Mask& pred, const Mask& gt) {
  check_same_shape(pred, gt);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const bool p = pred.values[i] != 0, g = gt.values[i] != 0;
    inter += (p && g) ? 1 : 0;
    uni += (p || g) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

Mask boundary(const Mask& m) {
  Mask out(m.width, m.height);
  auto inside = [&](int x, int y) { return x >= 0 && y >= 0 && x < m.width && y < m.height && m.at(x, y) != 0; };
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (inside(x, y) && (!inside(x - 1, y) || !inside(x + 1, y) || !inside(x, y - 1) || !inside(x, y + 1)))
        out.at(x, y) = 1;
  return out;
}

int default_contour_tolerance(int width, int height) {
  return static_cast<int>(std::ceil(0.008 * std::hypot(static_cast<double>(width), static_cast<double>(height))));
}

double contour_accuracy(const Mask& pred, const Mask& gt, std::optional<int> tolerance) {
  check_same_shape(pred, gt);
  const int tol = tolerance.value_or(default_contour_tolerance(pred.width, pred.height));
  if (tol < 0) throw ValueError("contour tolerance must be non-negative");
  const Mask bp = boundary(pred), bg = boundary(gt);
  const std::size_t np = bp.count(), ng = bg.count();
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;

  std::vector<std::pair<int, int>> disk;
  for (int dy = -tol; dy <= tol; ++dy)
    for (int dx = -tol; dx <= tol; ++dx)
      if (dx * dx + dy * dy <= tol * tol) disk.emplace_back(dx, dy);

  const double precision = static_cast<double>(matched(bp, bg, disk)) / static_cast<double>(np);
  const double recall = static_cast<double>(matched(bg, bp, disk)) / static_cast<double>(ng);
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

Aggregate aggregate(std::span<const double> v) {
  if (v.empty()) throw ValueError("cannot aggregate an empty list");
  const std::size_t n = v.size();
  const std::size_t q = (n + 3) / 4;
  Aggregate a;
  double sum = 0.0, first = 0.0, last = 0.0;
  std::size_t above = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sum += v[i];
    above += v[i] > 0.5 ? 1 : 0;
    if (i < q) first += v[i];
    if (i >= n - q) last += v[i];
  }
  a.mean = sum / static_cast<double>(n);
  a.recall = static_cast<double>(above) / static_cast<double>(n);
  a.decay = first / static_cast<double>(q) - last / static_cast<double>(q);
  return a;
}

int curve_bucket(int t, int length) {
  if (t < 1 || t >= length) throw ValueError("frame " + std::to_string(t) + " is outside 1.." + std::to_string(length - 1));
  if (length <= 2) return 0;
  const double p = static_cast<double>(t - 1) / static_cast<double>(length - 2);
  return std::min(kCurveBuckets - 1, static_cast<int>(std::floor(p * kCurveBuckets)));
}

MetricReport build_report(std::vector<ObjectMetrics> objects) {
  MetricReport r;
  std::array<double, kCurveBuckets> j_sum{}, f_sum{};
  Aggregate j_total, f_total;
  std::size_t scored = 0;
  for (auto& o : objects) {
    if (o.j.size() != o.frames.size() || o.f.size() != o.frames.size())
      throw ShapeError("object metrics have mismatched lengths");
    if (o.frames.empty()) continue;
    o.j_agg = aggregate(o.j);
    o.f_agg = aggregate(o.f);
    j_total.mean += o.j_agg.mean;
    j_total.recall += o.j_agg.recall;
    j_total.decay += o.j_agg.decay;
    f_total.mean += o.f_agg.mean;
    f_total.recall += o.f_agg.recall;
    f_total.decay += o.f_agg.decay;
    ++scored;

    // Per-object bucket means, then averaged over objects.
    std::array<double, kCurveBuckets> oj{}, of{};
    std::array<int, kCurveBuckets> count{};
    for (std::size_t i = 0; i < o.frames.size(); ++i) {
      const int b = curve_bucket(o.frames[i], o.length);
      oj[static_cast<std::size_t>(b)] += o.j[i];
      of[static_cast<std::size_t>(b)] += o.f[i];
      ++count[static_cast<std::size_t>(b)];
    }
    for (std::size_t b = 0; b < kCurveBuckets; ++b) {
      if (!count[b]) continue;
      j_sum[b] += oj[b] / count[b];
      f_sum[b] += of[b] / count[b];
      ++r.curve[b].objects;
    }
  }
  if (scored) {
    const double n = static_cast<double>(scored);
    r.j = {j_total.mean / n, j_total.recall / n, j_total.decay / n};
    r.f = {f_total.mean / n, f_total.recall / n, f_total.decay / n};
  }
  for (std::size_t b = 0; b < kCurveBuckets; ++b)
    if (r.curve[b].objects) {
      r.curve[b].j_mean = j_sum[b] / r.curve[b].objects;
      r.curve[b].f_mean = f_sum[b] / r.curve[b].objects;
    }
  r.objects = std::move(objects);
  return r;
}

std::string report_json(const MetricReport& r) {
  using json = nlohmann::json;
  json j;
  j["J_mean"] = r.j.mean;
  j["J_recall"] = r.j.recall;
  j["J_decay"] = r.j.decay;
  j["F_mean"] = r.f.mean;
  j["F_recall"] = r.f.recall;
  j["F_decay"] = r.f.decay;
  json objs = json::array();
  for (const auto& o : r.objects) {
    objs.push_back({{"video", o.video_id},
                    {"object", o.object_id},
                    {"frames", o.frames},
                    {"J", o.j},
                    {"F", o.f},
                    {"J_mean", o.j_agg.mean},
                    {"J_recall", o.j_agg.recall},
                    {"J_decay", o.j_agg.decay},
                    {"F_mean", o.f_agg.mean},
                    {"F_recall", o.f_agg.recall},
                    {"F_decay", o.f_agg.decay}});
  }
  j["objects"] = objs;
  json curve = json::array();
  for (int b = 0; b < kCurveBuckets; ++b) {
    const auto& c = r.curve[static_cast<std::size_t>(b)];
    curve.push_back({{"bucket", b},
                     {"objects", c.objects},
                     {"J_mean", c.objects ? json(c.j_mean) : json(nullptr)},
                     {"F_mean", c.objects ? json(c.f_mean) : json(nullptr)}});
  }
  j["curve"] = curve;
  return j.dump(2) + "\n";
}

std::string per_frame_csv(const MetricReport& r) {
  std::string out = "video,object,frame,J,F\n";
  for (const auto& o : r.objects)
    for (std::size_t i = 0; i < o.frames.size(); ++i)
      out += o.video_id + "," + std::to_string(o.object_id) + "," + std::to_string(o.frames[i]) + "," +
             real_str(o.j[i]) + "," + real_str(o.f[i]) + "\n";
  return out;
}

std::string curve_csv(const MetricReport& r) {
  std::string out = "bucket,J_mean,F_mean,objects\n";
  for (int b = 0; b < kCurveBuckets; ++b) {
    const auto& c = r.curve[static_cast<std::size_t>(b)];
    out += std::to_string(b) + "," + (c.objects ? real_str(c.j_mean) : "") + "," +
           (c.objects ? real_str(c.f_mean) : "") + "," + std::to_string(c.objects) + "\n";
  }
  return out;
}

}  // namespace svos
