#include "tempotrack/synth.hpp"

#include <algorithm>
#include <cmath>

namespace tempotrack {

namespace {

struct Rgb {
  double r, g, b;
};

Rgb mix(const Rgb& a, const Rgb& b, double t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

// Deterministic per-coordinate noise in [-1, 1].
double coord_noise(std::uint64_t seed, std::int64_t x, std::int64_t y) {
  const std::uint64_t h = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(x) * 0x9e3779b1u ^
                                                       splitmix64(static_cast<std::uint64_t>(y))));
  return (h >> 11) * 0x1.0p-53 * 2.0 - 1.0;
}

// Smooth value-noise background sampled on a coarse grid.
struct BackgroundField {
  int gw = 0, gh = 0, cell = 16;
  std::vector<Rgb> grid;

  static BackgroundField make(int w, int h, Rng* rng) {
    BackgroundField f;
    f.gw = w / f.cell + 3;
    f.gh = h / f.cell + 3;
    f.grid.resize(static_cast<std::size_t>(f.gw) * f.gh);
    const double base = rng->uniform(80.0, 140.0);
    for (auto& g : f.grid) {
      const double v = base + rng->uniform(-35.0, 35.0);
      g = {v + rng->uniform(-12.0, 12.0), v + rng->uniform(-12.0, 12.0),
           v + rng->uniform(-12.0, 12.0)};
    }
    return f;
  }

  Rgb sample(double x, double y) const {
    const double u = x / cell, v = y / cell;
    const int x0 = std::clamp(static_cast<int>(std::floor(u)), 0, gw - 2);
    const int y0 = std::clamp(static_cast<int>(std::floor(v)), 0, gh - 2);
    const double tx = std::clamp(u - x0, 0.0, 1.0), ty = std::clamp(v - y0, 0.0, 1.0);
    const Rgb& a = grid[static_cast<std::size_t>(y0) * gw + x0];
    const Rgb& b = grid[static_cast<std::size_t>(y0) * gw + x0 + 1];
    const Rgb& c = grid[static_cast<std::size_t>(y0 + 1) * gw + x0];
    const Rgb& d = grid[static_cast<std::size_t>(y0 + 1) * gw + x0 + 1];
    return mix(mix(a, b, tx), mix(c, d, tx), ty);
  }
};

struct IntBox {
  int x0, y0, w, h;
  int x1() const { return x0 + w; }
  int y1() const { return y0 + h; }
};

// Checkerboard-plus-noise texture anchored to the box origin so it moves
// with the object.
void fill_textured_rect(Image& img, const IntBox& box, const Rgb& tint_a, const Rgb& tint_b,
                        std::uint64_t noise_seed, std::vector<std::uint8_t>* mask) {
  const int xa = std::max(0, box.x0), xb = std::min(img.width, box.x1());
  const int ya = std::max(0, box.y0), yb = std::min(img.height, box.y1());
  for (int y = ya; y < yb; ++y)
    for (int x = xa; x < xb; ++x) {
      const int u = x - box.x0, v = y - box.y0;
      const bool check = ((u / 5) + (v / 5)) % 2 == 0;
      Rgb c = check ? tint_a : tint_b;
      const double n = 10.0 * coord_noise(noise_seed, u, v);
      auto* px = img.px(x, y);
      px[0] = static_cast<std::uint8_t>(std::clamp(c.r + n, 0.0, 255.0));
      px[1] = static_cast<std::uint8_t>(std::clamp(c.g + n, 0.0, 255.0));
      px[2] = static_cast<std::uint8_t>(std::clamp(c.b + n, 0.0, 255.0));
      if (mask) (*mask)[static_cast<std::size_t>(y) * img.width + x] = 1;
    }
}

struct Trajectory {
  std::vector<std::pair<double, double>> points;

  std::pair<double, double> at(double u) const {  // u in [0,1]
    if (points.size() == 1) return points[0];
    const double s = u * static_cast<double>(points.size() - 1);
    const std::size_t k = std::min(points.size() - 2, static_cast<std::size_t>(s));
    const double t = s - static_cast<double>(k);
    return {points[k].first + (points[k + 1].first - points[k].first) * t,
            points[k].second + (points[k + 1].second - points[k].second) * t};
  }

  static Trajectory random(Rng* rng, int n, double margin_x, double margin_y, int frame_w,
                           int frame_h) {
    Trajectory tr;
    if (n <= 1) {
      tr.points.push_back({frame_w / 2.0, frame_h / 2.0});
      return tr;
    }
    for (int i = 0; i < n; ++i)
      tr.points.push_back({rng->uniform(margin_x, frame_w - margin_x),
                           rng->uniform(margin_y, frame_h - margin_y)});
    return tr;
  }
};

}  // namespace

Sequence generate_synthetic(const SyntheticSpec& spec, TargetMasks* masks) {
  spec.validate();
  Rng master(spec.seed);
  Rng rng_bg = master.fork(1);
  Rng rng_traj = master.fork(2);
  Rng rng_color = master.fork(3);
  Rng rng_jitter = master.fork(4);
  Rng rng_distract = master.fork(5);

  const int W = spec.frame_w, H = spec.frame_h;
  BackgroundField bg = BackgroundField::make(W, H, &rng_bg);
  const double bg_drift_amp = 4.0;
  const double bg_phase = rng_bg.uniform(0.0, 6.28);

  Trajectory traj = Trajectory::random(&rng_traj, spec.waypoints, spec.target_w, spec.target_h,
                                       W, H);

  const Rgb tint_start{rng_color.uniform(150, 230), rng_color.uniform(60, 140),
                       rng_color.uniform(40, 120)};
  const Rgb tint_end{tint_start.r - spec.appearance_drift * 80.0,
                     tint_start.g + spec.appearance_drift * 70.0,
                     tint_start.b + spec.appearance_drift * 90.0};
  const Rgb tint_alt{tint_start.b, tint_start.r, tint_start.g};  // checker partner

  struct Distractor {
    Trajectory traj;
    double w, h;
    Rgb tint_a, tint_b;
    std::uint64_t noise;
  };
  std::vector<Distractor> distractors;
  for (int d = 0; d < spec.distractors; ++d) {
    Distractor dis;
    dis.traj = Trajectory::random(&rng_distract, std::max(2, spec.waypoints), spec.target_w,
                                  spec.target_h, W, H);
    dis.w = spec.target_w * rng_distract.uniform(0.8, 1.2);
    dis.h = spec.target_h * rng_distract.uniform(0.8, 1.2);
    const Rgb other{rng_distract.uniform(40, 220), rng_distract.uniform(40, 220),
                    rng_distract.uniform(40, 220)};
    dis.tint_a = mix(other, tint_start, spec.distractor_similarity);
    dis.tint_b = mix(other, tint_alt, spec.distractor_similarity);
    dis.noise = rng_distract.next_u64();
    distractors.push_back(dis);
  }
  const std::uint64_t target_noise = rng_color.next_u64();

  Sequence seq;
  seq.name = spec.name;
  if (spec.distractors > 0) seq.attributes.push_back("distractors");
  if (!spec.occlusion_events.empty()) seq.attributes.push_back("occlusion");
  if (!spec.blur_events.empty()) seq.attributes.push_back("blur");
  if (spec.scale_rate > 0) seq.attributes.push_back("scale-change");

  if (masks) masks->clear();

  for (int f = 0; f < spec.n_frames; ++f) {
    const double u = spec.n_frames > 1 ? static_cast<double>(f) / (spec.n_frames - 1) : 0.0;

    // Ground truth: integer box, always inside the frame.
    auto [cx, cy] = traj.at(u);
    cx += rng_jitter.uniform(-spec.jitter_amp, spec.jitter_amp);
    cy += rng_jitter.uniform(-spec.jitter_amp, spec.jitter_amp);
    const double scale = 1.0 + spec.scale_rate * std::sin(u * 6.283185307179586);
    const int tw = std::max(8, static_cast<int>(std::lround(spec.target_w * scale)));
    const int th = std::max(8, static_cast<int>(std::lround(spec.target_h * scale)));
    IntBox box;
    box.w = std::min(tw, W - 2);
    box.h = std::min(th, H - 2);
    box.x0 = std::clamp(static_cast<int>(std::lround(cx - box.w / 2.0)), 0, W - box.w);
    box.y0 = std::clamp(static_cast<int>(std::lround(cy - box.h / 2.0)), 0, H - box.h);

    Image frame;
    frame.width = W;
    frame.height = H;
    frame.rgb.resize(static_cast<std::size_t>(W) * H * 3);
    const double dx = bg_drift_amp * std::sin(u * 6.283185307179586 + bg_phase);
    const double dy = bg_drift_amp * std::cos(u * 6.283185307179586 + bg_phase);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        Rgb c = bg.sample(x + dx + bg_drift_amp, y + dy + bg_drift_amp);
        const double n = 6.0 * coord_noise(spec.seed ^ 0x5eedull, x, y);
        auto* px = frame.px(x, y);
        px[0] = static_cast<std::uint8_t>(std::clamp(c.r + n, 0.0, 255.0));
        px[1] = static_cast<std::uint8_t>(std::clamp(c.g + n, 0.0, 255.0));
        px[2] = static_cast<std::uint8_t>(std::clamp(c.b + n, 0.0, 255.0));
      }

    for (const auto& dis : distractors) {
      auto [dcx, dcy] = dis.traj.at(u);
      IntBox db;
      db.w = std::max(6, static_cast<int>(std::lround(dis.w)));
      db.h = std::max(6, static_cast<int>(std::lround(dis.h)));
      db.x0 = std::clamp(static_cast<int>(std::lround(dcx - db.w / 2.0)), 0, W - db.w);
      db.y0 = std::clamp(static_cast<int>(std::lround(dcy - db.h / 2.0)), 0, H - db.h);
      fill_textured_rect(frame, db, dis.tint_a, dis.tint_b, dis.noise, nullptr);
    }

    std::vector<std::uint8_t> mask;
    if (masks) mask.assign(static_cast<std::size_t>(W) * H, 0);
    const Rgb tint_now = mix(tint_start, tint_end, u);
    const Rgb tint_now_alt = mix(tint_alt, tint_end, u * 0.5);
    fill_textured_rect(frame, box, tint_now, tint_now_alt, target_noise,
                       masks ? &mask : nullptr);

    for (const auto& occ : spec.occlusion_events) {
      if (f < occ.start || f >= occ.start + occ.duration) continue;
      IntBox ob = box;
      ob.w = std::min(box.w, static_cast<int>(std::ceil(box.w * occ.coverage)));
      // sweep the occluder over the hidden fraction from the left edge
      const int xa = std::max(0, ob.x0), xb = std::min(W, ob.x0 + ob.w);
      const int ya = std::max(0, ob.y0), yb = std::min(H, ob.y1());
      for (int y = ya; y < yb; ++y)
        for (int x = xa; x < xb; ++x) {
          auto* px = frame.px(x, y);
          px[0] = 38;
          px[1] = 38;
          px[2] = 46;
        }
    }

    for (const auto& blur : spec.blur_events)
      if (f >= blur.start && f < blur.start + blur.duration)
        frame = gaussian_blur(frame, blur.sigma);

    seq.frames.push_back(std::move(frame));
    seq.gt.push_back(BBox::from_corner(box.x0, box.y0, box.w, box.h));
    if (masks) masks->push_back(std::move(mask));
  }
  return seq;
}

std::vector<SyntheticSpec> default_benchmark_specs(std::uint64_t seed, int sequences, int frames) {
  std::vector<SyntheticSpec> specs;
  Rng master(seed);
  for (int i = 0; i < sequences; ++i) {
    Rng rng = master.fork(static_cast<std::uint64_t>(i) + 100);
    SyntheticSpec s;
    char name[32];
    std::snprintf(name, sizeof(name), "synth_%02d", i);
    s.name = name;
    s.n_frames = frames;
    s.seed = rng.next_u64();
    s.target_w = rng.uniform(26.0, 44.0);
    s.target_h = rng.uniform(22.0, 38.0);
    s.waypoints = static_cast<int>(rng.uniform_int(3, 5));
    s.jitter_amp = rng.uniform(0.4, 1.6);
    s.scale_rate = rng.uniform(0.0, 0.16);
    s.appearance_drift = rng.uniform(0.1, 0.5);
    if (i % 4 == 1) {
      s.distractors = 2;
      s.distractor_similarity = rng.uniform(0.55, 0.8);
    } else if (i % 4 == 3) {
      s.distractors = 1;
      s.distractor_similarity = rng.uniform(0.6, 0.9);
    }
    if (i % 5 == 2) {
      OcclusionEvent occ;
      occ.start = static_cast<int>(rng.uniform_int(frames / 3, frames / 2));
      occ.duration = static_cast<int>(rng.uniform_int(5, 9));
      occ.coverage = rng.uniform(0.7, 1.0);
      s.occlusion_events.push_back(occ);
    }
    if (i % 5 == 4) {
      BlurEvent bl;
      bl.start = static_cast<int>(rng.uniform_int(frames / 4, 2 * frames / 3));
      bl.duration = static_cast<int>(rng.uniform_int(6, 12));
      bl.sigma = rng.uniform(0.9, 1.7);
      s.blur_events.push_back(bl);
    }
    specs.push_back(std::move(s));
  }
  return specs;
}

}  // namespace tempotrack
