#include "ipx/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>
#include <random>

#include "ipx/error.hpp"
#include "ipx/imgproc.hpp"

namespace ipx::synth {

namespace {

constexpr double kPi = std::numbers::pi;
// 2018-12-12T00:00:00Z, first day of the enrollment visits.
constexpr std::int64_t kEpoch = 1544572800;

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Portable draws: the standard distributions are implementation-defined.
struct Rng {
  std::mt19937_64 engine;
  explicit Rng(std::uint64_t seed) : engine(seed) {}

  double uniform() { return (static_cast<double>(engine() >> 11) + 0.5) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int integer(int lo, int hi) { return lo + static_cast<int>(engine() % static_cast<std::uint64_t>(hi - lo + 1)); }
  double normal() {
    double u1 = uniform(), u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2 * kPi * u2);
  }
};

double wrap_pi(double a) {
  double t = std::fmod(a, kPi);
  return t < 0 ? t + kPi : t;
}

struct Wave {
  double kx, ky, phase, amplitude;
};

std::vector<Wave> smooth_waves(Rng& rng, int count, double min_wavelength, double max_wavelength, double amplitude) {
  std::vector<Wave> waves;
  for (int i = 0; i < count; ++i) {
    double dir = rng.uniform(0, 2 * kPi);
    double k = 2 * kPi / rng.uniform(min_wavelength, max_wavelength);
    waves.push_back({k * std::cos(dir), k * std::sin(dir), rng.uniform(0, 2 * kPi), amplitude * rng.uniform(0.5, 1.0)});
  }
  return waves;
}

double eval_waves(const std::vector<Wave>& waves, double x, double y) {
  double v = 0;
  for (const auto& w : waves) v += w.amplitude * std::sin(w.kx * x + w.ky * y + w.phase);
  return v;
}

PatternClass draw_pattern(Rng& rng) {
  double u = rng.uniform();
  if (u < 0.60) return PatternClass::Loop;
  if (u < 0.85) return PatternClass::Whorl;
  if (u < 0.93) return PatternClass::Arch;
  return PatternClass::TentedArch;
}

struct Model {
  PatternClass pattern;
  std::vector<Singularity> singularities;
  double rotation = 0;
  double cx = 0, cy = 0;
  double arch_width = 1, arch_height = 1;
  std::vector<Wave> wobble;
};

double evaluate(const Model& m, double x, double y) {
  double theta = m.rotation + eval_waves(m.wobble, x, y);
  if (m.pattern == PatternClass::Arch) {
    // Ridges follow y = y0 - h(y0) exp(-u^2): gentle hump, flatter toward the bottom.
    double u = (x - m.cx) / m.arch_width;
    double lift = 1.2 / (1.0 + std::exp((y - m.cy) / m.arch_height));
    double slope = lift * 2 * u * std::exp(-u * u);
    theta += std::atan(slope);
  } else {
    for (const auto& s : m.singularities) {
      double a = std::atan2(y - s.y, x - s.x);
      theta += s.kind == SingularityKind::Delta ? 0.5 * a : -0.5 * a;
    }
  }
  return wrap_pi(theta);
}

Model build_model(Rng& rng, PatternClass pattern, int size) {
  Model m;
  m.pattern = pattern;
  m.cx = size / 2.0 + rng.uniform(-25, 25);
  m.cy = size / 2.0 + rng.uniform(-25, 25);
  m.rotation = std::clamp(rng.normal() * 0.12, -0.3, 0.3);
  m.wobble = smooth_waves(rng, 3, 200, 420, 0.08);
  auto add = [&](SingularityKind k, double x, double y) { m.singularities.push_back({k, x, y}); };
  switch (pattern) {
    case PatternClass::Arch:
      m.arch_width = rng.uniform(70, 110);
      m.arch_height = rng.uniform(40, 80);
      break;
    case PatternClass::TentedArch: {
      double x = m.cx + rng.uniform(-15, 15), y = m.cy + rng.uniform(-50, -20);
      add(SingularityKind::Core, x, y);
      add(SingularityKind::Delta, x + rng.uniform(-10, 10), y + rng.uniform(55, 85));
      break;
    }
    case PatternClass::Loop: {
      double x = m.cx + rng.uniform(-30, 30), y = m.cy + rng.uniform(-60, -15);
      double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
      add(SingularityKind::Core, x, y);
      add(SingularityKind::Delta, x + side * rng.uniform(70, 115), y + rng.uniform(90, 140));
      break;
    }
    case PatternClass::Whorl: {
      double x = m.cx + rng.uniform(-25, 25), y = m.cy + rng.uniform(-55, -25);
      add(SingularityKind::Core, x, y);
      add(SingularityKind::Core, x + rng.uniform(-15, 15), y + rng.uniform(25, 45));
      double dy = y + rng.uniform(100, 150);
      add(SingularityKind::Delta, x - rng.uniform(95, 135), dy + rng.uniform(-15, 15));
      add(SingularityKind::Delta, x + rng.uniform(95, 135), dy + rng.uniform(-15, 15));
      break;
    }
  }
  return m;
}

// Rebuilds the orientation model from the stored master fields.
Model model_of(const MasterPrint& master) {
  Rng rng(master.seed);
  (void)draw_pattern(rng);
  return build_model(rng, master.pattern, master.pattern_image.width());
}

}  // namespace

std::string_view to_string(PatternClass c) {
  switch (c) {
    case PatternClass::Arch: return "arch";
    case PatternClass::TentedArch: return "tented_arch";
    case PatternClass::Loop: return "loop";
    case PatternClass::Whorl: return "whorl";
  }
  return "unknown";
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  std::uint64_t state = base;
  splitmix64(state);
  state ^= a * 0xD1B54A32D192ED03ULL;
  splitmix64(state);
  state ^= b * 0xABC98388FB8FAC03ULL;
  return splitmix64(state);
}

MasterPrint synth_master(std::uint64_t seed, const MasterOptions& options) {
  if (options.size < 64) throw Error(ErrorCode::InvalidArgument, "master canvas too small");
  if (!(options.min_period_500 > 0) || options.max_period_500 < options.min_period_500) {
    throw Error(ErrorCode::InvalidArgument, "bad ridge period range");
  }
  Rng rng(seed);
  MasterPrint master;
  master.seed = seed;
  PatternClass drawn = draw_pattern(rng);
  master.pattern = options.pattern.value_or(drawn);
  Model model = build_model(rng, master.pattern, options.size);
  master.singularities = model.singularities;
  master.base_ridge_period_at_500ppi = rng.uniform(options.min_period_500, options.max_period_500);
  const double period = master.base_ridge_period_at_500ppi * kMasterPpi / 500.0;
  auto period_waves = smooth_waves(rng, 2, 250, 450, 0.04);

  const int size = options.size;
  const int bs = master.block_size;
  const int cells = (size + bs - 1) / bs;
  master.orientation = Grid<double>(cells, cells, 0.0);
  master.period = Grid<double>(cells, cells, period);
  for (int r = 0; r < cells; ++r) {
    for (int c = 0; c < cells; ++c) {
      double x = (c + 0.5) * bs, y = (r + 0.5) * bs;
      master.orientation.at(c, r) = evaluate(model, x, y);
      master.period.at(c, r) = period * (1.0 + eval_waves(period_waves, x, y));
    }
  }

  imgproc::RidgeAnalysis analysis;
  analysis.block_size = bs;
  analysis.mask = Grid<std::uint8_t>(cells, cells, 1);
  analysis.orientation = master.orientation;
  analysis.coherence = Grid<double>(cells, cells, 1.0);
  analysis.frequency = Grid<double>(cells, cells, 0.0);
  for (std::size_t i = 0; i < analysis.frequency.size(); ++i) {
    analysis.frequency.values()[i] = 1.0 / master.period.values()[i];
  }

  // Iterated oriented filtering of seeded noise grows a stable ridge pattern.
  FingerprintImage img(size, size, kMasterPpi);
  for (auto& p : img.pixels()) p = static_cast<std::uint8_t>(rng.engine() >> 56);
  for (int it = 0; it < std::max(1, options.iterations); ++it) {
    img = imgproc::enhance(img, analysis);
    if (it + 1 < options.iterations) {
      // Hard clipping between passes pushes the pattern toward binary ridges.
      for (auto& p : img.pixels()) p = p < 128 ? 0 : 255;
    }
  }
  master.pattern_image = std::move(img);
  return master;
}

double model_orientation(const MasterPrint& master, double x, double y) { return evaluate(model_of(master), x, y); }

Perturbation Perturbation::none() {
  Perturbation p;
  p.rotation_deg = 0;
  p.translation_px = 0;
  p.elastic_amplitude = 0;
  p.elastic_bumps = 0;
  p.blur_sigma = 0;
  p.wetness = 0;
  p.noise_sigma = 0;
  p.touch_jitter = 0;
  return p;
}

FingerprintImage render_capture(const MasterPrint& master, double age_days, const Perturbation& pert,
                                std::uint64_t impression_seed, const GrowthModel& growth, const RenderOptions& render) {
  if (age_days < 0) throw Error(ErrorCode::InvalidArgument, "age must be non-negative");
  if (master.pattern_image.empty()) throw Error(ErrorCode::InvalidArgument, "master has no pattern");
  Rng rng(impression_seed);
  const int n = render.canvas;
  const double s = growth.scale(age_days);
  const double ratio = static_cast<double>(kCapturePpi) / kMasterPpi;
  const double period = master.base_ridge_period_at_500ppi * kCapturePpi / 500.0 * s;

  const double rotation = pert.rotation_deg * kPi / 180.0 * rng.normal();
  const double tx = pert.translation_px * rng.normal();
  const double ty = pert.translation_px * rng.normal();
  const double wet = pert.wetness * rng.normal();
  const double axis_a = render.contact_diameter * n / 2 * s * (1 + pert.touch_jitter * rng.normal());
  const double axis_b = axis_a * 1.15 * (1 + pert.touch_jitter * rng.normal());
  const double touch_x = n / 2.0 + tx + 0.5 * pert.translation_px * rng.normal();
  const double touch_y = n / 2.0 + ty + 0.5 * pert.translation_px * rng.normal();

  struct Bump {
    double x, y, radius, dx, dy;
  };
  std::vector<Bump> bumps;
  for (int i = 0; i < pert.elastic_bumps; ++i) {
    double dir = rng.uniform(0, 2 * kPi);
    bumps.push_back({rng.uniform(0, n), rng.uniform(0, n), rng.uniform(0.2, 0.4) * n, std::cos(dir), std::sin(dir)});
  }
  // Displacement on a coarse lattice, scaled so its largest magnitude is the requested amplitude.
  constexpr int kStep = 8;
  const int lattice = n / kStep + 2;
  Grid<float> disp_x(lattice, lattice, 0.0f), disp_y(lattice, lattice, 0.0f);
  if (!bumps.empty() && pert.elastic_amplitude > 0) {
    double peak = 0;
    for (int r = 0; r < lattice; ++r) {
      for (int c = 0; c < lattice; ++c) {
        double x = c * kStep, y = r * kStep, dx = 0, dy = 0;
        for (const auto& b : bumps) {
          double g = std::exp(-((x - b.x) * (x - b.x) + (y - b.y) * (y - b.y)) / (2 * b.radius * b.radius));
          dx += g * b.dx;
          dy += g * b.dy;
        }
        disp_x.at(c, r) = static_cast<float>(dx);
        disp_y.at(c, r) = static_cast<float>(dy);
        peak = std::max(peak, std::hypot(dx, dy));
      }
    }
    const double scale = peak > 0 ? pert.elastic_amplitude * period / peak : 0.0;
    for (auto& v : disp_x.values()) v = static_cast<float>(v * scale);
    for (auto& v : disp_y.values()) v = static_cast<float>(v * scale);
  }
  auto displacement = [&](int x, int y) {
    int c = x / kStep, r = y / kStep;
    double fx = static_cast<double>(x % kStep) / kStep, fy = static_cast<double>(y % kStep) / kStep;
    auto lerp = [&](const Grid<float>& g) {
      return (1 - fx) * (1 - fy) * g.at(c, r) + fx * (1 - fy) * g.at(c + 1, r) + (1 - fx) * fy * g.at(c, r + 1) +
             fx * fy * g.at(c + 1, r + 1);
    };
    return std::pair{lerp(disp_x), lerp(disp_y)};
  };

  const auto& pattern = master.pattern_image;
  const double mcx = pattern.width() / 2.0, mcy = pattern.height() / 2.0;
  const double cr = std::cos(-rotation), sr = std::sin(-rotation);
  const double edge = 0.35 * period;
  const double background = 215.0;
  const double span = 175.0 * std::clamp(pert.contrast, 0.0, 1.0);

  Grid<float> plane(n, n, static_cast<float>(background));
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      auto [ddx, ddy] = displacement(x, y);
      double px = x + ddx, py = y + ddy;
      double ex = (px - touch_x) / axis_a, ey = (py - touch_y) / axis_b;
      double rho = std::sqrt(ex * ex + ey * ey);
      double touch = std::clamp((1.0 - rho) * axis_a / edge, 0.0, 1.0);
      if (touch <= 0) continue;
      double ux = (px - n / 2.0 - tx) / (ratio * s);
      double uy = (py - n / 2.0 - ty) / (ratio * s);
      double mx = mcx + cr * ux - sr * uy;
      double my = mcy + sr * ux + cr * uy;
      int x0 = static_cast<int>(std::floor(mx)), y0 = static_cast<int>(std::floor(my));
      if (x0 < 0 || y0 < 0 || x0 + 1 >= pattern.width() || y0 + 1 >= pattern.height()) continue;
      double fx = mx - x0, fy = my - y0;
      double m = (1 - fx) * (1 - fy) * pattern.at(x0, y0) + fx * (1 - fy) * pattern.at(x0 + 1, y0) +
                 (1 - fx) * fy * pattern.at(x0, y0 + 1) + fx * fy * pattern.at(x0 + 1, y0 + 1);
      double ridge = (128.0 - m) / 64.0;
      double ink = 0.5 * (1.0 + std::tanh(2.5 * (ridge + wet)));
      plane.at(x, y) = static_cast<float>(background - span * ink * touch);
    }
  }
  if (pert.blur_sigma > 0) imgproc::gaussian_blur(plane, pert.blur_sigma);
  FingerprintImage out(n, n, kCapturePpi);
  auto& values = plane.values();
  if (pert.noise_sigma > 0) {
    // Both Box-Muller outputs per draw.
    for (std::size_t i = 0; i < values.size(); i += 2) {
      double radius = pert.noise_sigma * std::sqrt(-2.0 * std::log(rng.uniform()));
      double angle = 2 * kPi * rng.uniform();
      values[i] += static_cast<float>(radius * std::cos(angle));
      if (i + 1 < values.size()) values[i + 1] += static_cast<float>(radius * std::sin(angle));
    }
  }
  auto pixels = out.pixels();
  for (std::size_t i = 0; i < values.size(); ++i) {
    pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(values[i]), 0L, 255L));
  }
  return out;
}

Schedule Schedule::standard() {
  Schedule s;
  s.sessions = {
      SessionSpec{1, 0, 0, 2, 1.0, {}},
      SessionSpec{2, 2, 3, 2, 1.0, {}},
      // 78 of the 118 infants seen in the first two sessions came back.
      SessionSpec{3, 86, 94, 2, 78.0 / 118.0, {}},
  };
  return s;
}

Perturbation perturbation_at_age(const Schedule& schedule, const SessionSpec& session, double age_days) {
  const double f = 1.0 + schedule.young_severity * std::max(0.0, 1.0 - age_days / 90.0);
  Perturbation p = session.perturbation;
  p.rotation_deg *= f;
  p.translation_px *= f;
  p.elastic_amplitude *= f;
  p.blur_sigma *= f;
  p.wetness *= f;
  p.noise_sigma *= f;
  p.touch_jitter *= f;
  p.contrast = std::clamp(p.contrast * (1.0 - 0.25 * (f - 1.0)), 0.05, 1.0);
  return p;
}

namespace {

nlohmann::json to_json(const Perturbation& p) {
  return {{"rotation_deg", p.rotation_deg}, {"translation_px", p.translation_px},
          {"elastic_amplitude", p.elastic_amplitude}, {"elastic_bumps", p.elastic_bumps},
          {"blur_sigma", p.blur_sigma}, {"wetness", p.wetness}, {"contrast", p.contrast},
          {"noise_sigma", p.noise_sigma}, {"touch_jitter", p.touch_jitter}};
}

Perturbation perturbation_from_json(const nlohmann::json& j) {
  Perturbation p;
  p.rotation_deg = j.value("rotation_deg", p.rotation_deg);
  p.translation_px = j.value("translation_px", p.translation_px);
  p.elastic_amplitude = j.value("elastic_amplitude", p.elastic_amplitude);
  p.elastic_bumps = j.value("elastic_bumps", p.elastic_bumps);
  p.blur_sigma = j.value("blur_sigma", p.blur_sigma);
  p.wetness = j.value("wetness", p.wetness);
  p.contrast = j.value("contrast", p.contrast);
  p.noise_sigma = j.value("noise_sigma", p.noise_sigma);
  p.touch_jitter = j.value("touch_jitter", p.touch_jitter);
  return p;
}

std::string hex_seed(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t parse_seed(const nlohmann::json& j) {
  if (j.is_number_unsigned() || j.is_number_integer()) return j.get<std::uint64_t>();
  return std::stoull(j.get<std::string>(), nullptr, 0);
}

}  // namespace

nlohmann::json to_json(const Schedule& s) {
  nlohmann::json sessions = nlohmann::json::array();
  for (const auto& x : s.sessions) {
    sessions.push_back({{"session", x.session},
                        {"offset_min_days", x.offset_min_days},
                        {"offset_max_days", x.offset_max_days},
                        {"impressions_per_thumb", x.impressions_per_thumb},
                        {"attendance", x.attendance},
                        {"perturbation", to_json(x.perturbation)}});
  }
  return {{"sessions", sessions},
          {"enrollment_age_min_days", s.enrollment_age_min_days},
          {"enrollment_age_max_days", s.enrollment_age_max_days},
          {"age_band_weights", s.age_band_weights},
          {"growth_at_90_days", s.growth.growth_at_90_days},
          {"young_severity", s.young_severity},
          {"canvas", s.render.canvas},
          {"contact_diameter", s.render.contact_diameter}};
}

Schedule schedule_from_json(const nlohmann::json& j) {
  try {
    Schedule s = Schedule::standard();
    if (j.contains("sessions")) {
      s.sessions.clear();
      for (const auto& x : j.at("sessions")) {
        SessionSpec spec;
        spec.session = x.at("session").get<int>();
        spec.offset_min_days = x.value("offset_min_days", x.value("offset_days", 0));
        spec.offset_max_days = x.value("offset_max_days", spec.offset_min_days);
        spec.impressions_per_thumb = x.value("impressions_per_thumb", 2);
        spec.attendance = x.value("attendance", 1.0);
        if (x.contains("perturbation")) spec.perturbation = perturbation_from_json(x.at("perturbation"));
        s.sessions.push_back(spec);
      }
    }
    s.enrollment_age_min_days = j.value("enrollment_age_min_days", s.enrollment_age_min_days);
    s.enrollment_age_max_days = j.value("enrollment_age_max_days", s.enrollment_age_max_days);
    if (j.contains("age_band_weights")) s.age_band_weights = j.at("age_band_weights").get<std::vector<double>>();
    s.growth.growth_at_90_days = j.value("growth_at_90_days", s.growth.growth_at_90_days);
    s.young_severity = j.value("young_severity", s.young_severity);
    s.render.canvas = j.value("canvas", s.render.canvas);
    s.render.contact_diameter = j.value("contact_diameter", s.render.contact_diameter);
    if (s.sessions.empty()) throw Error(ErrorCode::InvalidArgument, "schedule has no sessions");
    for (std::size_t i = 0; i < s.sessions.size(); ++i) {
      const auto& x = s.sessions[i];
      if (x.offset_max_days < x.offset_min_days || x.impressions_per_thumb < 1 || x.attendance < 0 || x.attendance > 1) {
        throw Error(ErrorCode::InvalidArgument, "bad session " + std::to_string(x.session));
      }
      if (i > 0 && x.offset_min_days <= s.sessions[i - 1].offset_max_days) {
        throw Error(ErrorCode::InvalidArgument, "session offsets must increase");
      }
    }
    if (s.age_band_weights.size() != 3) throw Error(ErrorCode::InvalidArgument, "age_band_weights needs three entries");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("schedule json: ") + e.what());
  }
}

nlohmann::json to_json(const CohortManifest& m) {
  nlohmann::json subjects = nlohmann::json::array();
  for (const auto& s : m.subjects) {
    nlohmann::json visits = nlohmann::json::array();
    for (const auto& v : s.visits) visits.push_back({{"session", v.session}, {"offset_days", v.offset_days}});
    nlohmann::json captures = nlohmann::json::array();
    for (const auto& c : s.captures) {
      captures.push_back({{"path", c.path},
                          {"subject_id", c.meta.subject_id},
                          {"finger", to_string(c.meta.finger)},
                          {"session", c.meta.session},
                          {"impression_index", c.meta.impression_index},
                          {"age_at_capture_days", c.meta.age_at_capture_days},
                          {"captured_at", c.meta.captured_at}});
    }
    subjects.push_back({{"subject_id", s.subject_id},
                        {"birth_offset", s.birth_offset},
                        {"enrollment_age_days", s.enrollment_age_days},
                        {"left_seed", hex_seed(s.left_seed)},
                        {"right_seed", hex_seed(s.right_seed)},
                        {"visits", visits},
                        {"captures", captures}});
  }
  return {{"master_seed", hex_seed(m.master_seed)}, {"schedule", to_json(m.schedule)}, {"subjects", subjects}};
}

CohortManifest manifest_from_json(const nlohmann::json& j) {
  try {
    CohortManifest m;
    m.master_seed = parse_seed(j.at("master_seed"));
    m.schedule = schedule_from_json(j.at("schedule"));
    for (const auto& s : j.at("subjects")) {
      SubjectEntry e;
      e.subject_id = s.at("subject_id").get<std::string>();
      e.birth_offset = s.at("birth_offset").get<int>();
      e.enrollment_age_days = s.at("enrollment_age_days").get<int>();
      e.left_seed = parse_seed(s.at("left_seed"));
      e.right_seed = parse_seed(s.at("right_seed"));
      for (const auto& v : s.at("visits")) e.visits.push_back({v.at("session").get<int>(), v.at("offset_days").get<int>()});
      for (const auto& c : s.at("captures")) {
        CaptureEntry ce;
        ce.path = c.at("path").get<std::string>();
        ce.meta.subject_id = c.at("subject_id").get<std::string>();
        ce.meta.finger = parse_finger(c.at("finger").get<std::string>());
        ce.meta.session = c.at("session").get<int>();
        ce.meta.impression_index = c.at("impression_index").get<int>();
        ce.meta.age_at_capture_days = c.at("age_at_capture_days").get<int>();
        ce.meta.captured_at = c.at("captured_at").get<std::int64_t>();
        e.captures.push_back(std::move(ce));
      }
      m.subjects.push_back(std::move(e));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptData, std::string("manifest json: ") + e.what());
  }
}

CohortManifest load_manifest(const std::filesystem::path& path) {
  auto bytes = read_file_bytes(path.string());
  auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::CorruptData, "manifest is not valid json: " + path.string());
  return manifest_from_json(j);
}

CohortManifest plan_cohort(int n_subjects, const Schedule& schedule, std::uint64_t master_seed) {
  if (n_subjects < 1) throw Error(ErrorCode::InvalidArgument, "need at least one subject");
  if (schedule.sessions.empty()) throw Error(ErrorCode::InvalidArgument, "schedule has no sessions");
  CohortManifest m;
  m.master_seed = master_seed;
  m.schedule = schedule;
  const int lo = schedule.enrollment_age_min_days, hi = schedule.enrollment_age_max_days;
  if (lo < 0 || hi < lo) throw Error(ErrorCode::InvalidArgument, "bad enrollment age range");
  // Month bands of 28 days, clipped to the configured range.
  const int band_edges[4] = {lo, std::clamp(28, lo, hi + 1), std::clamp(56, lo, hi + 1), hi + 1};
  double weight_sum = 0;
  for (int b = 0; b < 3; ++b) weight_sum += band_edges[b + 1] > band_edges[b] ? schedule.age_band_weights[b] : 0.0;

  for (int i = 0; i < n_subjects; ++i) {
    Rng rng(derive_seed(master_seed, static_cast<std::uint64_t>(i), 1));
    SubjectEntry e;
    char id[16];
    std::snprintf(id, sizeof id, "S%04d", i + 1);
    e.subject_id = id;
    double u = rng.uniform() * weight_sum;
    int band = 2;
    for (int b = 0; b < 3; ++b) {
      double w = band_edges[b + 1] > band_edges[b] ? schedule.age_band_weights[b] : 0.0;
      if (w <= 0) continue;
      band = b;
      if (u < w) break;
      u -= w;
    }
    e.enrollment_age_days = weight_sum > 0 ? rng.integer(band_edges[band], band_edges[band + 1] - 1) : lo;
    e.birth_offset = e.enrollment_age_days;
    e.left_seed = derive_seed(master_seed, static_cast<std::uint64_t>(i), 2);
    e.right_seed = derive_seed(master_seed, static_cast<std::uint64_t>(i), 3);
    for (const auto& spec : schedule.sessions) {
      int offset = rng.integer(spec.offset_min_days, spec.offset_max_days);
      bool present = rng.uniform() < spec.attendance;
      if (!present) continue;
      e.visits.push_back({spec.session, offset});
      for (Finger finger : {Finger::LeftThumb, Finger::RightThumb}) {
        for (int k = 1; k <= spec.impressions_per_thumb; ++k) {
          CaptureEntry c;
          char name[64];
          std::snprintf(name, sizeof name, "%s/%s_%s_s%d_i%d.pgm", id, id, finger == Finger::LeftThumb ? "L" : "R",
                        spec.session, k);
          c.path = name;
          c.meta.subject_id = e.subject_id;
          c.meta.finger = finger;
          c.meta.session = spec.session;
          c.meta.impression_index = k;
          c.meta.age_at_capture_days = e.birth_offset + offset;
          c.meta.captured_at = kEpoch + static_cast<std::int64_t>(offset) * 86400 + 9 * 3600 + i * 180 +
                               (finger == Finger::LeftThumb ? 0 : 60) + k * 20;
          e.captures.push_back(std::move(c));
        }
      }
    }
    m.subjects.push_back(std::move(e));
  }
  return m;
}

MasterPrint finger_master(const SubjectEntry& subject, Finger finger) {
  return synth_master(finger == Finger::LeftThumb ? subject.left_seed : subject.right_seed);
}

FingerprintImage render_entry(const MasterPrint& master, const SubjectEntry& subject, const CaptureEntry& capture,
                              const Schedule& schedule) {
  auto spec = std::find_if(schedule.sessions.begin(), schedule.sessions.end(),
                           [&](const SessionSpec& s) { return s.session == capture.meta.session; });
  if (spec == schedule.sessions.end()) {
    throw Error(ErrorCode::InvalidArgument, "capture references unknown session " + std::to_string(capture.meta.session));
  }
  const std::uint64_t finger_seed = capture.meta.finger == Finger::LeftThumb ? subject.left_seed : subject.right_seed;
  const std::uint64_t seed = derive_seed(finger_seed, static_cast<std::uint64_t>(capture.meta.session),
                                         static_cast<std::uint64_t>(capture.meta.impression_index));
  const double age = capture.meta.age_at_capture_days;
  auto img = render_capture(master, age, perturbation_at_age(schedule, *spec, age), seed, schedule.growth,
                            schedule.render);
  img.set_meta(capture.meta);
  return img;
}

CohortManifest gen_cohort(int n_subjects, const Schedule& schedule, std::uint64_t master_seed,
                          const std::filesystem::path& out_dir) {
  auto manifest = plan_cohort(n_subjects, schedule, master_seed);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + out_dir.string() + ": " + ec.message());
  for (const auto& subject : manifest.subjects) {
    std::filesystem::create_directories(out_dir / subject.subject_id, ec);
    if (ec) throw Error(ErrorCode::IoError, "cannot create subject directory: " + ec.message());
    const MasterPrint left = finger_master(subject, Finger::LeftThumb);
    const MasterPrint right = finger_master(subject, Finger::RightThumb);
    for (const auto& capture : subject.captures) {
      const auto& master = capture.meta.finger == Finger::LeftThumb ? left : right;
      write_image_file(render_entry(master, subject, capture, schedule), (out_dir / capture.path).string());
    }
  }
  auto text = to_json(manifest).dump(2);
  write_file_bytes((out_dir / "manifest.json").string(), std::vector<std::uint8_t>(text.begin(), text.end()));
  return manifest;
}

}  // namespace ipx::synth
