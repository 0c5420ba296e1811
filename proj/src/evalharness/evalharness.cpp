#include "ipx/evalharness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <sstream>

#include "ipx/error.hpp"
#include "ipx/hash.hpp"
#include "ipx/parallel.hpp"

namespace ipx::eval {

std::string_view to_string(Stack s) {
  switch (s) {
    case Stack::Minutiae500: return "minutiae500";
    case Stack::Minutiae1900: return "minutiae1900";
    case Stack::Texture1900: return "texture1900";
    case Stack::Fused: return "fused";
  }
  return "?";
}

Stack parse_stack(std::string_view name) {
  for (Stack s : kAllStacks) {
    if (to_string(s) == name) return s;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown matcher stack '" + std::string(name) + "'");
}

void ProtocolSpec::validate() const {
  if (enroll_sessions.empty() || probe_sessions.empty()) throw Error(ErrorCode::InvalidArgument, "empty session set");
  for (int s : enroll_sessions) {
    if (probe_sessions.count(s)) throw Error(ErrorCode::InvalidArgument, "enroll and probe sessions overlap");
  }
  if (stacks.empty()) throw Error(ErrorCode::InvalidArgument, "no matcher stacks");
  for (double far : far_points) {
    if (!(far > 0.0 && far <= 1.0)) throw Error(ErrorCode::InvalidArgument, "FAR must be in (0, 1]");
  }
  if (min_enroll_age_days < 0) throw Error(ErrorCode::InvalidArgument, "negative minimum age");
}

nlohmann::json to_json(const ProtocolSpec& p) {
  nlohmann::json stacks = nlohmann::json::array();
  for (Stack s : p.stacks) stacks.push_back(to_string(s));
  return {{"enroll_sessions", p.enroll_sessions},   {"probe_sessions", p.probe_sessions},
          {"min_enroll_age_days", p.min_enroll_age_days}, {"stacks", stacks},
          {"far_points", p.far_points}};
}

ProtocolSpec protocol_from_json(const nlohmann::json& j) {
  try {
    ProtocolSpec p;
    if (j.contains("enroll_sessions")) p.enroll_sessions = j.at("enroll_sessions").get<std::set<int>>();
    if (j.contains("probe_sessions")) p.probe_sessions = j.at("probe_sessions").get<std::set<int>>();
    p.min_enroll_age_days = j.value("min_enroll_age_days", 0);
    if (j.contains("stacks")) {
      p.stacks.clear();
      for (const auto& s : j.at("stacks")) p.stacks.push_back(parse_stack(s.get<std::string>()));
    }
    if (j.contains("far_points")) p.far_points = j.at("far_points").get<std::vector<double>>();
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptData, std::string("protocol json: ") + e.what());
  }
}

namespace {

// Keeps at most `cap` captures per thumb, in (session, impression) order.
std::vector<synth::CaptureEntry> capped(std::vector<synth::CaptureEntry> captures, int cap) {
  std::stable_sort(captures.begin(), captures.end(), [](const auto& a, const auto& b) {
    return std::tie(a.meta.finger, a.meta.session, a.meta.impression_index) <
           std::tie(b.meta.finger, b.meta.session, b.meta.impression_index);
  });
  std::vector<synth::CaptureEntry> out;
  int left = 0, right = 0;
  for (auto& c : captures) {
    int& n = c.meta.finger == Finger::LeftThumb ? left : right;
    if (n++ < cap) out.push_back(std::move(c));
  }
  return out;
}

}  // namespace

PairPlan build_pairs(const synth::CohortManifest& manifest, const ProtocolSpec& spec) {
  spec.validate();
  PairPlan plan;
  for (const auto& subject : manifest.subjects) {
    if (subject.enrollment_age_days < spec.min_enroll_age_days) continue;
    SubjectPlan s;
    s.subject_id = subject.subject_id;
    s.enrollment_age_days = subject.enrollment_age_days;
    std::vector<synth::CaptureEntry> enroll, probe;
    for (const auto& c : subject.captures) {
      if (spec.enroll_sessions.count(c.meta.session)) enroll.push_back(c);
      if (spec.probe_sessions.count(c.meta.session)) probe.push_back(c);
    }
    if (enroll.empty() || probe.empty()) continue;
    s.enroll = capped(std::move(enroll), fusion::kMaxEnrollImpressions);
    s.probe = capped(std::move(probe), fusion::kMaxProbeImpressions);
    plan.subjects.push_back(std::move(s));
  }
  std::sort(plan.subjects.begin(), plan.subjects.end(),
            [](const SubjectPlan& a, const SubjectPlan& b) { return a.subject_id < b.subject_id; });
  const std::size_t n = plan.subjects.size();
  for (std::size_t p = 0; p < n; ++p) {
    plan.genuine.emplace_back(p, p);
    for (std::size_t e = 0; e < n; ++e) {
      if (e != p) plan.impostor.emplace_back(e, p);
    }
  }
  if (plan.impostor.empty()) {
    throw Error(ErrorCode::EmptyCohort, std::to_string(n) + " returning subject(s) at or above " +
                                            std::to_string(spec.min_enroll_age_days) + " days: no impostor pairs");
  }
  return plan;
}

namespace {

// Largest k with k <= far * n.
std::size_t allowed_exceedances(double far, std::size_t n) {
  const double cap = far * static_cast<double>(n);
  auto k = static_cast<std::size_t>(std::floor(cap));
  while (static_cast<double>(k + 1) <= cap) ++k;
  while (k > 0 && static_cast<double>(k) > cap) --k;
  return k;
}

double threshold_rule(std::span<const double> genuine, std::span<const double> impostor, double far) {
  std::vector<double> imp(impostor.begin(), impostor.end());
  std::sort(imp.begin(), imp.end(), std::greater<>());
  const std::size_t k = allowed_exceedances(far, imp.size());
  if (k >= imp.size()) {
    double lo = kMaxScore;
    for (double s : genuine) lo = std::min(lo, s);
    for (double s : impostor) lo = std::min(lo, s);
    return lo;
  }
  // Any threshold above the (k+1)-th largest impostor score leaves at most k exceedances.
  const double v = imp[k];
  double t = kMaxScore;
  for (double s : genuine) {
    if (s > v) t = std::min(t, s);
  }
  for (double s : impostor) {
    if (s > v) t = std::min(t, s);
  }
  return t;
}

}  // namespace

double threshold_at_far(std::span<const double> genuine, std::span<const double> impostor, double far) {
  if (!(far > 0.0 && far <= 1.0)) throw Error(ErrorCode::InvalidArgument, "FAR must be in (0, 1]");
  if (far * static_cast<double>(impostor.size()) < 1.0) {
    throw Error(ErrorCode::InsufficientImpostors, std::to_string(impostor.size()) + " impostor scores cannot resolve FAR " +
                                                      std::to_string(far));
  }
  return threshold_rule(genuine, impostor, far);
}

double tar_at_far(std::span<const double> genuine, std::span<const double> impostor, double far) {
  if (genuine.empty()) throw Error(ErrorCode::InvalidArgument, "no genuine scores");
  const double t = threshold_at_far(genuine, impostor, far);
  const auto hits = std::count_if(genuine.begin(), genuine.end(), [t](double s) { return s >= t; });
  return static_cast<double>(hits) / static_cast<double>(genuine.size());
}

std::vector<DetPoint> det_curve(std::span<const double> genuine, std::span<const double> impostor) {
  if (genuine.empty() || impostor.empty()) throw Error(ErrorCode::InvalidArgument, "DET needs both score sets");
  std::vector<double> g(genuine.begin(), genuine.end()), im(impostor.begin(), impostor.end());
  std::sort(g.begin(), g.end());
  std::sort(im.begin(), im.end());
  std::vector<double> all;
  all.reserve(g.size() + im.size());
  std::merge(g.begin(), g.end(), im.begin(), im.end(), std::back_inserter(all));
  all.erase(std::unique(all.begin(), all.end()), all.end());
  std::vector<DetPoint> out;
  out.reserve(all.size());
  const double ng = static_cast<double>(g.size()), ni = static_cast<double>(im.size());
  for (double t : all) {
    auto below_g = std::lower_bound(g.begin(), g.end(), t) - g.begin();
    auto below_i = std::lower_bound(im.begin(), im.end(), t) - im.begin();
    out.push_back({t, static_cast<double>(im.size() - below_i) / ni, static_cast<double>(below_g) / ng});
  }
  return out;
}

CaptureSource disk_source(const std::filesystem::path& manifest_dir) {
  return [manifest_dir](const synth::SubjectEntry&, const synth::CaptureEntry& capture) {
    auto img = load_image_file((manifest_dir / capture.path).string());
    img.set_meta(capture.meta);
    return img;
  };
}

CaptureSource render_source(const synth::CohortManifest& manifest) {
  auto schedule = std::make_shared<const synth::Schedule>(manifest.schedule);
  return [schedule](const synth::SubjectEntry& subject, const synth::CaptureEntry& capture) {
    // Masters are pure functions of their seed; keep the last two per thread.
    thread_local std::vector<std::pair<std::uint64_t, synth::MasterPrint>> cache;
    const std::uint64_t seed = capture.meta.finger == Finger::LeftThumb ? subject.left_seed : subject.right_seed;
    auto it = std::find_if(cache.begin(), cache.end(), [seed](const auto& e) { return e.first == seed; });
    if (it == cache.end()) {
      if (cache.size() >= 2) cache.erase(cache.begin());
      cache.emplace_back(seed, synth::finger_master(subject, capture.meta.finger));
      it = cache.end() - 1;
    }
    return synth::render_entry(it->second, subject, capture, *schedule);
  };
}

CohortTemplates extract_templates(const synth::CohortManifest& manifest, const ProtocolSpec& spec,
                                  const CaptureSource& source, const RunOptions& options) {
  auto plan = build_pairs(manifest, spec);
  std::map<std::string, const synth::SubjectEntry*> entries;
  for (const auto& s : manifest.subjects) entries[s.subject_id] = &s;

  const std::size_t n = plan.subjects.size();
  std::vector<fusion::SubjectTemplate> enroll(n), probe(n);
  std::vector<char> usable(n, 0);
  std::atomic<int> failed{0};
  std::mutex progress_mutex;
  std::size_t done = 0;
  parallel_for(n, options.threads, [&](std::size_t i) {
    const auto& s = plan.subjects[i];
    const auto& entry = *entries.at(s.subject_id);
    auto features = [&](const std::vector<synth::CaptureEntry>& captures) {
      std::vector<fusion::ImpressionFeatures> f;
      for (const auto& c : captures) {
        try {
          f.push_back(fusion::extract_features(source(entry, c), options.features));
        } catch (const Error& e) {
          if (e.code() != ErrorCode::EmptyForeground) throw;
          ++failed;
        }
      }
      return f;
    };
    auto e = features(s.enroll);
    auto p = features(s.probe);
    if (!e.empty() && !p.empty()) {
      enroll[i] = fusion::assemble_template(std::move(e), fusion::Role::Enrollment);
      probe[i] = fusion::assemble_template(std::move(p), fusion::Role::Probe);
      usable[i] = (enroll[i].left && probe[i].left) || (enroll[i].right && probe[i].right);
    }
    if (options.progress) {
      std::lock_guard lock(progress_mutex);
      options.progress("features", ++done, n);
    }
  });
  CohortTemplates out;
  out.failed_captures = failed.load();
  for (std::size_t i = 0; i < n; ++i) {
    if (!usable[i]) {
      out.excluded.push_back(plan.subjects[i].subject_id);
      continue;
    }
    out.subjects.push_back(std::move(plan.subjects[i]));
    out.enroll.push_back(std::move(enroll[i]));
    out.probe.push_back(std::move(probe[i]));
  }
  return out;
}

ScoreCube score_cohort(const CohortTemplates& templates, const RunOptions& options) {
  ScoreCube cube;
  const std::size_t n = templates.subjects.size();
  for (const auto& s : templates.subjects) {
    cube.subject_ids.push_back(s.subject_id);
    cube.enrollment_ages.push_back(s.enrollment_age_days);
  }
  cube.raw.resize(n * n);
  std::mutex progress_mutex;
  std::size_t done = 0;
  parallel_for(n, options.threads, [&](std::size_t p) {
    for (std::size_t e = 0; e < n; ++e) {
      cube.raw[p * n + e] = fusion::raw_scores(templates.enroll[e], templates.probe[p], fusion::kAllChannels);
    }
    if (options.progress) {
      std::lock_guard lock(progress_mutex);
      options.progress("scores", ++done, n);
    }
  });
  return cube;
}

double stack_score(const std::map<Finger, std::map<fusion::Channel, double>>& raw, Stack stack,
                   const fusion::Calibration& calibration) {
  if (raw.empty()) return 0.0;
  if (stack == Stack::Fused) return fusion::fuse_raw(raw, calibration).fused;
  const fusion::Channel ch = stack == Stack::Minutiae500    ? fusion::Channel::Minutiae500
                             : stack == Stack::Minutiae1900 ? fusion::Channel::Minutiae
                                                            : fusion::Channel::Texture;
  std::optional<double> left, right;
  for (const auto& [finger, scores] : raw) {
    auto it = scores.find(ch);
    if (it == scores.end()) throw Error(ErrorCode::NoScores, "no " + std::string(fusion::to_string(ch)) + " score");
    (finger == Finger::LeftThumb ? left : right) = it->second;
  }
  return fusion::fuse_fingers(left, right);
}

namespace {

std::vector<std::size_t> stratum_members(const ScoreCube& cube, int min_age) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < cube.size(); ++i) {
    if (cube.enrollment_ages[i] >= min_age) idx.push_back(i);
  }
  return idx;
}

nlohmann::json det_json(const std::vector<DetPoint>& det) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& d : det) out.push_back({d.threshold, d.fmr, d.fnmr});
  return out;
}

nlohmann::json rate_map(const std::map<double, double>& m) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& [k, v] : m) out.push_back({k, v});
  return out;
}

std::string far_label(double far) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g%%", far * 100);
  return buf;
}

}  // namespace

nlohmann::json to_json(const EvalReport& r) {
  return {{"stack", to_string(r.stack)},
          {"min_enroll_age_days", r.min_enroll_age_days},
          {"cohort", {{"n_subjects", r.cohort.n_subjects}, {"age_bounds", {r.cohort.min_age_days, r.cohort.max_age_days}}}},
          {"tar_at_far", rate_map(r.tar_at_far)},
          {"threshold_at_far", rate_map(r.threshold_at_far)},
          {"genuine_scores", r.genuine_scores},
          {"impostor_scores", r.impostor_scores},
          {"det_curve", det_json(r.det_curve)},
          {"config_hash", r.config_hash}};
}

EvalReport evaluate(const ScoreCube& cube, const ProtocolSpec& spec, Stack stack,
                    const fusion::Calibration& calibration) {
  spec.validate();
  const auto members = stratum_members(cube, spec.min_enroll_age_days);
  if (members.size() < 2) {
    throw Error(ErrorCode::EmptyCohort, "stratum from " + std::to_string(spec.min_enroll_age_days) +
                                            " days has " + std::to_string(members.size()) + " subject(s)");
  }
  EvalReport r;
  r.stack = stack;
  r.min_enroll_age_days = spec.min_enroll_age_days;
  r.cohort.n_subjects = static_cast<int>(members.size());
  r.cohort.min_age_days = cube.enrollment_ages[members.front()];
  r.cohort.max_age_days = r.cohort.min_age_days;
  for (std::size_t p : members) {
    r.cohort.min_age_days = std::min(r.cohort.min_age_days, cube.enrollment_ages[p]);
    r.cohort.max_age_days = std::max(r.cohort.max_age_days, cube.enrollment_ages[p]);
    for (std::size_t e : members) {
      double s = stack_score(cube.at(p, e), stack, calibration);
      (p == e ? r.genuine_scores : r.impostor_scores).push_back(s);
    }
  }
  for (double far : spec.far_points) {
    // Rates the impostor count cannot resolve are left out of the report.
    if (far * static_cast<double>(r.impostor_scores.size()) < 1.0) continue;
    r.threshold_at_far[far] = threshold_at_far(r.genuine_scores, r.impostor_scores, far);
    r.tar_at_far[far] = tar_at_far(r.genuine_scores, r.impostor_scores, far);
  }
  r.det_curve = det_curve(r.genuine_scores, r.impostor_scores);

  nlohmann::json config = {{"protocol", to_json(spec)}, {"stack", to_string(stack)},
                           {"calibration", fusion::to_json(calibration)}};
  nlohmann::json ids = nlohmann::json::array();
  for (std::size_t p : members) ids.push_back(cube.subject_ids[p]);
  config["subjects"] = ids;
  r.config_hash = sha256_hex(config.dump());
  return r;
}

IdentificationSummary identify_rank1(const ScoreCube& cube, int min_enroll_age_days,
                                     const fusion::Calibration& calibration) {
  const auto members = stratum_members(cube, min_enroll_age_days);
  IdentificationSummary out;
  out.min_enroll_age_days = min_enroll_age_days;
  for (std::size_t p : members) {
    std::size_t best = members.front();
    double best_score = -1;
    for (std::size_t e : members) {
      double s = fusion::fuse_raw(cube.at(p, e), calibration).fused;
      if (s > best_score || (s == best_score && cube.subject_ids[e] < cube.subject_ids[best])) {
        best = e;
        best_score = s;
      }
    }
    ++out.probes;
    if (best == p) ++out.rank1_hits;
  }
  return out;
}

AblationTable run_ablation(const ScoreCube& cube, const ProtocolSpec& base, const std::vector<int>& strata,
                           const fusion::Calibration& calibration) {
  base.validate();
  if (strata.empty()) throw Error(ErrorCode::InvalidArgument, "no strata");
  AblationTable t;
  t.strata = strata;
  t.stacks = base.stacks;
  t.far_points = base.far_points;
  for (int min_age : strata) {
    ProtocolSpec spec = base;
    spec.min_enroll_age_days = min_age;
    for (Stack stack : base.stacks) t.reports.push_back(evaluate(cube, spec, stack, calibration));
    t.identification.push_back(identify_rank1(cube, min_age, calibration));
  }
  return t;
}

AblationTable run_ablation(const synth::CohortManifest& manifest, const CaptureSource& source,
                           const ProtocolSpec& base, const std::vector<int>& strata,
                           const fusion::Calibration& calibration, const RunOptions& options) {
  for (int s : strata) {
    if (s < base.min_enroll_age_days) {
      throw Error(ErrorCode::InvalidArgument, "stratum below the protocol's minimum enrollment age");
    }
  }
  auto templates = extract_templates(manifest, base, source, options);
  auto cube = score_cohort(templates, options);
  return run_ablation(cube, base, strata, calibration);
}

std::string stratum_label(int min_enroll_age_days) {
  return std::to_string(min_enroll_age_days / 28) + " - 3 months";
}

nlohmann::json to_json(const AblationTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t s = 0; s < t.strata.size(); ++s) {
    nlohmann::json reports = nlohmann::json::array();
    for (std::size_t k = 0; k < t.stacks.size(); ++k) reports.push_back(to_json(t.at(s, k)));
    nlohmann::json row = {{"stratum", stratum_label(t.strata[s])},
                          {"min_enroll_age_days", t.strata[s]},
                          {"n_subjects", t.at(s, 0).cohort.n_subjects},
                          {"reports", reports}};
    if (s < t.identification.size()) {
      const auto& id = t.identification[s];
      row["identification"] = {{"probes", id.probes}, {"rank1_hits", id.rank1_hits}, {"rank1_rate", id.rank1_rate()}};
    }
    rows.push_back(row);
  }
  nlohmann::json stacks = nlohmann::json::array();
  for (Stack s : t.stacks) stacks.push_back(to_string(s));
  return {{"format", "ipx-ablation"}, {"version", 1}, {"far_points", t.far_points}, {"stacks", stacks}, {"rows", rows}};
}

std::string to_csv(const AblationTable& t) {
  std::ostringstream out;
  out.precision(17);
  out << "stratum,min_enroll_age_days,n_subjects,stack,far,tar,threshold\n";
  for (std::size_t s = 0; s < t.strata.size(); ++s) {
    for (std::size_t k = 0; k < t.stacks.size(); ++k) {
      const auto& r = t.at(s, k);
      for (double far : t.far_points) {
        out << stratum_label(t.strata[s]) << ',' << t.strata[s] << ',' << r.cohort.n_subjects << ','
            << to_string(t.stacks[k]) << ',' << far << ',';
        if (r.tar_at_far.count(far)) {
          out << r.tar_at_far.at(far) << ',' << r.threshold_at_far.at(far) << '\n';
        } else {
          out << ",\n";
        }
      }
    }
  }
  return out.str();
}

std::string format_table(const AblationTable& t) {
  std::ostringstream out;
  char buf[64];
  const int cell = 9;
  const int first = 26;
  out << std::string(first, ' ');
  for (Stack s : t.stacks) {
    std::snprintf(buf, sizeof buf, "| %-*s", static_cast<int>(cell * t.far_points.size()), std::string(to_string(s)).c_str());
    out << buf;
  }
  out << "| rank-1\n" << std::string(first, ' ');
  for (std::size_t k = 0; k < t.stacks.size(); ++k) {
    out << "| ";
    for (double far : t.far_points) {
      std::snprintf(buf, sizeof buf, "%-*s", cell, (far_label(far) + " FAR").c_str());
      out << buf;
    }
  }
  out << "|\n";
  for (std::size_t s = 0; s < t.strata.size(); ++s) {
    std::snprintf(buf, sizeof buf, "%s (%d infants)", stratum_label(t.strata[s]).c_str(), t.at(s, 0).cohort.n_subjects);
    std::string label = buf;
    label.resize(first, ' ');
    out << label;
    for (std::size_t k = 0; k < t.stacks.size(); ++k) {
      out << "| ";
      for (double far : t.far_points) {
        const auto& tars = t.at(s, k).tar_at_far;
        if (tars.count(far)) {
          std::snprintf(buf, sizeof buf, "%-*.2f", cell, 100.0 * tars.at(far));
        } else {
          std::snprintf(buf, sizeof buf, "%-*s", cell, "n/a");
        }
        out << buf;
      }
    }
    if (s < t.identification.size()) {
      std::snprintf(buf, sizeof buf, "| %.2f", 100.0 * t.identification[s].rank1_rate());
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

std::string det_csv(const EvalReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << "threshold,fmr,fnmr\n";
  for (const auto& d : r.det_curve) out << d.threshold << ',' << d.fmr << ',' << d.fnmr << '\n';
  return out.str();
}

std::string report_hash(const AblationTable& t) { return sha256_hex(to_json(t).dump()); }

void write_report(const AblationTable& t, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
  auto put = [&](const std::string& name, const std::string& text) {
    write_file_bytes((dir / name).string(), std::vector<std::uint8_t>(text.begin(), text.end()));
  };
  auto j = to_json(t);
  j["report_hash"] = report_hash(t);
  put("report.json", j.dump(1));
  put("report.csv", to_csv(t));
  put("table.txt", format_table(t));
  for (std::size_t s = 0; s < t.strata.size(); ++s) {
    for (std::size_t k = 0; k < t.stacks.size(); ++k) {
      put("det_" + std::to_string(t.strata[s]) + "_" + std::string(to_string(t.stacks[k])) + ".csv",
          det_csv(t.at(s, k)));
    }
  }
}

ThresholdTable export_threshold_table(const EvalReport& report, const std::vector<double>& far_points) {
  if (report.genuine_scores.empty() && report.impostor_scores.empty()) {
    throw Error(ErrorCode::InvalidArgument, "report has no scores");
  }
  ThresholdTable table;
  table.stack = std::string(to_string(report.stack));
  table.provenance = report.config_hash;
  for (double far : far_points) {
    if (!(far >= 0.0 && far <= 1.0)) throw Error(ErrorCode::InvalidArgument, "FAR must be in [0, 1]");
    table.thresholds[far] = far == 0.0 ? kMaxScore : threshold_rule(report.genuine_scores, report.impostor_scores, far);
  }
  return table;
}

CalibrationFit fit_calibration(const ScoreCube& cube, const CalibrationFitOptions& options,
                               const std::string& provenance) {
  if (cube.size() < 2) throw Error(ErrorCode::EmptyCohort, "calibration needs at least two subjects");
  if (options.texture_weights.empty()) throw Error(ErrorCode::InvalidArgument, "no candidate weights");
  CalibrationFit fit;
  auto& cal = fit.calibration;
  for (const auto& pair : cube.raw) {
    for (const auto& [finger, scores] : pair) {
      for (const auto& [ch, v] : scores) {
        auto [it, fresh] = cal.ranges.try_emplace(ch, fusion::Range{v, v});
        if (!fresh) {
          it->second.min = std::min(it->second.min, v);
          it->second.max = std::max(it->second.max, v);
        }
      }
    }
  }
  for (auto& [ch, r] : cal.ranges) {
    if (!(r.max > r.min)) throw Error(ErrorCode::InvalidArgument, "degenerate " + std::string(fusion::to_string(ch)) + " range");
  }
  cal.provenance = provenance;

  double best = -1, best_w = 0.5;
  for (double w : options.texture_weights) {
    if (!(w >= 0.0 && w <= 1.0)) throw Error(ErrorCode::InvalidArgument, "texture weight outside [0, 1]");
    cal.weights = {{fusion::Channel::Texture, w}, {fusion::Channel::Minutiae, 1.0 - w}};
    double total = 0;
    for (int stratum : options.strata) {
      ProtocolSpec spec;
      spec.min_enroll_age_days = stratum;
      spec.stacks = {Stack::Fused};
      spec.far_points = options.far_points;
      if (stratum_members(cube, stratum).size() < 2) continue;
      for (const auto& [far, tar] : evaluate(cube, spec, Stack::Fused, cal).tar_at_far) total += tar;
    }
    fit.objective[w] = total;
    if (total > best || (total == best && std::abs(w - 0.5) < std::abs(best_w - 0.5))) {
      best = total;
      best_w = w;
    }
  }
  cal.weights = {{fusion::Channel::Texture, best_w}, {fusion::Channel::Minutiae, 1.0 - best_w}};
  return fit;
}

}  // namespace ipx::eval
