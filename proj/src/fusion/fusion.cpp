#include "ipx/fusion.hpp"

#include <algorithm>
#include <cmath>

#include "ipx/error.hpp"
#include "ipx/imgproc.hpp"

namespace ipx::fusion {

std::string_view to_string(Channel c) {
  switch (c) {
    case Channel::Texture: return "texture";
    case Channel::Minutiae: return "minutiae";
    case Channel::Minutiae500: return "minutiae500";
  }
  return "unknown";
}

Channel parse_channel(std::string_view name) {
  for (Channel c : kAllChannels) {
    if (to_string(c) == name) return c;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown matcher channel '" + std::string(name) + "'");
}

std::string_view to_string(Role r) { return r == Role::Enrollment ? "enrollment" : "probe"; }

namespace {

double analysis_quality(const imgproc::RidgeAnalysis& a) {
  double coherence = 0;
  int n = 0;
  for (std::size_t i = 0; i < a.mask.size(); ++i) {
    if (!a.mask.values()[i]) continue;
    coherence += a.coherence.values()[i];
    ++n;
  }
  if (n == 0) return 0.0;
  return a.block_mask().coverage() * coherence / n;
}

minutiae::MinutiaSet minutiae_of(const imgproc::Preprocessed& p) {
  minutiae::ExtractOptions options;
  options.ridge_area_border = true;
  return minutiae::extract_minutiae(p.skeleton, p.analysis, options);
}

}  // namespace

ImpressionFeatures extract_features(const FingerprintImage& capture, const FeatureOptions& options) {
  if (!capture.meta()) throw Error(ErrorCode::InvalidArgument, "capture has no metadata");
  ImpressionFeatures f;
  f.meta = *capture.meta();
  auto pre = imgproc::preprocess(capture);
  f.quality = analysis_quality(pre.analysis);
  f.minutiae = minutiae_of(pre);
  texture::TextureOptions topt;
  topt.raw = options.raw_texture;
  f.embedding = texture::extract_embedding(capture, pre.analysis, topt, &pre.enhanced);
  if (options.with_500 && capture.ppi() > minutiae::kReferencePpi) {
    auto low = imgproc::downsample(capture, minutiae::kReferencePpi);
    f.minutiae500 = minutiae_of(imgproc::preprocess(low));
  } else {
    f.minutiae500 = minutiae::rescale(f.minutiae);
  }
  prepare(f);
  return f;
}

void prepare(ImpressionFeatures& f) {
  f.prepared = std::make_shared<const PreparedMinutiae>(
      PreparedMinutiae{minutiae::prepare(f.minutiae), minutiae::prepare(f.minutiae500)});
}

std::string SubjectTemplate::subject_id() const {
  if (left && !left->impressions.empty()) return left->impressions.front().meta.subject_id;
  if (right && !right->impressions.empty()) return right->impressions.front().meta.subject_id;
  return {};
}

SubjectTemplate assemble_template(std::vector<ImpressionFeatures> impressions, Role role) {
  if (impressions.empty()) throw Error(ErrorCode::NoCaptures, "no captures");
  const std::string& subject = impressions.front().meta.subject_id;
  for (const auto& f : impressions) {
    if (f.meta.subject_id != subject) throw Error(ErrorCode::MixedSubjects, "captures belong to different subjects");
  }
  const int cap = role == Role::Enrollment ? kMaxEnrollImpressions : kMaxProbeImpressions;
  SubjectTemplate t;
  for (auto& f : impressions) {
    auto& slot = f.meta.finger == Finger::LeftThumb ? t.left : t.right;
    if (!slot) slot = Template{f.meta.finger, role, {}};
    slot->impressions.push_back(std::move(f));
  }
  for (const auto* slot : {&t.left, &t.right}) {
    if (*slot && static_cast<int>((*slot)->impressions.size()) > cap) {
      throw Error(ErrorCode::NoCaptures, std::string(to_string((*slot)->finger)) + " has " +
                                             std::to_string((*slot)->impressions.size()) + " impressions; the " +
                                             std::string(to_string(role)) + " limit is " + std::to_string(cap));
    }
  }
  return t;
}

SubjectTemplate build_template(std::span<const FingerprintImage> captures, Role role, const FeatureOptions& options) {
  if (captures.empty()) throw Error(ErrorCode::NoCaptures, "no captures");
  std::vector<ImpressionFeatures> features;
  features.reserve(captures.size());
  for (const auto& c : captures) {
    if (!c.meta()) throw Error(ErrorCode::InvalidArgument, "capture has no metadata");
    if (c.meta()->subject_id != captures.front().meta().value_or(CaptureMeta{}).subject_id) {
      throw Error(ErrorCode::MixedSubjects, "captures belong to different subjects");
    }
  }
  for (const auto& c : captures) features.push_back(extract_features(c, options));
  return assemble_template(std::move(features), role);
}

double pair_score(const ImpressionFeatures& a, const ImpressionFeatures& b, Channel channel) {
  switch (channel) {
    case Channel::Texture: return texture::to_unit_score(texture::compare(a.embedding, b.embedding));
    case Channel::Minutiae:
      if (a.prepared && b.prepared) return minutiae::match_prepared(a.prepared->native, b.prepared->native).score;
      return minutiae::match_minutiae(a.minutiae, b.minutiae).score;
    case Channel::Minutiae500:
      if (a.prepared && b.prepared) return minutiae::match_prepared(a.prepared->low, b.prepared->low).score;
      return minutiae::match_minutiae(a.minutiae500, b.minutiae500).score;
  }
  return 0.0;
}

double score_impressions(const Template& enroll, const Template& probe, Channel channel) {
  if (enroll.finger != probe.finger) throw Error(ErrorCode::FingerMismatch, "templates are for different thumbs");
  if (enroll.impressions.empty() || probe.impressions.empty()) throw Error(ErrorCode::NoCaptures, "empty template");
  double sum = 0;
  for (const auto& e : enroll.impressions) {
    for (const auto& p : probe.impressions) sum += pair_score(e, p, channel);
  }
  return sum / static_cast<double>(enroll.impressions.size() * probe.impressions.size());
}

Calibration Calibration::uncalibrated() {
  Calibration c;
  for (Channel ch : kAllChannels) c.ranges[ch] = {0.0, 1.0};
  c.weights = {{Channel::Texture, 0.5}, {Channel::Minutiae, 0.5}};
  c.provenance = "uncalibrated";
  return c;
}

nlohmann::json to_json(const Calibration& c) {
  nlohmann::json ranges = nlohmann::json::object();
  for (const auto& [ch, r] : c.ranges) ranges[std::string(to_string(ch))] = {{"min", r.min}, {"max", r.max}};
  nlohmann::json weights = nlohmann::json::object();
  for (const auto& [ch, w] : c.weights) weights[std::string(to_string(ch))] = w;
  return {{"version", c.version}, {"ranges", ranges}, {"weights", weights}, {"provenance", c.provenance}};
}

Calibration calibration_from_json(const nlohmann::json& j) {
  try {
    Calibration c;
    c.version = j.at("version").get<int>();
    if (c.version != 1) throw Error(ErrorCode::VersionMismatch, "calibration version " + std::to_string(c.version));
    for (const auto& [name, r] : j.at("ranges").items()) {
      c.ranges[parse_channel(name)] = {r.at("min").get<double>(), r.at("max").get<double>()};
    }
    for (const auto& [name, w] : j.at("weights").items()) c.weights[parse_channel(name)] = w.get<double>();
    c.provenance = j.value("provenance", "");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptData, std::string("calibration json: ") + e.what());
  }
}

Calibration load_calibration(const std::string& path) {
  auto bytes = read_file_bytes(path);
  auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::CorruptData, "calibration is not valid json: " + path);
  return calibration_from_json(j);
}

double normalize_score(double raw, Channel channel, const Calibration& calibration) {
  auto it = calibration.ranges.find(channel);
  if (it == calibration.ranges.end()) {
    throw Error(ErrorCode::MissingCalibration, "no calibration for " + std::string(to_string(channel)));
  }
  const auto [lo, hi] = it->second;
  if (!(hi > lo)) throw Error(ErrorCode::MissingCalibration, "degenerate calibration range");
  return std::clamp((raw - lo) / (hi - lo), 0.0, 1.0);
}

double fuse_matchers(const std::map<Channel, double>& normalized, const std::map<Channel, double>& weights) {
  if (weights.empty()) throw Error(ErrorCode::BadWeights, "no weights");
  double total = 0, fused = 0;
  for (const auto& [ch, w] : weights) {
    if (!(w >= 0)) throw Error(ErrorCode::BadWeights, "negative weight");
    total += w;
    if (w == 0) continue;
    auto it = normalized.find(ch);
    if (it == normalized.end()) throw Error(ErrorCode::BadWeights, "no score for " + std::string(to_string(ch)));
    fused += w * it->second;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error(ErrorCode::BadWeights, "weights must sum to 1");
  return std::clamp(fused, 0.0, 1.0);
}

double fuse_fingers(std::optional<double> left, std::optional<double> right) {
  if (left && right) return (*left + *right) / 2.0;
  if (left) return *left;
  if (right) return *right;
  throw Error(ErrorCode::NoScores, "no thumb scores to fuse");
}

MatchScore fuse_raw(const std::map<Finger, std::map<Channel, double>>& raw, const Calibration& calibration) {
  MatchScore out;
  std::optional<double> finger_scores[2];
  for (const auto& [finger, scores] : raw) {
    std::map<Channel, double> normalized;
    for (const auto& [ch, w] : calibration.weights) {
      auto it = scores.find(ch);
      if (it == scores.end()) throw Error(ErrorCode::BadWeights, "no score for " + std::string(to_string(ch)));
      normalized[ch] = normalize_score(it->second, ch, calibration);
    }
    for (const auto& [ch, v] : scores) {
      out.per_matcher_raw[ch] += v;
      if (calibration.ranges.count(ch)) out.per_matcher_normalized[ch] += normalize_score(v, ch, calibration);
    }
    double s = fuse_matchers(normalized, calibration.weights);
    out.per_finger[finger] = s;
    finger_scores[finger == Finger::LeftThumb ? 0 : 1] = s;
  }
  if (raw.empty()) throw Error(ErrorCode::NoScores, "templates share no thumb");
  const double compared = static_cast<double>(raw.size());
  for (auto& [ch, v] : out.per_matcher_raw) v /= compared;
  for (auto& [ch, v] : out.per_matcher_normalized) v /= compared;
  out.fused = fuse_fingers(finger_scores[0], finger_scores[1]);
  return out;
}

std::map<Finger, std::map<Channel, double>> raw_scores(const SubjectTemplate& enroll, const SubjectTemplate& probe,
                                                      std::span<const Channel> channels) {
  std::map<Finger, std::map<Channel, double>> raw;
  for (Finger finger : {Finger::LeftThumb, Finger::RightThumb}) {
    const auto& e = enroll.finger(finger);
    const auto& p = probe.finger(finger);
    if (!e || !p) continue;
    for (Channel ch : channels) raw[finger][ch] = score_impressions(*e, *p, ch);
  }
  return raw;
}

MatchScore score_subjects(const SubjectTemplate& enroll, const SubjectTemplate& probe, const Calibration& calibration) {
  std::vector<Channel> channels;
  for (const auto& [ch, w] : calibration.weights) channels.push_back(ch);
  return fuse_raw(raw_scores(enroll, probe, channels), calibration);
}

nlohmann::json to_json(const MatchScore& s) {
  nlohmann::json raw = nlohmann::json::object(), norm = nlohmann::json::object(), fingers = nlohmann::json::object();
  for (const auto& [ch, v] : s.per_matcher_raw) raw[std::string(to_string(ch))] = v;
  for (const auto& [ch, v] : s.per_matcher_normalized) norm[std::string(to_string(ch))] = v;
  for (const auto& [f, v] : s.per_finger) fingers[std::string(to_string(f))] = v;
  nlohmann::json j = {{"per_matcher_raw", raw}, {"per_matcher_normalized", norm}, {"per_finger", fingers},
                      {"fused", s.fused}};
  if (s.decision) j["decision"] = *s.decision;
  if (s.threshold_far) j["threshold_far"] = *s.threshold_far;
  if (s.threshold) j["threshold"] = *s.threshold;
  return j;
}

nlohmann::json to_json(const CaptureMeta& m) {
  return {{"subject_id", m.subject_id}, {"finger", to_string(m.finger)}, {"session", m.session},
          {"impression_index", m.impression_index}, {"age_at_capture_days", m.age_at_capture_days},
          {"captured_at", m.captured_at}};
}

CaptureMeta meta_from_json(const nlohmann::json& j) {
  CaptureMeta m;
  m.subject_id = j.at("subject_id").get<std::string>();
  m.finger = parse_finger(j.at("finger").get<std::string>());
  m.session = j.at("session").get<int>();
  m.impression_index = j.at("impression_index").get<int>();
  m.age_at_capture_days = j.at("age_at_capture_days").get<int>();
  m.captured_at = j.at("captured_at").get<std::int64_t>();
  return m;
}

nlohmann::json to_json(const SubjectTemplate& t) {
  nlohmann::json thumbs = nlohmann::json::array();
  for (const auto* slot : {&t.left, &t.right}) {
    if (!*slot) continue;
    nlohmann::json impressions = nlohmann::json::array();
    for (const auto& f : (*slot)->impressions) {
      impressions.push_back({{"meta", to_json(f.meta)},
                             {"quality", f.quality},
                             {"embedding", texture::to_json(f.embedding)},
                             {"minutiae", minutiae::to_json(f.minutiae)},
                             {"minutiae500", minutiae::to_json(f.minutiae500)}});
    }
    thumbs.push_back({{"finger", to_string((*slot)->finger)}, {"role", to_string((*slot)->role)},
                      {"impressions", impressions}});
  }
  return {{"format", "ipx-template"}, {"version", 1}, {"thumbs", thumbs}};
}

SubjectTemplate template_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "ipx-template") throw Error(ErrorCode::UnsupportedFormat, "not a template bundle");
    if (j.at("version").get<int>() != 1) throw Error(ErrorCode::VersionMismatch, "template bundle version");
    SubjectTemplate t;
    for (const auto& thumb : j.at("thumbs")) {
      Template tpl;
      tpl.finger = parse_finger(thumb.at("finger").get<std::string>());
      tpl.role = thumb.at("role").get<std::string>() == "probe" ? Role::Probe : Role::Enrollment;
      for (const auto& f : thumb.at("impressions")) {
        ImpressionFeatures x;
        x.meta = meta_from_json(f.at("meta"));
        x.quality = f.at("quality").get<double>();
        x.embedding = texture::from_json(f.at("embedding"));
        x.minutiae = minutiae::from_json(f.at("minutiae"));
        x.minutiae500 = minutiae::from_json(f.at("minutiae500"));
        prepare(x);
        tpl.impressions.push_back(std::move(x));
      }
      (tpl.finger == Finger::LeftThumb ? t.left : t.right) = std::move(tpl);
    }
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptData, std::string("template json: ") + e.what());
  }
}

}  // namespace ipx::fusion
