#include "ipx/gallery.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ipx/hash.hpp"
#include "ipx/parallel.hpp"

namespace ipx::gallery {

namespace {

using nlohmann::json;

constexpr std::array<char, 8> kMagic{'I', 'P', 'X', 'G', 'A', 'L', '\0', '\0'};
constexpr std::array<char, 8> kEndMagic{'I', 'P', 'X', 'E', 'N', 'D', '\0', '\0'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kHeaderSize = 16;
constexpr std::size_t kFrameHeaderSize = 16;
constexpr std::size_t kTrailerSize = 32;

enum class FrameKind : std::uint32_t { Config = 1, Record = 2, Index = 3 };

using Bytes = std::vector<std::uint8_t>;

void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(Bytes& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_magic(Bytes& out, const std::array<char, 8>& m) {
  for (char c : m) out.push_back(static_cast<std::uint8_t>(c));
}

bool has_magic(const std::uint8_t* p, const std::array<char, 8>& m) { return std::memcmp(p, m.data(), m.size()) == 0; }

/// Appends a frame and returns its offset relative to `base`.
std::uint64_t put_frame(Bytes& out, std::uint64_t base, FrameKind kind, const json& payload) {
  const std::uint64_t offset = base + out.size();
  const Bytes body = json::to_cbor(payload);
  put_u32(out, static_cast<std::uint32_t>(kind));
  put_u32(out, crc32(body));
  put_u64(out, body.size());
  out.insert(out.end(), body.begin(), body.end());
  return offset;
}

json read_frame(const Bytes& file, std::uint64_t offset, std::uint64_t limit, FrameKind kind) {
  if (offset < kHeaderSize || offset + kFrameHeaderSize > limit) {
    throw Error(ErrorCode::ChecksumMismatch, "frame offset out of range");
  }
  const std::uint8_t* p = file.data() + offset;
  if (get_u32(p) != static_cast<std::uint32_t>(kind)) throw Error(ErrorCode::ChecksumMismatch, "unexpected frame kind");
  const std::uint64_t len = get_u64(p + 8);
  if (len > limit - offset - kFrameHeaderSize) throw Error(ErrorCode::ChecksumMismatch, "frame overruns the file");
  std::span<const std::uint8_t> body(p + kFrameHeaderSize, len);
  if (crc32(body) != get_u32(p + 4)) throw Error(ErrorCode::ChecksumMismatch, "frame checksum mismatch");
  try {
    return json::from_cbor(body.begin(), body.end());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::CorruptData, std::string("frame payload: ") + e.what());
  }
}

json index_json(std::uint64_t config_offset, const std::vector<std::uint64_t>& records) {
  return {{"config", config_offset}, {"records", records}};
}

void put_trailer(Bytes& out, std::uint64_t index_offset, std::uint64_t count, std::uint32_t crc_before) {
  const std::size_t start = out.size();
  put_magic(out, kEndMagic);
  put_u64(out, index_offset);
  put_u64(out, count);
  put_u32(out, crc_before);
  put_u32(out, crc32(std::span<const std::uint8_t>(out).subspan(start, kTrailerSize - 4)));
}

json record_json(const GalleryRecord& r) {
  return {{"subject_id", r.subject_id},
          {"template", fusion::to_json(r.templ)},
          {"metadata", to_json(r.metadata)},
          {"enrolled_at", r.enrolled_at}};
}

GalleryRecord record_from_json(const json& j) {
  GalleryRecord r;
  r.subject_id = j.at("subject_id").get<std::string>();
  r.templ = fusion::template_from_json(j.at("template"));
  r.metadata = subject_meta_from_json(j.at("metadata"));
  r.enrolled_at = j.at("enrolled_at").get<std::int64_t>();
  return r;
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  return data;
}

void write_bytes(std::ofstream& out, const Bytes& data, const std::filesystem::path& path) {
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  out.flush();
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
}

bool better(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.subject_id < b.subject_id;
}

void require_enrollment_template(const fusion::SubjectTemplate& t) {
  bool any = false;
  for (const auto* side : {&t.left, &t.right}) {
    if (!*side) continue;
    if ((*side)->impressions.empty()) throw Error(ErrorCode::NoCaptures, "thumb template without impressions");
    any = true;
  }
  if (!any) throw Error(ErrorCode::NoCaptures, "template holds no thumb");
}

void ensure_prepared(fusion::SubjectTemplate& t) {
  for (auto* side : {&t.left, &t.right}) {
    if (!*side) continue;
    for (auto& imp : (*side)->impressions) {
      if (!imp.prepared) fusion::prepare(imp);
    }
  }
}

std::size_t finger_slot(Finger f) { return f == Finger::LeftThumb ? 0 : 1; }

}  // namespace

Date parse_date(std::string_view text) {
  int y = 0;
  unsigned m = 0, d = 0;
  char tail = 0;
  const std::string s(text);
  if (s.size() != 10 || std::sscanf(s.c_str(), "%4d-%2u-%2u%c", &y, &m, &d, &tail) != 3) {
    throw Error(ErrorCode::InvalidArgument, "date must be YYYY-MM-DD: " + s);
  }
  Date date{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!date.ok()) throw Error(ErrorCode::InvalidArgument, "invalid date: " + s);
  return date;
}

std::string format_date(Date d) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(d.year()), static_cast<unsigned>(d.month()),
                static_cast<unsigned>(d.day()));
  return buf;
}

std::string_view to_string(Sex s) {
  switch (s) {
    case Sex::Female: return "female";
    case Sex::Male: return "male";
    case Sex::Other: return "other";
  }
  return "other";
}

Sex parse_sex(std::string_view text) {
  if (text == "female") return Sex::Female;
  if (text == "male") return Sex::Male;
  if (text == "other") return Sex::Other;
  throw Error(ErrorCode::InvalidArgument, "unknown sex: " + std::string(text));
}

void SubjectMeta::validate() const {
  if (!date_of_birth.ok()) throw Error(ErrorCode::InvalidArgument, "invalid date_of_birth");
  for (const auto& v : vaccination_records) {
    if (v.vaccine.empty()) throw Error(ErrorCode::InvalidArgument, "vaccination without vaccine name");
    if (v.dose < 1) throw Error(ErrorCode::InvalidArgument, "vaccination dose must be positive");
    if (!v.administered_at.ok()) throw Error(ErrorCode::InvalidArgument, "invalid administered_at");
    if (std::chrono::sys_days{v.administered_at} < std::chrono::sys_days{date_of_birth}) {
      throw Error(ErrorCode::InvalidArgument, "vaccination administered before date_of_birth");
    }
  }
}

json to_json(const SubjectMeta& m) {
  json vax = json::array();
  for (const auto& v : m.vaccination_records) {
    vax.push_back({{"vaccine", v.vaccine}, {"dose", v.dose}, {"administered_at", format_date(v.administered_at)}});
  }
  json j{{"display_name", m.display_name},
         {"date_of_birth", format_date(m.date_of_birth)},
         {"vaccination_records", vax},
         {"notes", m.notes}};
  j["sex"] = m.sex ? json(std::string(to_string(*m.sex))) : json(nullptr);
  return j;
}

SubjectMeta subject_meta_from_json(const json& j) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidArgument, "metadata must be an object");
  SubjectMeta m;
  try {
    m.display_name = j.value("display_name", std::string{});
    m.date_of_birth = parse_date(j.at("date_of_birth").get<std::string>());
    if (j.contains("sex") && !j["sex"].is_null()) m.sex = parse_sex(j["sex"].get<std::string>());
    for (const auto& v : j.value("vaccination_records", json::array())) {
      Vaccination vac;
      vac.vaccine = v.at("vaccine").get<std::string>();
      vac.dose = v.at("dose").get<int>();
      vac.administered_at = parse_date(v.at("administered_at").get<std::string>());
      m.vaccination_records.push_back(std::move(vac));
    }
    m.notes = j.value("notes", std::string{});
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("metadata: ") + e.what());
  }
  m.validate();
  return m;
}

json to_json(const Candidate& c) {
  return {{"subject_id", c.subject_id}, {"score", c.score}, {"breakdown", fusion::to_json(c.breakdown)}};
}

json to_json(const CandidateList& list) {
  json out = json::array();
  for (const auto& c : list) out.push_back(to_json(c));
  return out;
}

PotentialDuplicateFound::PotentialDuplicateFound(CandidateList candidates)
    : Error(ErrorCode::PotentialDuplicateFound,
            std::to_string(candidates.size()) + " candidate(s), best " +
                (candidates.empty() ? std::string("none") : candidates.front().subject_id)),
      candidates_(std::move(candidates)) {}

json to_json(const GalleryConfig& c) {
  return {{"calibration", fusion::to_json(c.calibration)},
          {"thresholds", c.thresholds ? to_json(*c.thresholds) : json(nullptr)},
          {"shortlist", c.shortlist},
          {"default_far", c.default_far}};
}

GalleryConfig gallery_config_from_json(const json& j) {
  GalleryConfig c;
  c.calibration = fusion::calibration_from_json(j.at("calibration"));
  if (j.contains("thresholds") && !j["thresholds"].is_null()) c.thresholds = threshold_table_from_json(j["thresholds"]);
  c.shortlist = j.value("shortlist", c.shortlist);
  c.default_far = j.value("default_far", c.default_far);
  return c;
}

struct Gallery::Snapshot {
  GalleryConfig config;
  std::vector<std::shared_ptr<const GalleryRecord>> records;
  std::map<std::string, std::size_t> index;
  // Enrollment embeddings per thumb, one row per impression, with the owning record.
  std::array<texture::EmbeddingMatrix, 2> rows;
  std::array<std::vector<std::size_t>, 2> owner;

  void add(std::shared_ptr<const GalleryRecord> r) {
    const std::size_t i = records.size();
    for (const auto* side : {&r->templ.left, &r->templ.right}) {
      if (!*side) continue;
      const std::size_t s = finger_slot((*side)->finger);
      for (const auto& imp : (*side)->impressions) {
        rows[s].add(imp.embedding);
        owner[s].push_back(i);
      }
    }
    index.emplace(r->subject_id, i);
    records.push_back(std::move(r));
  }
};

Gallery::Gallery(GalleryConfig config) : write_mutex_(std::make_unique<std::mutex>()) {
  auto snap = std::make_shared<Snapshot>();
  snap->config = std::move(config);
  current_ = std::move(snap);
}

Gallery::Gallery(Gallery&& other) noexcept = default;
Gallery& Gallery::operator=(Gallery&& other) noexcept = default;

std::shared_ptr<const Gallery::Snapshot> Gallery::snapshot() const { return std::atomic_load(&current_); }

GalleryConfig Gallery::config() const { return snapshot()->config; }

void Gallery::set_config(GalleryConfig config) {
  std::lock_guard lock(*write_mutex_);
  auto next = std::make_shared<Snapshot>(*snapshot());
  next->config = std::move(config);
  if (path_) write_file(*path_, *next);
  std::atomic_store(&current_, std::shared_ptr<const Snapshot>(std::move(next)));
}

std::size_t Gallery::size() const { return snapshot()->records.size(); }

bool Gallery::contains(const std::string& subject_id) const { return snapshot()->index.count(subject_id) > 0; }

std::shared_ptr<const GalleryRecord> Gallery::record(const std::string& subject_id) const {
  auto snap = snapshot();
  auto it = snap->index.find(subject_id);
  return it == snap->index.end() ? nullptr : snap->records[it->second];
}

std::vector<std::shared_ptr<const GalleryRecord>> Gallery::records() const { return snapshot()->records; }

CandidateList Gallery::rank(const Snapshot& snap, const fusion::SubjectTemplate& probe, std::size_t k,
                            std::size_t shortlist) {
  const std::size_t n = snap.records.size();
  // Stage 1: thumb-averaged texture score of every record sharing a thumb with the probe.
  std::vector<double> texture(n, 0.0);
  std::vector<int> thumbs(n, 0);
  for (const auto* side : {&probe.left, &probe.right}) {
    if (!*side || (*side)->impressions.empty()) continue;
    const std::size_t s = finger_slot((*side)->finger);
    const auto& rows = snap.rows[s];
    if (rows.empty()) continue;
    std::vector<double> sum(n, 0.0);
    std::vector<int> count(n, 0);
    for (const auto& imp : (*side)->impressions) {
      for (const auto& hit : texture::batch_search(imp.embedding, rows, rows.rows())) {
        const std::size_t owner = snap.owner[s][hit.index];
        sum[owner] += texture::to_unit_score(hit.similarity);
        ++count[owner];
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (count[i] == 0) continue;
      texture[i] += sum[i] / count[i];
      ++thumbs[i];
    }
  }
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < n; ++i) {
    if (thumbs[i] > 0) order.push_back(i);
  }
  const std::size_t take = shortlist == 0 ? order.size() : std::min(shortlist, order.size());
  auto shortlist_before = [&](std::size_t a, std::size_t b) {
    const double sa = texture[a] / thumbs[a], sb = texture[b] / thumbs[b];
    if (sa != sb) return sa > sb;
    return snap.records[a]->subject_id < snap.records[b]->subject_id;
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(), shortlist_before);
  order.resize(take);

  // Stage 2: full fusion on the shortlist.
  CandidateList out(order.size());
  parallel_for(order.size(), 0, [&](std::size_t i) {
    const auto& rec = *snap.records[order[i]];
    out[i].subject_id = rec.subject_id;
    out[i].breakdown = fusion::score_subjects(rec.templ, probe, snap.config.calibration);
    out[i].score = out[i].breakdown.fused;
  });
  std::sort(out.begin(), out.end(), better);
  if (out.size() > k) out.resize(k);
  return out;
}

CandidateList Gallery::identify(const fusion::SubjectTemplate& probe, std::size_t k,
                                std::optional<std::size_t> shortlist) const {
  if (k == 0) throw Error(ErrorCode::InvalidArgument, "k must be positive");
  auto snap = snapshot();
  if (snap->records.empty()) throw Error(ErrorCode::EmptyGallery, "gallery is empty");
  return rank(*snap, probe, k, shortlist.value_or(snap->config.shortlist));
}

VerifyResult Gallery::verify(const std::string& subject_id, const fusion::SubjectTemplate& probe,
                             std::optional<double> far) const {
  auto snap = snapshot();
  auto it = snap->index.find(subject_id);
  if (it == snap->index.end()) throw Error(ErrorCode::UnknownSubject, "unknown subject " + subject_id);
  const auto& cfg = snap->config;
  if (!cfg.thresholds) throw Error(ErrorCode::MissingThresholdTable, "gallery has no threshold table");
  VerifyResult r;
  r.far = far.value_or(cfg.default_far);
  r.threshold = cfg.thresholds->threshold_for(r.far);
  r.score = fusion::score_subjects(snap->records[it->second]->templ, probe, cfg.calibration);
  r.decision = r.score.fused >= r.threshold;
  r.score.decision = r.decision;
  r.score.threshold_far = r.far;
  r.score.threshold = r.threshold;
  return r;
}

EnrollResult Gallery::enroll(GalleryRecord record, const EnrollOptions& options) {
  if (record.subject_id.empty()) throw Error(ErrorCode::InvalidArgument, "empty subject_id");
  require_enrollment_template(record.templ);
  record.metadata.validate();
  ensure_prepared(record.templ);
  if (record.enrolled_at == 0) {
    record.enrolled_at = std::chrono::duration_cast<std::chrono::seconds>(
                             std::chrono::system_clock::now().time_since_epoch())
                             .count();
  }

  std::lock_guard lock(*write_mutex_);
  auto snap = snapshot();
  if (snap->index.count(record.subject_id)) throw Error(ErrorCode::DuplicateId, "subject " + record.subject_id);

  EnrollResult result;
  result.subject_id = record.subject_id;
  if (options.dedup && !snap->records.empty()) {
    double threshold = 0;
    if (options.dedup_threshold) {
      threshold = *options.dedup_threshold;
    } else if (snap->config.thresholds) {
      threshold = snap->config.thresholds->threshold_for(snap->config.default_far);
    } else {
      throw Error(ErrorCode::MissingThresholdTable, "de-duplication needs a threshold or a threshold table");
    }
    CandidateList candidates = rank(*snap, record.templ, snap->records.size(), snap->config.shortlist);
    std::erase_if(candidates, [&](const Candidate& c) { return c.score < threshold; });
    if (!candidates.empty() && !options.override_duplicates) throw PotentialDuplicateFound(std::move(candidates));
    result.duplicates = std::move(candidates);
  }

  auto stored = std::make_shared<const GalleryRecord>(std::move(record));
  if (path_) {
    Bytes tail;
    const std::uint64_t offset = put_frame(tail, file_size_, FrameKind::Record, record_json(*stored));
    auto offsets = record_offsets_;
    offsets.push_back(offset);
    const std::uint64_t index_offset = put_frame(tail, file_size_, FrameKind::Index, index_json(config_offset_, offsets));
    const std::uint32_t crc = crc32(tail, file_crc_);
    put_trailer(tail, index_offset, offsets.size(), crc);
    std::ofstream out(*path_, std::ios::binary | std::ios::app);
    if (!out) throw Error(ErrorCode::IoError, "cannot append to " + path_->string());
    write_bytes(out, tail, *path_);
    record_offsets_ = std::move(offsets);
    file_size_ += tail.size();
    file_crc_ = crc32(std::span<const std::uint8_t>(tail).last(kTrailerSize), crc);
  }

  auto next = std::make_shared<Snapshot>(*snap);
  next->add(std::move(stored));
  result.gallery_size = next->records.size();
  std::atomic_store(&current_, std::shared_ptr<const Snapshot>(std::move(next)));
  return result;
}

void Gallery::save(const std::filesystem::path& path) {
  std::lock_guard lock(*write_mutex_);
  write_file(path, *snapshot());
}

void Gallery::write_file(const std::filesystem::path& path, const Snapshot& snap) {
  Bytes data;
  put_magic(data, kMagic);
  put_u32(data, kVersion);
  put_u32(data, 0);
  const std::uint64_t config_offset = put_frame(data, 0, FrameKind::Config, to_json(snap.config));
  std::vector<std::uint64_t> offsets;
  for (const auto& r : snap.records) offsets.push_back(put_frame(data, 0, FrameKind::Record, record_json(*r)));
  const std::uint64_t index_offset = put_frame(data, 0, FrameKind::Index, index_json(config_offset, offsets));
  const std::uint32_t crc = crc32(data);
  put_trailer(data, index_offset, offsets.size(), crc);

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot create " + tmp.string());
    write_bytes(out, data, tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot rename to " + path.string() + ": " + ec.message());

  path_ = path;
  config_offset_ = config_offset;
  record_offsets_ = std::move(offsets);
  file_size_ = data.size();
  file_crc_ = crc32(std::span<const std::uint8_t>(data).last(kTrailerSize), crc);
}

Gallery Gallery::load(const std::filesystem::path& path) {
  const Bytes file = read_file(path);
  const std::size_t prefix = std::min(file.size(), kMagic.size());
  if (std::memcmp(file.data(), kMagic.data(), prefix) != 0) {
    throw Error(ErrorCode::UnsupportedFormat, path.string() + " is not a gallery file");
  }
  if (file.size() < kHeaderSize) throw Error(ErrorCode::ChecksumMismatch, "truncated header");
  const std::uint32_t version = get_u32(file.data() + 8);
  if (version != kVersion) {
    throw Error(ErrorCode::VersionMismatch, "gallery version " + std::to_string(version) + ", expected " +
                                                std::to_string(kVersion));
  }
  if (file.size() < kHeaderSize + kTrailerSize) throw Error(ErrorCode::ChecksumMismatch, "missing trailer");
  const std::size_t trailer = file.size() - kTrailerSize;
  const std::uint8_t* t = file.data() + trailer;
  if (!has_magic(t, kEndMagic)) throw Error(ErrorCode::ChecksumMismatch, "missing trailer (truncated file?)");
  if (crc32(std::span<const std::uint8_t>(t, kTrailerSize - 4)) != get_u32(t + kTrailerSize - 4)) {
    throw Error(ErrorCode::ChecksumMismatch, "trailer checksum mismatch");
  }
  const std::uint32_t crc = crc32(std::span<const std::uint8_t>(file.data(), trailer));
  if (crc != get_u32(t + 24)) throw Error(ErrorCode::ChecksumMismatch, "file checksum mismatch");

  const json index = read_frame(file, get_u64(t + 8), trailer, FrameKind::Index);
  Gallery g;
  auto snap = std::make_shared<Snapshot>();
  try {
    g.config_offset_ = index.at("config").get<std::uint64_t>();
    g.record_offsets_ = index.at("records").get<std::vector<std::uint64_t>>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::CorruptData, std::string("gallery index: ") + e.what());
  }
  if (g.record_offsets_.size() != get_u64(t + 16)) throw Error(ErrorCode::ChecksumMismatch, "record count mismatch");
  try {
    snap->config = gallery_config_from_json(read_frame(file, g.config_offset_, trailer, FrameKind::Config));
    for (std::uint64_t off : g.record_offsets_) {
      auto rec = record_from_json(read_frame(file, off, trailer, FrameKind::Record));
      if (snap->index.count(rec.subject_id)) throw Error(ErrorCode::CorruptData, "duplicate id " + rec.subject_id);
      snap->add(std::make_shared<const GalleryRecord>(std::move(rec)));
    }
    g.current_ = std::move(snap);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::CorruptData, std::string("gallery record: ") + e.what());
  }
  g.path_ = path;
  g.file_size_ = file.size();
  g.file_crc_ = crc32(std::span<const std::uint8_t>(file).last(kTrailerSize), crc);
  return g;
}

Gallery Gallery::open(const std::filesystem::path& path, const GalleryConfig& config) {
  if (std::filesystem::exists(path)) return load(path);
  Gallery g(config);
  g.save(path);
  return g;
}

bool Gallery::same_content(const Gallery& other) const {
  if (!(config() == other.config())) return false;
  const auto a = records(), b = other.records();
  return std::equal(a.begin(), a.end(), b.begin(), b.end(), [](const auto& x, const auto& y) { return *x == *y; });
}

}  // namespace ipx::gallery
