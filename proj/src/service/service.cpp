#include "ipx/service.hpp"

#include <fstream>
#include <thread>

#include <httplib.h>

#include "ipx/error.hpp"
#include "ipx/fusion.hpp"
#include "ipx/hash.hpp"
#include "ipx/parallel.hpp"

namespace ipx::service {

namespace {

using nlohmann::json;

constexpr std::size_t kMaxImages = 8;

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_relative() && !base.empty() ? base / path : path;
}

struct HttpError {
  int status;
  std::string code;
  std::string message;
};

[[noreturn]] void bad_request(const std::string& message) { throw HttpError{400, "BadRequest", message}; }

struct ImagePart {
  Finger finger;
  std::string bytes;
};

struct Form {
  std::map<std::string, std::string> fields;
  std::vector<ImagePart> images;
};

Form parse_form(const httplib::Request& req, std::initializer_list<std::string_view> allowed) {
  if (!req.is_multipart_form_data()) bad_request("expected multipart/form-data");
  Form form;
  for (const auto& [name, part] : req.files) {
    if (name == "left_thumb" || name == "right_thumb") {
      form.images.push_back({name == "left_thumb" ? Finger::LeftThumb : Finger::RightThumb, part.content});
      continue;
    }
    if (std::find(allowed.begin(), allowed.end(), name) == allowed.end()) bad_request("unknown form field '" + name + "'");
    if (!form.fields.emplace(name, part.content).second) bad_request("repeated form field '" + name + "'");
  }
  return form;
}

std::optional<std::string> field(const Form& f, const std::string& name) {
  auto it = f.fields.find(name);
  if (it == f.fields.end()) return std::nullopt;
  return it->second;
}

double number_field(const std::string& name, const std::string& text) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size() || !std::isfinite(v)) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    bad_request(name + " must be a number");
  }
}

bool bool_field(const std::string& name, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  bad_request(name + " must be true or false");
}

/// Decodes and extracts the images of a form into a template.
fusion::SubjectTemplate build_template(const Form& form, fusion::Role role, const std::string& subject_id,
                                       unsigned threads) {
  if (form.images.empty()) bad_request("no images");
  if (form.images.size() > kMaxImages) bad_request("at most 8 images");
  std::optional<int> ppi;
  if (auto p = field(form, "ppi")) {
    const double v = number_field("ppi", *p);
    if (v < 1 || v != std::floor(v)) bad_request("ppi must be a positive integer");
    ppi = static_cast<int>(v);
  }
  const int session = role == fusion::Role::Enrollment ? 1 : 3;
  std::vector<FingerprintImage> images(form.images.size());
  std::map<Finger, int> counts;
  for (std::size_t i = 0; i < form.images.size(); ++i) {
    const auto& part = form.images[i];
    const auto* data = reinterpret_cast<const std::uint8_t*>(part.bytes.data());
    images[i] = load_image(std::span<const std::uint8_t>(data, part.bytes.size()), ppi);
    images[i].set_meta(CaptureMeta{subject_id, part.finger, session, ++counts[part.finger], 0, 0});
  }
  std::vector<fusion::ImpressionFeatures> features(images.size());
  parallel_for(images.size(), threads, [&](std::size_t i) { features[i] = fusion::extract_features(images[i]); });
  return fusion::assemble_template(std::move(features), role);
}

json error_body(const std::string& code, const std::string& message) { return {{"error", code}, {"message", message}}; }

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

/// Runs a handler, mapping failures to JSON error responses.
template <class Fn>
void guarded(httplib::Response& res, Fn&& fn) {
  try {
    fn();
  } catch (const gallery::PotentialDuplicateFound& e) {
    json body = error_body("PotentialDuplicateFound", e.what());
    body["candidates"] = gallery::to_json(e.candidates());
    reply(res, 409, body);
  } catch (const Error& e) {
    reply(res, http_status(e.code()), error_body(std::string(to_string(e.code())), e.what()));
  } catch (const HttpError& e) {
    reply(res, e.status, error_body(e.code, e.message));
  } catch (const json::exception& e) {
    reply(res, 400, error_body("BadRequest", e.what()));
  } catch (const std::exception& e) {
    reply(res, 500, error_body("Internal", e.what()));
  }
}

}  // namespace

void ApiConfig::validate() const {
  if (gallery_path.empty()) throw Error(ErrorCode::InvalidArgument, "api config: gallery path required");
  if (thresholds_path.empty()) throw Error(ErrorCode::InvalidArgument, "api config: threshold table path required");
  if (port < 0 || port > 65535) throw Error(ErrorCode::InvalidArgument, "api config: port out of range");
  if (max_upload_bytes == 0) throw Error(ErrorCode::InvalidArgument, "api config: max_upload_bytes must be positive");
  if (threads == 0) throw Error(ErrorCode::InvalidArgument, "api config: threads must be positive");
  if (default_k == 0) throw Error(ErrorCode::InvalidArgument, "api config: default_k must be positive");
}

ApiConfig api_config_from_json(const json& j, const std::filesystem::path& base_dir) {
  ApiConfig c;
  try {
    c.bind_address = j.value("bind_address", c.bind_address);
    c.port = j.value("port", c.port);
    c.gallery_path = resolve(base_dir, j.at("gallery").get<std::string>());
    c.thresholds_path = resolve(base_dir, j.at("thresholds").get<std::string>());
    if (j.contains("calibration") && !j["calibration"].is_null()) {
      c.calibration_path = resolve(base_dir, j["calibration"].get<std::string>());
    }
    c.max_upload_bytes = j.value("max_upload_bytes", c.max_upload_bytes);
    if (j.contains("auth_token") && !j["auth_token"].is_null()) c.auth_token = j["auth_token"].get<std::string>();
    c.threads = j.value("threads", c.threads);
    c.default_k = j.value("default_k", c.default_k);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("api config: ") + e.what());
  }
  c.validate();
  return c;
}

ApiConfig load_api_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::CorruptData, path.string() + ": " + e.what());
  }
  return api_config_from_json(j, path.parent_path());
}

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnknownSubject:
    case ErrorCode::EmptyGallery: return 404;
    case ErrorCode::DuplicateId:
    case ErrorCode::PotentialDuplicateFound: return 409;
    case ErrorCode::MissingThresholdTable:
    case ErrorCode::MissingCalibration:
    case ErrorCode::IoError:
    case ErrorCode::VersionMismatch:
    case ErrorCode::ChecksumMismatch: return 500;
    default: return 400;
  }
}

struct Server::Impl {
  ApiConfig config;
  gallery::Gallery gallery;
  httplib::Server http;
  std::thread worker;
  int port = -1;

  explicit Impl(ApiConfig c) : config(std::move(c)), gallery(open_gallery(config)) { routes(); }

  static gallery::Gallery open_gallery(const ApiConfig& config) {
    config.validate();
    gallery::GalleryConfig wanted;
    wanted.thresholds = load_threshold_table(config.thresholds_path.string());
    if (config.calibration_path) wanted.calibration = fusion::load_calibration(config.calibration_path->string());
    auto g = gallery::Gallery::open(config.gallery_path, wanted);
    gallery::GalleryConfig current = g.config();
    gallery::GalleryConfig next = current;
    next.thresholds = wanted.thresholds;
    if (config.calibration_path) next.calibration = wanted.calibration;
    if (!(next == current)) g.set_config(next);
    return g;
  }

  void routes() {
    http.set_payload_max_length(config.max_upload_bytes);
    const unsigned threads = config.threads;
    http.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
    http.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
      if (!config.auth_token) return httplib::Server::HandlerResponse::Unhandled;
      if (req.get_header_value("Authorization") == "Bearer " + *config.auth_token) {
        return httplib::Server::HandlerResponse::Unhandled;
      }
      reply(res, 401, error_body("Unauthorized", "missing or wrong bearer token"));
      return httplib::Server::HandlerResponse::Handled;
    });

    http.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
      reply(res, 200, {{"status", "ok"}, {"gallery_size", gallery.size()}});
    });

    http.Get("/subjects", [this](const httplib::Request&, httplib::Response& res) {
      json list = json::array();
      for (const auto& r : gallery.records()) {
        list.push_back({{"subject_id", r->subject_id}, {"display_name", r->metadata.display_name}});
      }
      reply(res, 200, {{"subjects", list}});
    });

    http.Get(R"(/subjects/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const std::string id = req.matches[1];
        auto rec = gallery.record(id);
        if (!rec) throw Error(ErrorCode::UnknownSubject, "unknown subject " + id);
        reply(res, 200,
              {{"subject_id", rec->subject_id}, {"enrolled_at", rec->enrolled_at}, {"metadata", gallery::to_json(rec->metadata)}});
      });
    });

    http.Post("/subjects", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { enroll(req, res); });
    });
    http.Post("/verify", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { verify(req, res); });
    });
    http.Post("/identify", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { identify(req, res); });
    });
  }

  void enroll(const httplib::Request& req, httplib::Response& res) {
    Form form = parse_form(req, {"metadata", "subject_id", "dedup", "override", "dedup_threshold", "ppi"});
    auto meta_text = field(form, "metadata");
    if (!meta_text) bad_request("metadata is required");
    gallery::SubjectMeta meta = gallery::subject_meta_from_json(json::parse(*meta_text));
    if (form.images.empty()) bad_request("no images");

    std::string id;
    if (auto given = field(form, "subject_id")) {
      id = *given;
      if (id.empty() || id.find('/') != std::string::npos) bad_request("subject_id must be non-empty without '/'");
    } else {
      // Derived from the request so identical requests get identical answers.
      std::string digest_input = *meta_text;
      for (const auto& img : form.images) digest_input += img.bytes;
      id = "ipx-" + sha256_hex(digest_input).substr(0, 16);
    }

    gallery::EnrollOptions options;
    if (auto d = field(form, "dedup")) options.dedup = bool_field("dedup", *d);
    if (auto o = field(form, "override")) options.override_duplicates = bool_field("override", *o);
    if (auto t = field(form, "dedup_threshold")) {
      const double v = number_field("dedup_threshold", *t);
      if (v < 0 || v > 1) bad_request("dedup_threshold must be in [0, 1]");
      options.dedup_threshold = v;
    }
    gallery::GalleryRecord record{id, build_template(form, fusion::Role::Enrollment, id, config.threads),
                                  std::move(meta), 0};
    auto result = gallery.enroll(std::move(record), options);
    json body{{"subject_id", result.subject_id}, {"gallery_size", result.gallery_size}};
    if (!result.duplicates.empty()) body["duplicates"] = gallery::to_json(result.duplicates);
    reply(res, 201, body);
  }

  void verify(const httplib::Request& req, httplib::Response& res) {
    Form form = parse_form(req, {"subject_id", "far", "ppi"});
    auto id = field(form, "subject_id");
    if (!id) bad_request("subject_id is required");
    std::optional<double> far;
    if (auto f = field(form, "far")) {
      far = number_field("far", *f);
      if (*far < 0 || *far > 1) bad_request("far must be in [0, 1]");
    }
    if (!gallery.contains(*id)) throw Error(ErrorCode::UnknownSubject, "unknown subject " + *id);
    auto probe = build_template(form, fusion::Role::Probe, *id, config.threads);
    auto v = gallery.verify(*id, probe, far);
    reply(res, 200,
          {{"subject_id", *id},
           {"decision", v.decision},
           {"fused", v.score.fused},
           {"far", v.far},
           {"threshold", v.threshold},
           {"breakdown", fusion::to_json(v.score)}});
  }

  void identify(const httplib::Request& req, httplib::Response& res) {
    Form form = parse_form(req, {"k", "ppi"});
    std::size_t k = config.default_k;
    if (auto kt = field(form, "k")) {
      const double v = number_field("k", *kt);
      if (v < 1 || v != std::floor(v)) bad_request("k must be a positive integer");
      k = static_cast<std::size_t>(std::min(v, 1e9));
    }
    auto probe = build_template(form, fusion::Role::Probe, "probe", config.threads);
    const std::size_t n = gallery.size();
    if (n == 0) throw Error(ErrorCode::EmptyGallery, "gallery is empty");
    k = std::min(k, n);
    reply(res, 200, {{"k", k}, {"candidates", gallery::to_json(gallery.identify(probe, k))}});
  }
};

Server::Server(ApiConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {}

Server::~Server() { stop(); }

int Server::bind() {
  if (impl_->port >= 0) return impl_->port;
  const auto& c = impl_->config;
  int port = c.port == 0 ? impl_->http.bind_to_any_port(c.bind_address)
                         : (impl_->http.bind_to_port(c.bind_address, c.port) ? c.port : -1);
  if (port < 0) throw Error(ErrorCode::IoError, "cannot bind " + c.bind_address + ":" + std::to_string(c.port));
  impl_->port = port;
  return port;
}

void Server::listen() {
  bind();
  impl_->http.listen_after_bind();
}

int Server::start() {
  const int port = bind();
  impl_->worker = std::thread([this] { impl_->http.listen_after_bind(); });
  impl_->http.wait_until_ready();
  return port;
}

void Server::stop() {
  if (!impl_) return;
  impl_->http.stop();
  if (impl_->worker.joinable()) impl_->worker.join();
}

const ApiConfig& Server::config() const { return impl_->config; }

gallery::Gallery& Server::gallery() { return impl_->gallery; }

}  // namespace ipx::service
