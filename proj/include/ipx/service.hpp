#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include <json.hpp>

#include "ipx/gallery.hpp"

namespace ipx::service {

struct ApiConfig {
  std::string bind_address = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::filesystem::path gallery_path;
  std::filesystem::path thresholds_path;
  /// Used for a new gallery, and replaces the stored one when given.
  std::optional<std::filesystem::path> calibration_path;
  std::size_t max_upload_bytes = 64u << 20;
  std::optional<std::string> auth_token;  // static bearer token
  unsigned threads = 8;
  std::size_t default_k = 5;

  /// Errors: InvalidArgument.
  void validate() const;
};

/// Relative paths are resolved against `base_dir`.
ApiConfig api_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ApiConfig load_api_config(const std::filesystem::path& path);

/// HTTP status for a library error.
int http_status(ErrorCode code);

/// JSON over HTTP around one gallery:
///   POST /subjects   multipart: metadata (JSON), optional subject_id, dedup, override, dedup_threshold, ppi,
///                    and 1-8 image parts named left_thumb / right_thumb
///   POST /verify     multipart: subject_id, optional far and ppi, probe image parts
///   POST /identify   multipart: optional k and ppi, probe image parts
///   GET  /subjects, GET /subjects/{id}, GET /health
class Server {
 public:
  /// Loads the threshold table, calibration and gallery. Errors: IoError, CorruptData, ...
  explicit Server(ApiConfig config);
  ~Server();

  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds the listening socket and returns the port.
  int bind();
  /// Serves until stop(); binds first if needed.
  void listen();
  /// bind() and serve on a background thread.
  int start();
  void stop();

  const ApiConfig& config() const;
  gallery::Gallery& gallery();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace ipx::service
