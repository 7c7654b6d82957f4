#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <string>

#include "thinseg/corpus.hpp"

namespace httplib {
class Server;
}

namespace thinseg {

/// Status code plus body of one service reply.
struct Reply {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
  std::map<std::string, std::string> headers;
};

/// Registration service over a corpus directory. Every coordinate crossing
/// the API is in micrometres.
///
///   GET  /sections
///   GET  /sections/{id}/image?kind=pp|xp|map&max_px=N
///   POST /sections/{id}/solve      {"landmarks": [...], "model": "similarity"|"affine"}
///   POST /sections/{id}/preview    {"transform": {...}, "opacity": a, "max_px": N}
///   PUT  /sections/{id}/landmarks
///   GET  /sections/{id}/landmarks
///
/// Handlers are callable directly; install() binds them to an HTTP server.
class RegistrationService {
 public:
  explicit RegistrationService(Corpus corpus);

  Reply sections() const;
  Reply image(const std::string& id, const std::string& kind, int max_px) const;
  Reply solve(const std::string& id, const std::string& body) const;
  Reply preview(const std::string& id, const std::string& body) const;
  Reply put_landmarks(const std::string& id, const std::string& body);
  Reply get_landmarks(const std::string& id) const;

  void install(httplib::Server& server);

  static constexpr int kDefaultMaxPx = 1500;

 private:
  const CorpusSection* find(const std::string& id) const;
  std::filesystem::path landmark_path(const CorpusSection& s) const;

  Corpus corpus_;
  mutable std::mutex write_mutex_;
};

/// Blocks serving on host:port until the process is stopped.
void serve(const Corpus& corpus, const std::string& host, int port);

/// Box-filter downscale by an integer factor; edge cells average what they cover.
Raster downscale(const Raster& r, int factor);

/// Smallest integer factor bringing max(width, height) to at most max_px.
int downscale_factor(int width, int height, int max_px);

}  // namespace thinseg
