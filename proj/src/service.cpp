#include "thinseg/service.hpp"

#include <httplib.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "thinseg/image_io.hpp"

namespace thinseg {

namespace {

Reply json_reply(int status, const nlohmann::json& j) { return {status, j.dump() + "\n", "application/json", {}}; }

Reply error_reply(int status, const std::string& message) {
  return json_reply(status, {{"error", message}});
}

Reply not_found(const std::string& id) { return error_reply(404, "unknown section '" + id + "'"); }

Reply png_reply(const Raster& r, double scale_um, int factor, int full_w, int full_h) {
  Reply out{200, encode_png(r), "image/png", {}};
  std::ostringstream s;
  s.precision(17);
  s << scale_um;
  out.headers["X-Scale-Um"] = s.str();
  out.headers["X-Downscale"] = std::to_string(factor);
  out.headers["X-Source-Width"] = std::to_string(full_w);
  out.headers["X-Source-Height"] = std::to_string(full_h);
  return out;
}

Raster paint(const LabelMap& map, const ClassRegistry& registry) {
  Raster r(map.width, map.height, 3, map.scale, 1.0f);
  for (std::size_t i = 0; i < map.pixel_count(); ++i) {
    const PhaseEntry* e = map.values[i] == kSentinel ? nullptr : registry.find(map.values[i]);
    if (e == nullptr) continue;
    for (int b = 0; b < 3; ++b) r.data[i * 3 + b] = e->color[b] / 255.0f;
  }
  return r;
}

LabelMap downscale_labels(const LabelMap& m, int factor) {
  LabelMap out((m.width + factor - 1) / factor, (m.height + factor - 1) / factor,
               PixelScale(m.scale.microns_per_pixel() * factor));
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      out.at(y, x) = m.at(std::min(m.height - 1, y * factor + factor / 2), std::min(m.width - 1, x * factor + factor / 2));
    }
  }
  return out;
}

nlohmann::json parse_body(const std::string& body) {
  try {
    return nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed JSON body: ") + e.what());
  }
}

int parse_max_px(const std::string& text) {
  int v = 0;
  try {
    std::size_t used = 0;
    v = std::stoi(text, &used);
    if (used != text.size()) throw Error("");
  } catch (...) {
    throw Error("max_px must be an integer");
  }
  if (v < 1) throw Error("max_px must be positive");
  return v;
}

}  // namespace

int downscale_factor(int width, int height, int max_px) {
  if (max_px < 1) throw Error("max_px must be positive");
  const int longest = std::max(width, height);
  return std::max(1, (longest + max_px - 1) / max_px);
}

Raster downscale(const Raster& r, int factor) {
  if (factor < 1) throw Error("downscale factor must be positive");
  if (factor == 1) return r;
  Raster out((r.width + factor - 1) / factor, (r.height + factor - 1) / factor, r.bands,
             PixelScale(r.scale.microns_per_pixel() * factor));
  for (int y = 0; y < out.height; ++y) {
    const int y1 = std::min(r.height, (y + 1) * factor);
    for (int x = 0; x < out.width; ++x) {
      const int x1 = std::min(r.width, (x + 1) * factor);
      for (int b = 0; b < r.bands; ++b) {
        double sum = 0;
        for (int yy = y * factor; yy < y1; ++yy) {
          for (int xx = x * factor; xx < x1; ++xx) sum += r.at(yy, xx, b);
        }
        out.at(y, x, b) = static_cast<float>(sum / ((y1 - y * factor) * (x1 - x * factor)));
      }
    }
  }
  return out;
}

RegistrationService::RegistrationService(Corpus corpus) : corpus_(std::move(corpus)) {}

const CorpusSection* RegistrationService::find(const std::string& id) const {
  for (const auto& s : corpus_.sections) {
    if (s.id == id) return &s;
  }
  return nullptr;
}

std::filesystem::path RegistrationService::landmark_path(const CorpusSection& s) const {
  return s.landmarks.empty() ? corpus_.dir / "sections" / s.id / "landmarks.json" : s.landmarks;
}

Reply RegistrationService::sections() const {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& s : corpus_.sections) {
    list.push_back({{"id", s.id},
                    {"width", s.width},
                    {"height", s.height},
                    {"image_scale_um", corpus_.image_scale_um},
                    {"map_width", s.map_width},
                    {"map_height", s.map_height},
                    {"map_scale_um", corpus_.map_scale_um}});
  }
  return json_reply(200, {{"sections", list}});
}

Reply RegistrationService::image(const std::string& id, const std::string& kind, int max_px) const {
  const CorpusSection* s = find(id);
  if (s == nullptr) return not_found(id);
  Raster full;
  if (kind == "pp" || kind == "xp") {
    full = load_raster(kind == "pp" ? s->pp : s->xp, PixelScale(corpus_.image_scale_um));
  } else if (kind == "map") {
    full = paint(read_indexed_png(s->map, PixelScale(corpus_.map_scale_um)), corpus_.registry);
  } else {
    return error_reply(400, "kind must be pp, xp or map");
  }
  const int f = downscale_factor(full.width, full.height, max_px);
  const Raster small = downscale(full, f);
  return png_reply(small, small.scale.microns_per_pixel(), f, full.width, full.height);
}

Reply RegistrationService::solve(const std::string& id, const std::string& body) const {
  if (find(id) == nullptr) return not_found(id);
  const nlohmann::json j = parse_body(body);
  const auto pairs = landmarks_from_json(j);
  const TransformModel model =
      parse_transform_model(j.is_object() ? j.value("model", std::string("similarity")) : std::string("similarity"));
  try {
    return json_reply(200, to_json(thinseg::solve(pairs, model), model));
  } catch (const RegistrationError& e) {
    return error_reply(422, e.what());
  }
}

Reply RegistrationService::preview(const std::string& id, const std::string& body) const {
  const CorpusSection* s = find(id);
  if (s == nullptr) return not_found(id);
  const nlohmann::json j = parse_body(body);
  if (!j.is_object() || !j.contains("transform")) throw Error("preview body needs a transform");
  const AffineTransform2D t = AffineTransform2D::from_json(j["transform"]);
  if (!(std::abs(t.determinant()) > 1e-12)) return error_reply(422, "transform is singular");
  const double opacity = j.value("opacity", 0.5);
  if (!(opacity >= 0.0 && opacity <= 1.0)) throw Error("opacity must lie in [0, 1]");
  const int max_px = j.value("max_px", kDefaultMaxPx);
  if (max_px < 1) throw Error("max_px must be positive");

  const Raster pp = load_raster(s->pp, PixelScale(corpus_.image_scale_um));
  const int f = downscale_factor(pp.width, pp.height, max_px);
  const Raster base = downscale(pp, f);
  const Raster base_rgb = base.bands == 3 ? base : [&] {
    Raster g(base.width, base.height, 3, base.scale);
    for (std::size_t i = 0; i < base.pixel_count(); ++i) {
      for (int b = 0; b < 3; ++b) g.data[i * 3 + b] = base.data[i];
    }
    return g;
  }();
  const LabelMap map = read_indexed_png(s->map, PixelScale(corpus_.map_scale_um));
  const LabelMap warped = f == 1 ? warp_labelmap(map, t, pp.width, pp.height, pp.scale)
                                 : downscale_labels(warp_labelmap(map, t, pp.width, pp.height, pp.scale), f);
  const Raster colors = paint(warped, corpus_.registry);
  Raster out = base_rgb;
  const float a = static_cast<float>(opacity);
  for (std::size_t i = 0; i < out.pixel_count(); ++i) {
    if (warped.values[i] == kSentinel) continue;
    for (int b = 0; b < 3; ++b) {
      out.data[i * 3 + b] = (1.0f - a) * base_rgb.data[i * 3 + b] + a * colors.data[i * 3 + b];
    }
  }
  return png_reply(out, base.scale.microns_per_pixel(), f, pp.width, pp.height);
}

Reply RegistrationService::put_landmarks(const std::string& id, const std::string& body) {
  const CorpusSection* s = find(id);
  if (s == nullptr) return not_found(id);
  landmarks_from_json(parse_body(body));
  std::lock_guard lock(write_mutex_);
  write_text_atomic(landmark_path(*s), body);
  return json_reply(200, {{"stored", landmark_path(*s).filename().string()}});
}

Reply RegistrationService::get_landmarks(const std::string& id) const {
  const CorpusSection* s = find(id);
  if (s == nullptr) return not_found(id);
  std::ifstream in(landmark_path(*s), std::ios::binary);
  if (!in) return error_reply(404, "section '" + id + "' has no landmarks");
  std::ostringstream text;
  text << in.rdbuf();
  return {200, text.str(), "application/json", {}};
}

void RegistrationService::install(httplib::Server& server) {
  auto run = [](httplib::Response& res, const std::function<Reply()>& fn) {
    Reply r;
    try {
      r = fn();
    } catch (const RegistrationError& e) {
      r = error_reply(422, e.what());
    } catch (const std::exception& e) {
      r = error_reply(400, e.what());
    }
    res.status = r.status;
    for (const auto& [k, v] : r.headers) res.set_header(k, v);
    res.set_content(r.body, r.content_type);
  };
  server.Get("/sections", [this, run](const httplib::Request&, httplib::Response& res) {
    run(res, [&] { return sections(); });
  });
  server.Get(R"(/sections/([^/]+)/image)", [this, run](const httplib::Request& req, httplib::Response& res) {
    run(res, [&] {
      const int max_px = req.has_param("max_px") ? parse_max_px(req.get_param_value("max_px")) : kDefaultMaxPx;
      return image(req.matches[1], req.has_param("kind") ? req.get_param_value("kind") : "pp", max_px);
    });
  });
  server.Post(R"(/sections/([^/]+)/solve)", [this, run](const httplib::Request& req, httplib::Response& res) {
    run(res, [&] { return solve(req.matches[1], req.body); });
  });
  server.Post(R"(/sections/([^/]+)/preview)", [this, run](const httplib::Request& req, httplib::Response& res) {
    run(res, [&] { return preview(req.matches[1], req.body); });
  });
  server.Put(R"(/sections/([^/]+)/landmarks)", [this, run](const httplib::Request& req, httplib::Response& res) {
    run(res, [&] { return put_landmarks(req.matches[1], req.body); });
  });
  server.Get(R"(/sections/([^/]+)/landmarks)", [this, run](const httplib::Request& req, httplib::Response& res) {
    run(res, [&] { return get_landmarks(req.matches[1]); });
  });
}

void serve(const Corpus& corpus, const std::string& host, int port) {
  RegistrationService service(corpus);
  httplib::Server server;
  service.install(server);
  if (!server.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
}

}  // namespace thinseg
