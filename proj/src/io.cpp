#include "echoflow/io.hpp"

#include <png.h>
#include <openssl/evp.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace echoflow::io {

void write_png_gray(const fs::path& path, int height, int width,
                    std::span<const std::uint8_t> bytes) {
  if (bytes.size() != size_t(height) * size_t(width))
    throw Error(ErrorCode::ShapeMismatch, "png buffer size does not match dimensions");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = png_uint_32(width);
  img.height = png_uint_32(height);
  img.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, bytes.data(), width, nullptr))
    throw Error(ErrorCode::Io, "cannot write png '" + path.string() + "': " + img.message);
}

std::vector<std::uint8_t> read_png_gray(const fs::path& path, int& height, int& width) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw Error(ErrorCode::Io, "cannot read png '" + path.string() + "': " + img.message);
  img.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw Error(ErrorCode::Io, "cannot decode png '" + path.string() + "': " + img.message);
  }
  height = int(img.height);
  width = int(img.width);
  return buf;
}

std::uint8_t quantize_intensity(float v) {
  float c = std::min(1.0f, std::max(0.0f, v));
  return std::uint8_t(std::lround(c * 255.0f));
}

void quantize_in_place(ImageGray& image) {
  for (float& v : image.pixels) v = dequantize_intensity(quantize_intensity(v));
}

void write_image(const fs::path& path, const ImageGray& image) {
  std::vector<std::uint8_t> bytes(image.pixels.size());
  for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize_intensity(image.pixels[i]);
  write_png_gray(path, image.height, image.width, bytes);
}

ImageGray read_image(const fs::path& path) {
  int h = 0, w = 0;
  auto bytes = read_png_gray(path, h, w);
  ImageGray out(h, w);
  for (size_t i = 0; i < bytes.size(); ++i) out.pixels[i] = dequantize_intensity(bytes[i]);
  return out;
}

json to_json(const DatasetSpec& s) {
  return {{"dataset_id", s.dataset_id},
          {"task", std::string(to_string(s.task))},
          {"num_classes", s.num_classes},
          {"num_keypoints", s.num_keypoints},
          {"train_resolution", s.train_resolution},
          {"class_names", s.class_names}};
}

DatasetSpec dataset_spec_from_json(const json& j) {
  try {
    DatasetSpec s;
    s.dataset_id = j.at("dataset_id").get<std::string>();
    s.task = parse_task_kind(j.at("task").get<std::string>());
    s.num_classes = j.value("num_classes", s.num_classes);
    s.num_keypoints = j.value("num_keypoints", s.num_keypoints);
    s.train_resolution = j.value("train_resolution", s.train_resolution);
    s.class_names = j.value("class_names", std::vector<std::string>{});
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("dataset spec: ") + e.what());
  }
}

void write_registry(const fs::path& path, const Registry& registry) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["datasets"] = json::array();
  for (const auto& [_, spec] : registry.specs()) j["datasets"].push_back(to_json(spec));
  write_json(path, j);
}

Registry read_registry(const fs::path& path) {
  json j = read_json(path);
  Registry reg;
  if (!j.contains("datasets") || !j["datasets"].is_array())
    throw Error(ErrorCode::Parse, "registry '" + path.string() + "' has no datasets array");
  for (const auto& d : j["datasets"]) reg.add(dataset_spec_from_json(d));
  return reg;
}

json target_to_json(const Target& target, const std::string& mask_file) {
  return std::visit(
      [&](const auto& t) -> json {
        using T = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<T, MaskMap>) {
          return {{"type", "mask"}, {"file", mask_file}, {"height", t.height}, {"width", t.width}};
        } else if constexpr (std::is_same_v<T, ClassLabel>) {
          json j = {{"type", "class"}, {"index", t.index}};
          if (t.probabilities) j["probabilities"] = *t.probabilities;
          return j;
        } else if constexpr (std::is_same_v<T, NormBox>) {
          return {{"type", "box"}, {"box", {t.x_min, t.y_min, t.x_max, t.y_max}}};
        } else {
          json pts = json::array();
          for (const auto& p : t.points) pts.push_back({p.x, p.y});
          return {{"type", "keypoints"}, {"points", pts}};
        }
      },
      target);
}

Target target_from_json(const json& j, const fs::path& dir) {
  try {
    const auto type = j.at("type").get<std::string>();
    if (type == "mask") {
      int h = 0, w = 0;
      auto bytes = read_png_gray(dir / j.at("file").get<std::string>(), h, w);
      MaskMap m(h, w);
      m.labels = std::move(bytes);
      return m;
    }
    if (type == "class") {
      ClassLabel c;
      c.index = j.at("index").get<int>();
      if (j.contains("probabilities"))
        c.probabilities = j["probabilities"].get<std::vector<double>>();
      return c;
    }
    if (type == "box") {
      auto v = j.at("box").get<std::vector<double>>();
      if (v.size() != 4) throw Error(ErrorCode::Parse, "box must have 4 coordinates");
      return NormBox{v[0], v[1], v[2], v[3]};
    }
    if (type == "keypoints") {
      KeypointSet k;
      for (const auto& p : j.at("points")) k.points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
      return k;
    }
    throw Error(ErrorCode::Parse, "unknown target type '" + type + "'");
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("target: ") + e.what());
  }
}

void write_sample(const fs::path& dir, const std::string& stem, const Sample& s) {
  write_image(dir / "images" / (stem + ".png"), s.image);
  std::string mask_file;
  if (const auto* m = std::get_if<MaskMap>(&s.target)) {
    mask_file = "masks/" + stem + ".png";
    write_png_gray(dir / mask_file, m->height, m->width, m->labels);
  }
  json ann = {{"schema_version", kSchemaVersion},
              {"dataset_id", s.dataset_id},
              {"image", "images/" + stem + ".png"},
              {"original_size", {s.original_size.height, s.original_size.width}},
              {"target", target_to_json(s.target, mask_file)}};
  write_json(dir / "annotations" / (stem + ".json"), ann);
}

Sample read_sample(const fs::path& dir, const std::string& stem) {
  json ann = read_json(dir / "annotations" / (stem + ".json"));
  Sample s;
  try {
    s.dataset_id = ann.at("dataset_id").get<std::string>();
    s.image = read_image(dir / ann.at("image").get<std::string>());
    s.original_size = {ann.at("original_size").at(0).get<int>(),
                       ann.at("original_size").at(1).get<int>()};
    s.target = target_from_json(ann.at("target"), dir);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, "annotation '" + stem + "': " + e.what());
  }
  return s;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write '" + path.string() + "'");
  out << text;
}

json read_json(const fs::path& path) {
  auto text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, "'" + path.string() + "': " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace echoflow::io
