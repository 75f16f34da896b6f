#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "echoflow/core.hpp"

namespace echoflow::io {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

// 8-bit grayscale PNG. Intensities are quantized to k/255 on write.
void write_png_gray(const fs::path& path, int height, int width,
                    std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_png_gray(const fs::path& path, int& height, int& width);

void write_image(const fs::path& path, const ImageGray& image);
ImageGray read_image(const fs::path& path);

std::uint8_t quantize_intensity(float v);
inline float dequantize_intensity(std::uint8_t b) { return float(b) / 255.0f; }

// Round-trips exactly only for images whose intensities are multiples of 1/255.
void quantize_in_place(ImageGray& image);

json to_json(const DatasetSpec& spec);
DatasetSpec dataset_spec_from_json(const json& j);

void write_registry(const fs::path& path, const Registry& registry);
Registry read_registry(const fs::path& path);

json target_to_json(const Target& target, const std::string& mask_file);
Target target_from_json(const json& j, const fs::path& dir);

// Writes <dir>/images/<stem>.png and <dir>/annotations/<stem>.json (plus
// <dir>/masks/<stem>.png for SEG targets).
void write_sample(const fs::path& dir, const std::string& stem, const Sample& sample);
Sample read_sample(const fs::path& dir, const std::string& stem);

json read_json(const fs::path& path);
void write_json(const fs::path& path, const json& j);
std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);

}  // namespace echoflow::io
