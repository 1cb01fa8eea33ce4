#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>

namespace bias_audit {

struct PngInfo {
    int width = 0;
    int height = 0;
    std::map<std::string, std::string> text;  // tEXt chunks
};

/// Encodes 8-bit RGB pixels (row-major, width*height*3 bytes) with optional
/// tEXt chunks. Output is deterministic for identical inputs.
std::string encode_png_rgb(int width, int height, std::span<const std::uint8_t> rgb,
                           const std::map<std::string, std::string>& text = {});

/// Reads the header and text chunks. Throws Error on anything that is not a PNG.
PngInfo read_png_info(std::string_view bytes);

}  // namespace bias_audit
