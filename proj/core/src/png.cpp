#include "bias_audit/png.hpp"

#include <cstring>
#include <vector>

#include <png.h>

#include "bias_audit/errors.hpp"

namespace bias_audit {

namespace {

void write_to_string(png_structp png, png_bytep data, png_size_t length) {
    auto* out = static_cast<std::string*>(png_get_io_ptr(png));
    out->append(reinterpret_cast<const char*>(data), length);
}

void flush_noop(png_structp) {}

struct ReadCursor {
    std::string_view bytes;
    std::size_t pos = 0;
};

void read_from_view(png_structp png, png_bytep data, png_size_t length) {
    auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
    if (cur->pos + length > cur->bytes.size()) png_error(png, "truncated PNG");
    std::memcpy(data, cur->bytes.data() + cur->pos, length);
    cur->pos += length;
}

[[noreturn]] void on_png_error(png_structp, png_const_charp msg) { throw Error(std::string("png: ") + msg); }
void on_png_warning(png_structp, png_const_charp) {}

}  // namespace

std::string encode_png_rgb(int width, int height, std::span<const std::uint8_t> rgb,
                           const std::map<std::string, std::string>& text) {
    if (width <= 0 || height <= 0 ||
        rgb.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3) {
        throw PreconditionError("encode_png_rgb: pixel buffer does not match dimensions");
    }
    png_structp png =
        png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, on_png_error, on_png_warning);
    png_infop info = png_create_info_struct(png);
    std::string out;
    try {
        png_set_write_fn(png, &out, write_to_string, flush_noop);
        png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                     PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                     PNG_FILTER_TYPE_DEFAULT);
        std::vector<png_text> chunks;
        std::vector<std::string> keys;
        std::vector<std::string> values;
        keys.reserve(text.size());
        values.reserve(text.size());
        for (const auto& [k, v] : text) {
            keys.push_back(k);
            values.push_back(v);
            png_text t{};
            t.compression = PNG_TEXT_COMPRESSION_NONE;
            t.key = keys.back().data();
            t.text = values.back().data();
            t.text_length = values.back().size();
            chunks.push_back(t);
        }
        if (!chunks.empty()) png_set_text(png, info, chunks.data(), static_cast<int>(chunks.size()));
        png_write_info(png, info);
        for (int y = 0; y < height; ++y) {
            png_write_row(png, rgb.data() + static_cast<std::size_t>(y) * width * 3);
        }
        png_write_end(png, nullptr);
    } catch (...) {
        png_destroy_write_struct(&png, &info);
        throw;
    }
    png_destroy_write_struct(&png, &info);
    return out;
}

PngInfo read_png_info(std::string_view bytes) {
    if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
        throw Error("not a PNG");
    }
    png_structp png =
        png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, on_png_error, on_png_warning);
    png_infop info = png_create_info_struct(png);
    PngInfo out;
    ReadCursor cur{bytes, 0};
    try {
        png_set_read_fn(png, &cur, read_from_view);
        png_read_info(png, info);
        out.width = static_cast<int>(png_get_image_width(png, info));
        out.height = static_cast<int>(png_get_image_height(png, info));
        png_textp chunks = nullptr;
        int n = 0;
        png_get_text(png, info, &chunks, &n);
        for (int i = 0; i < n; ++i) {
            out.text[chunks[i].key] = std::string(chunks[i].text, chunks[i].text_length);
        }
    } catch (...) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

}  // namespace bias_audit
