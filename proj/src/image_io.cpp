#include "cvos/image_io.hpp"

#include <png.h>

#include <cctype>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>

namespace cvos {

namespace {

namespace fs = std::filesystem;

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const fs::path& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw std::runtime_error("cannot open " + path.string());
    return f;
}

std::string lower_extension(const fs::path& path) {
    std::string ext = path.extension().string();
    for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return ext;
}

struct PngError {
    char message[256] = {0};
    std::jmp_buf jump;
};

void png_error_handler(png_structp png, png_const_charp msg) {
    auto* err = static_cast<PngError*>(png_get_error_ptr(png));
    std::snprintf(err->message, sizeof(err->message), "%s", msg);
    std::longjmp(err->jump, 1);
}

void png_warning_handler(png_structp, png_const_charp) {}

// Low-level libpng wrappers. Every C++ object touched after setjmp is
// constructed before it, so a longjmp never skips a destructor.
struct PngReadState {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngReadState() { png_destroy_read_struct(&png, info ? &info : nullptr, nullptr); }
};

struct PngWriteState {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngWriteState() { png_destroy_write_struct(&png, info ? &info : nullptr); }
};

enum class PngTarget { Rgb, Index };

void read_png(const fs::path& path, PngTarget target, std::size_t& height, std::size_t& width,
              std::vector<std::uint8_t>& pixels) {
    FilePtr file = open_file(path, "rb");
    PngError err;
    PngReadState st;
    std::vector<png_bytep> rows;
    bool bad_type = false;
    st.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_handler, png_warning_handler);
    if (!st.png) throw std::runtime_error("libpng: out of memory");
    st.info = png_create_info_struct(st.png);
    if (!st.info) throw std::runtime_error("libpng: out of memory");
    if (setjmp(err.jump)) {
        throw std::runtime_error(path.string() + ": " + err.message);
    }
    png_init_io(st.png, file.get());
    png_read_info(st.png, st.info);
    const png_uint_32 w = png_get_image_width(st.png, st.info);
    const png_uint_32 h = png_get_image_height(st.png, st.info);
    const int color = png_get_color_type(st.png, st.info);
    const int depth = png_get_bit_depth(st.png, st.info);
    if (target == PngTarget::Rgb) {
        if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(st.png);
        if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
            if (depth < 8) png_set_expand_gray_1_2_4_to_8(st.png);
            png_set_gray_to_rgb(st.png);
        }
        if (depth == 16) png_set_strip_16(st.png);
        if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(st.png);
    } else {
        if (color == PNG_COLOR_TYPE_PALETTE) {
            if (depth < 8) png_set_packing(st.png);
        } else if (color != PNG_COLOR_TYPE_GRAY || depth != 8) {
            bad_type = true;
        }
    }
    if (!bad_type) {
        png_read_update_info(st.png, st.info);
        const std::size_t channels = target == PngTarget::Rgb ? 3 : 1;
        if (png_get_rowbytes(st.png, st.info) != w * channels) {
            bad_type = true;
        } else {
            height = h;
            width = w;
            pixels.assign(static_cast<std::size_t>(h) * w * channels, 0);
            rows.resize(h);
            for (png_uint_32 y = 0; y < h; ++y) rows[y] = pixels.data() + static_cast<std::size_t>(y) * w * channels;
            png_read_image(st.png, rows.data());
            png_read_end(st.png, nullptr);
        }
    }
    if (bad_type) throw std::runtime_error(path.string() + ": expected an 8-bit palette or grayscale PNG");
}

void write_png(const fs::path& path, PngTarget target, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& pixels) {
    const std::size_t channels = target == PngTarget::Rgb ? 3 : 1;
    if (height == 0 || width == 0 || pixels.size() != height * width * channels) {
        throw std::invalid_argument("write_png: pixel buffer does not match dimensions");
    }
    const std::vector<std::uint8_t> palette_bytes = label_palette();
    std::vector<png_color> palette(256);
    for (std::size_t i = 0; i < 256; ++i) {
        palette[i] = png_color{palette_bytes[3 * i], palette_bytes[3 * i + 1], palette_bytes[3 * i + 2]};
    }
    std::vector<png_bytep> rows(height);
    for (std::size_t y = 0; y < height; ++y) rows[y] = const_cast<png_bytep>(pixels.data() + y * width * channels);

    FilePtr file = open_file(path, "wb");
    PngError err;
    PngWriteState st;
    st.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_handler, png_warning_handler);
    if (!st.png) throw std::runtime_error("libpng: out of memory");
    st.info = png_create_info_struct(st.png);
    if (!st.info) throw std::runtime_error("libpng: out of memory");
    if (setjmp(err.jump)) {
        throw std::runtime_error(path.string() + ": " + err.message);
    }
    png_init_io(st.png, file.get());
    png_set_IHDR(st.png, st.info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 target == PngTarget::Rgb ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_PALETTE, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    if (target == PngTarget::Index) png_set_PLTE(st.png, st.info, palette.data(), 256);
    png_write_info(st.png, st.info);
    png_write_image(st.png, rows.data());
    png_write_end(st.png, nullptr);
}

// Binary PNM header: magic, width, height, maxval, with '#' comments.
void read_pnm_header(std::istream& in, const fs::path& path, const char* magic, std::size_t& width,
                     std::size_t& height) {
    auto next_token = [&]() {
        std::string tok;
        while (in) {
            int c = in.peek();
            if (c == '#') {
                std::string skip;
                std::getline(in, skip);
            } else if (std::isspace(c)) {
                in.get();
            } else {
                break;
            }
        }
        in >> tok;
        return tok;
    };
    if (next_token() != magic) throw std::runtime_error(path.string() + ": not a binary " + magic + " file");
    const std::string w = next_token(), h = next_token(), maxval = next_token();
    try {
        width = std::stoul(w);
        height = std::stoul(h);
    } catch (const std::exception&) {
        throw std::runtime_error(path.string() + ": malformed header");
    }
    if (maxval != "255") throw std::runtime_error(path.string() + ": only maxval 255 is supported");
    in.get();
    if (width == 0 || height == 0) throw std::runtime_error(path.string() + ": empty image");
}

void read_pnm_pixels(std::istream& in, const fs::path& path, std::vector<std::uint8_t>& pixels) {
    in.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(pixels.size())) {
        throw std::runtime_error(path.string() + ": truncated pixel data");
    }
}

void write_pnm(const fs::path& path, const char* magic, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& pixels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string());
    out << magic << "\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

std::vector<std::uint8_t> label_palette() {
    std::vector<std::uint8_t> pal(256 * 3, 0);
    for (unsigned i = 0; i < 256; ++i) {
        unsigned r = 0, g = 0, b = 0, id = i;
        for (int j = 7; j >= 0; --j) {
            r |= ((id >> 0) & 1u) << j;
            g |= ((id >> 1) & 1u) << j;
            b |= ((id >> 2) & 1u) << j;
            id >>= 3;
        }
        pal[3 * i] = static_cast<std::uint8_t>(r);
        pal[3 * i + 1] = static_cast<std::uint8_t>(g);
        pal[3 * i + 2] = static_cast<std::uint8_t>(b);
    }
    return pal;
}

RgbImage read_rgb(const fs::path& path) {
    const std::string ext = lower_extension(path);
    RgbImage img;
    if (ext == ".png") {
        read_png(path, PngTarget::Rgb, img.height, img.width, img.data);
    } else if (ext == ".ppm") {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot open " + path.string());
        read_pnm_header(in, path, "P6", img.width, img.height);
        img.data.resize(img.height * img.width * 3);
        read_pnm_pixels(in, path, img.data);
    } else {
        throw std::runtime_error(path.string() + ": unsupported frame format (expected .png or .ppm)");
    }
    return img;
}

void write_rgb(const fs::path& path, const RgbImage& image) {
    const std::string ext = lower_extension(path);
    if (ext == ".png") {
        write_png(path, PngTarget::Rgb, image.height, image.width, image.data);
    } else if (ext == ".ppm") {
        write_pnm(path, "P6", image.height, image.width, image.data);
    } else {
        throw std::runtime_error(path.string() + ": unsupported frame format (expected .png or .ppm)");
    }
}

LabelMap read_label_png(const fs::path& path) {
    LabelMap labels;
    read_png(path, PngTarget::Index, labels.height, labels.width, labels.data);
    return labels;
}

void write_label_png(const fs::path& path, const LabelMap& labels) {
    write_png(path, PngTarget::Index, labels.height, labels.width, labels.data);
}

GrayImage read_pgm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    GrayImage img;
    read_pnm_header(in, path, "P5", img.width, img.height);
    img.data.resize(img.height * img.width);
    read_pnm_pixels(in, path, img.data);
    return img;
}

void write_pgm(const fs::path& path, const GrayImage& image) {
    if (image.data.size() != image.height * image.width || image.data.empty()) {
        throw std::invalid_argument("write_pgm: pixel buffer does not match dimensions");
    }
    write_pnm(path, "P5", image.height, image.width, image.data);
}

}  // namespace cvos
