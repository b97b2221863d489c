#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>
#include <zlib.h>

namespace fssd::png {

// Minimal 8-bit grayscale PNG codec. The encoder always emits filter-0
// scanlines at a fixed zlib level so output bytes are reproducible; the
// decoder handles any filter type but only gray8 images.

class PngError : public std::runtime_error {
public:
    explicit PngError(const std::string& m) : std::runtime_error("png: " + m) {}
};

namespace detail {

inline void put_u32be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

inline uint32_t get_u32be(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

inline void put_chunk(std::vector<uint8_t>& out, const char type[4],
                      const std::vector<uint8_t>& data) {
    put_u32be(out, static_cast<uint32_t>(data.size()));
    const size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0, out.data() + start, static_cast<uInt>(out.size() - start)));
    put_u32be(out, crc);
}

} // namespace detail

inline std::vector<uint8_t> encode_gray8(const uint8_t* pixels, int width, int height) {
    std::vector<uint8_t> raw(static_cast<size_t>(height) * (width + 1));
    for (int y = 0; y < height; ++y) {
        raw[static_cast<size_t>(y) * (width + 1)] = 0; // filter: None
        std::memcpy(raw.data() + static_cast<size_t>(y) * (width + 1) + 1,
                    pixels + static_cast<size_t>(y) * width, static_cast<size_t>(width));
    }
    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> comp(comp_len);
    if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw PngError("compress failed");
    comp.resize(comp_len);

    std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<uint8_t> ihdr;
    detail::put_u32be(ihdr, static_cast<uint32_t>(width));
    detail::put_u32be(ihdr, static_cast<uint32_t>(height));
    ihdr.push_back(8); // bit depth
    ihdr.push_back(0); // color type: grayscale
    ihdr.push_back(0); // compression
    ihdr.push_back(0); // filter
    ihdr.push_back(0); // interlace
    detail::put_chunk(out, "IHDR", ihdr);
    detail::put_chunk(out, "IDAT", comp);
    detail::put_chunk(out, "IEND", {});
    return out;
}

inline void write_gray8(const std::string& path, const uint8_t* pixels, int width, int height) {
    const auto bytes = encode_gray8(pixels, width, height);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw PngError("cannot open for write: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw PngError("write failed: " + path);
}

struct Gray8 {
    int width = 0, height = 0;
    std::vector<uint8_t> pixels;
};

inline Gray8 decode_gray8(const std::vector<uint8_t>& bytes) {
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw PngError("bad signature");
    size_t at = 8;
    Gray8 img;
    std::vector<uint8_t> idat;
    bool saw_ihdr = false;
    while (at + 8 <= bytes.size()) {
        const uint32_t len = detail::get_u32be(bytes.data() + at);
        if (at + 12 + len > bytes.size()) throw PngError("truncated chunk");
        const char* type = reinterpret_cast<const char*>(bytes.data() + at + 4);
        const uint8_t* data = bytes.data() + at + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw PngError("bad IHDR");
            img.width = static_cast<int>(detail::get_u32be(data));
            img.height = static_cast<int>(detail::get_u32be(data + 4));
            if (data[8] != 8 || data[9] != 0) throw PngError("only gray8 supported");
            if (data[12] != 0) throw PngError("interlacing not supported");
            saw_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        at += 12 + len;
    }
    if (!saw_ihdr || img.width <= 0 || img.height <= 0) throw PngError("missing IHDR");
    const size_t stride = static_cast<size_t>(img.width) + 1;
    std::vector<uint8_t> raw(stride * static_cast<size_t>(img.height));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw PngError("inflate failed");

    img.pixels.resize(static_cast<size_t>(img.width) * static_cast<size_t>(img.height));
    const int w = img.width;
    for (int y = 0; y < img.height; ++y) {
        const uint8_t filter = raw[static_cast<size_t>(y) * stride];
        const uint8_t* src = raw.data() + static_cast<size_t>(y) * stride + 1;
        uint8_t* dst = img.pixels.data() + static_cast<size_t>(y) * w;
        const uint8_t* up = y > 0 ? img.pixels.data() + static_cast<size_t>(y - 1) * w : nullptr;
        for (int x = 0; x < w; ++x) {
            const int a = x > 0 ? dst[x - 1] : 0;
            const int b = up ? up[x] : 0;
            const int c = (x > 0 && up) ? up[x - 1] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: {
                    const int p = a + b - c;
                    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
                    v += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
                    break;
                }
                default: throw PngError("unknown filter");
            }
            dst[x] = static_cast<uint8_t>(v & 0xff);
        }
    }
    return img;
}

inline Gray8 read_gray8(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw PngError("cannot open: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_gray8(bytes);
}

} // namespace fssd::png
