#include "tempotrack/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#ifdef TEMPOTRACK_HAS_JPEG
#include <csetjmp>
#include <jpeglib.h>
#endif

namespace tempotrack {

Image Image::solid(int w, int h, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  Image img;
  img.width = w;
  img.height = h;
  img.rgb.resize(static_cast<std::size_t>(w) * h * 3);
  for (std::size_t i = 0; i < img.rgb.size(); i += 3) {
    img.rgb[i] = r;
    img.rgb[i + 1] = g;
    img.rgb[i + 2] = b;
  }
  return img;
}

void save_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path.string());
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.rgb.data()),
          static_cast<std::streamsize>(img.rgb.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

Image load_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  std::string magic;
  f >> magic;
  if (magic != "P6") throw FormatError("not a binary PPM (P6): " + path.string());
  auto next_token = [&f, &path]() {
    // Skips whitespace and # comments.
    for (;;) {
      int c = f.peek();
      if (c == '#') {
        std::string line;
        std::getline(f, line);
      } else if (std::isspace(c)) {
        f.get();
      } else if (c == EOF) {
        throw FormatError("truncated PPM header: " + path.string());
      } else {
        break;
      }
    }
    long v;
    f >> v;
    return v;
  };
  Image img;
  img.width = static_cast<int>(next_token());
  img.height = static_cast<int>(next_token());
  const long maxval = next_token();
  if (maxval != 255) throw FormatError("unsupported PPM maxval: " + path.string());
  f.get();  // single whitespace after maxval
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  f.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.rgb.size()))
    throw FormatError("truncated PPM pixel data: " + path.string());
  return img;
}

#ifdef TEMPOTRACK_HAS_JPEG
namespace {
struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* mgr = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  std::longjmp(mgr->jump, 1);
}

Image load_jpeg(const std::filesystem::path& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw IoError("cannot open: " + path.string());
  jpeg_decompress_struct cinfo;
  JpegErrorMgr jerr;
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = jpeg_error_exit;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(fp);
    throw FormatError("JPEG decode failed: " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, fp);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  Image img;
  img.width = static_cast<int>(cinfo.output_width);
  img.height = static_cast<int>(cinfo.output_height);
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.rgb.data() + static_cast<std::size_t>(cinfo.output_scanline) * img.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(fp);
  return img;
}
}  // namespace
#endif

Image load_image(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  if (ext == ".ppm") return load_ppm(path);
#ifdef TEMPOTRACK_HAS_JPEG
  if (ext == ".jpg" || ext == ".jpeg") return load_jpeg(path);
#endif
  throw FormatError("unsupported image format '" + ext + "': " + path.string());
}

void channel_means(const Image& img, double out[3]) {
  double acc[3] = {0, 0, 0};
  for (std::size_t i = 0; i < img.rgb.size(); i += 3) {
    acc[0] += img.rgb[i];
    acc[1] += img.rgb[i + 1];
    acc[2] += img.rgb[i + 2];
  }
  const double n = static_cast<double>(img.width) * img.height;
  for (int c = 0; c < 3; ++c) out[c] = n > 0 ? acc[c] / n : 0.0;
}

Image gaussian_blur(const Image& img, double sigma) {
  if (sigma <= 0.0) return img;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double ksum = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    ksum += kernel[i + radius];
  }
  for (double& k : kernel) k /= ksum;

  const int w = img.width, h = img.height;
  std::vector<double> tmp(static_cast<std::size_t>(w) * h * 3);
  // Horizontal pass with edge clamping.
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          const int xx = std::clamp(x + i, 0, w - 1);
          acc += kernel[i + radius] * img.px(xx, y)[c];
        }
        tmp[(static_cast<std::size_t>(y) * w + x) * 3 + c] = acc;
      }
  Image out = img;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          const int yy = std::clamp(y + i, 0, h - 1);
          acc += kernel[i + radius] * tmp[(static_cast<std::size_t>(yy) * w + x) * 3 + c];
        }
        out.px(x, y)[c] = static_cast<std::uint8_t>(std::clamp(acc + 0.5, 0.0, 255.0));
      }
  return out;
}

std::uint64_t pixel_hash(const Image& img) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ull;
  };
  mix(static_cast<std::uint64_t>(img.width));
  mix(static_cast<std::uint64_t>(img.height));
  for (std::uint8_t b : img.rgb) mix(b);
  return h;
}

}  // namespace tempotrack
