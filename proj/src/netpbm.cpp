#include "hdca/netpbm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

namespace hdca {

namespace {

struct Header {
  std::size_t width = 0;
  std::size_t height = 0;
  unsigned maxval = 0;
  std::size_t data_offset = 0;
};

class HeaderReader {
 public:
  HeaderReader(std::span<const std::uint8_t> bytes, const char* kind) : bytes_(bytes), kind_(kind) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n' && bytes_[pos_] != '\r') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* field) {
    skip_space_and_comments();
    if (pos_ >= bytes_.size()) {
      throw FormatError(std::string(kind_) + ": truncated header, missing " + field);
    }
    if (!std::isdigit(bytes_[pos_])) {
      throw FormatError(std::string(kind_) + ": malformed header, expected " + field);
    }
    std::size_t v = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + static_cast<std::size_t>(bytes_[pos_] - '0');
      if (v > (1u << 24)) throw FormatError(std::string(kind_) + ": " + field + " too large");
      ++pos_;
    }
    return v;
  }

  Header parse(char magic_digit) {
    if (bytes_.size() < 2 || bytes_[0] != 'P' || bytes_[1] != magic_digit) {
      throw FormatError(std::string(kind_) + ": bad magic, expected P" + magic_digit);
    }
    pos_ = 2;
    Header h;
    h.width = number("width");
    h.height = number("height");
    h.maxval = static_cast<unsigned>(number("maxval"));
    if (h.width == 0 || h.height == 0) throw FormatError(std::string(kind_) + ": zero dimension");
    if (h.maxval == 0 || h.maxval > 255) {
      throw FormatError(std::string(kind_) + ": unsupported maxval " + std::to_string(h.maxval));
    }
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) {
      throw FormatError(std::string(kind_) + ": malformed header, missing whitespace after maxval");
    }
    h.data_offset = pos_ + 1;
    return h;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  const char* kind_;
  std::size_t pos_ = 0;
};

void require_payload(std::span<const std::uint8_t> bytes, const Header& h, std::size_t expected,
                     const char* kind) {
  const std::size_t available = bytes.size() - std::min(bytes.size(), h.data_offset);
  if (available < expected) {
    throw FormatError(std::string(kind) + ": truncated pixel data, expected " +
                      std::to_string(expected) + " bytes, found " + std::to_string(available) +
                      " (missing " + std::to_string(expected - available) + ")");
  }
}

std::vector<std::uint8_t> header_bytes(const char* magic, std::size_t w, std::size_t h) {
  const std::string s = std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  return {s.begin(), s.end()};
}

}  // namespace

std::vector<std::uint8_t> encode_ppm(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("encode_ppm: expected [3,H,W], got " + to_string(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  auto out = header_bytes("P6", w, h);
  out.reserve(out.size() + 3 * plane);
  for (std::size_t j = 0; j < plane; ++j) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(image.at(c * plane + j), 0.0, 1.0);
      out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
    }
  }
  return out;
}

Tensor decode_ppm(std::span<const std::uint8_t> bytes) {
  const Header h = HeaderReader(bytes, "PPM").parse('6');
  const std::size_t plane = h.width * h.height;
  require_payload(bytes, h, 3 * plane, "PPM");
  Tensor image({3, h.height, h.width}, DType::Float32);
  auto d = image.data<float>();
  const auto* px = bytes.data() + h.data_offset;
  for (std::size_t j = 0; j < plane; ++j) {
    for (std::size_t c = 0; c < 3; ++c) {
      d[c * plane + j] = static_cast<float>(px[3 * j + c]) / static_cast<float>(h.maxval);
    }
  }
  return image;
}

std::vector<std::uint8_t> encode_ppm_rgb(std::size_t height, std::size_t width,
                                         std::span<const std::uint8_t> rgb) {
  if (rgb.size() != 3 * height * width) throw ShapeError("encode_ppm_rgb: buffer size mismatch");
  auto out = header_bytes("P6", width, height);
  out.insert(out.end(), rgb.begin(), rgb.end());
  return out;
}

std::vector<std::uint8_t> encode_pgm(const LabelMap& labels) {
  if (labels.values.size() != labels.height * labels.width || labels.values.empty()) {
    throw ShapeError("encode_pgm: label map has inconsistent dimensions");
  }
  auto out = header_bytes("P5", labels.width, labels.height);
  out.insert(out.end(), labels.values.begin(), labels.values.end());
  return out;
}

LabelMap decode_pgm(std::span<const std::uint8_t> bytes) {
  const Header h = HeaderReader(bytes, "PGM").parse('5');
  require_payload(bytes, h, h.width * h.height, "PGM");
  LabelMap labels(h.height, h.width);
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset), h.width * h.height,
              labels.values.begin());
  return labels;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Tensor read_ppm(const std::filesystem::path& path) {
  try {
    return decode_ppm(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  write_file(path, encode_ppm(image));
}

LabelMap read_pgm(const std::filesystem::path& path) {
  try {
    return decode_pgm(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_pgm(const std::filesystem::path& path, const LabelMap& labels) {
  write_file(path, encode_pgm(labels));
}

}  // namespace hdca
