#include "gpr/io.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

namespace gpr {

namespace {

constexpr char kTensorMagic[4] = {'G', 'P', 'R', 'T'};
constexpr char kArchiveMagic[4] = {'G', 'P', 'R', 'A'};
constexpr std::uint8_t kVersion = 1;

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::size_t& offset) : bytes_(bytes), offset_(offset) {}

  void need(std::size_t n) const {
    if (bytes_.size() < offset_ || bytes_.size() - offset_ < n) throw CorruptFileError("truncated tensor data");
  }
  std::uint8_t u8() {
    need(1);
    return bytes_[offset_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[offset_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[offset_++]) << (8 * i);
    return v;
  }
  void magic(const char (&expected)[4]) {
    need(4);
    if (std::memcmp(bytes_.data() + offset_, expected, 4) != 0) throw CorruptFileError("bad magic");
    offset_ += 4;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + offset_), n);
    offset_ += n;
    return s;
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t& offset_;
};

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t, DType dtype) {
  std::vector<std::uint8_t> out(kTensorMagic, kTensorMagic + 4);
  out.push_back(kVersion);
  out.push_back(static_cast<std::uint8_t>(dtype));
  if (t.ndim() > 255) throw IoError("tensor rank exceeds 255");
  out.push_back(static_cast<std::uint8_t>(t.ndim()));
  for (auto d : t.shape()) put_u64(out, d);
  for (double v : t.data()) {
    if (dtype == DType::f64) {
      put_u64(out, std::bit_cast<std::uint64_t>(v));
    } else {
      put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes, std::size_t& offset) {
  std::size_t cursor = offset;
  Reader r(bytes, cursor);
  r.magic(kTensorMagic);
  if (r.u8() != kVersion) throw CorruptFileError("unsupported tensor file version");
  const std::uint8_t dtype = r.u8();
  if (dtype != static_cast<std::uint8_t>(DType::f32) && dtype != static_cast<std::uint8_t>(DType::f64)) {
    throw CorruptFileError("unknown dtype code " + std::to_string(dtype));
  }
  const std::size_t ndim = r.u8();
  if (ndim == 0) throw CorruptFileError("tensor rank 0");
  Shape shape;
  std::size_t count = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    const std::uint64_t d = r.u64();
    if (d == 0) throw CorruptFileError("zero-sized dimension");
    if (count > (std::uint64_t{1} << 40) / d) throw CorruptFileError("implausible tensor size");
    count *= d;
    shape.push_back(d);
  }
  const std::size_t width = dtype == static_cast<std::uint8_t>(DType::f64) ? 8 : 4;
  r.need(count * width);
  std::vector<double> data(count);
  for (auto& v : data) {
    v = width == 8 ? std::bit_cast<double>(r.u64()) : static_cast<double>(std::bit_cast<float>(r.u32()));
  }
  offset = cursor;
  return Tensor(std::move(shape), std::move(data));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string read_text(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

void save_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype) {
  write_file(path, encode_tensor(t, dtype));
}

Tensor load_tensor(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  std::size_t offset = 0;
  Tensor t = decode_tensor(bytes, offset);
  if (offset != bytes.size()) throw CorruptFileError("trailing bytes after tensor in " + path.string());
  return t;
}

void save_archive(const std::filesystem::path& path, const NamedTensors& entries) {
  std::vector<std::uint8_t> out(kArchiveMagic, kArchiveMagic + 4);
  out.push_back(kVersion);
  put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    auto rec = encode_tensor(t);
    out.insert(out.end(), rec.begin(), rec.end());
  }
  write_file(path, out);
}

NamedTensors load_archive(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  std::size_t offset = 0;
  Reader r(bytes, offset);
  r.magic(kArchiveMagic);
  if (r.u8() != kVersion) throw CorruptFileError("unsupported archive version");
  const std::uint32_t count = r.u32();
  NamedTensors out;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t len = r.u32();
    std::string name = r.str(len);
    Tensor t = decode_tensor(bytes, offset);
    out.emplace_back(std::move(name), std::move(t));
  }
  if (offset != bytes.size()) throw CorruptFileError("trailing bytes in archive " + path.string());
  return out;
}

Tensor rescale_unit(const Tensor& image) {
  const double lo = min_value(image), hi = max_value(image);
  Tensor out(image.shape(), 0.0);
  if (hi > lo) {
    for (std::size_t i = 0; i < image.numel(); ++i) out[i] = (image[i] - lo) / (hi - lo);
  }
  return out;
}

void export_png(const Tensor& image, const std::filesystem::path& path, int bit_depth) {
  if (image.ndim() != 2) throw ShapeError("export_png expects a 2D image, got " + shape_str(image.shape()));
  if (bit_depth != 8 && bit_depth != 16) throw std::invalid_argument("PNG bit depth must be 8 or 16");
  if (!image.all_finite()) throw std::invalid_argument("export_png: image has non-finite values");
  const std::size_t h = image.dim(0), w = image.dim(1);
  const double maxv = bit_depth == 8 ? 255.0 : 65535.0;
  const std::size_t bpp = bit_depth / 8;
  std::vector<std::uint8_t> rows(h * w * bpp);
  for (std::size_t i = 0; i < h * w; ++i) {
    const auto q = static_cast<std::uint32_t>(std::floor(std::clamp(image[i], 0.0, 1.0) * maxv + 0.5));
    if (bpp == 1) {
      rows[i] = static_cast<std::uint8_t>(q);
    } else {
      rows[2 * i] = static_cast<std::uint8_t>(q >> 8);  // PNG samples are big-endian
      rows[2 * i + 1] = static_cast<std::uint8_t>(q & 0xff);
    }
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), bit_depth, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t r = 0; r < h; ++r) png_write_row(png, rows.data() + r * w * bpp);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("SHA-256 computation failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_text(path)); }

}  // namespace gpr
