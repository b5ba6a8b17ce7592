#pragma once

// Binary tensor files ("GPRT"): magic, version u8 = 1, dtype u8 (1 = f32,
// 2 = f64), ndim u8, ndim x u64 dims, then row-major payload. All integers
// and values are little-endian.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gpr/tensor.hpp"

namespace gpr {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Truncated payload, bad magic, unknown version or dtype.
class CorruptFileError : public IoError {
 public:
  using IoError::IoError;
};

std::vector<std::uint8_t> encode_tensor(const Tensor& t, DType dtype = DType::f64);
/// Decodes one record starting at offset; offset is advanced past it.
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes, std::size_t& offset);

void save_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype = DType::f64);
Tensor load_tensor(const std::filesystem::path& path);

/// Named tensors in one file: magic "GPRA", version u8 = 1, u32 count, then
/// per entry u32 name length, name bytes and a tensor record.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;
void save_archive(const std::filesystem::path& path, const NamedTensors& entries);
NamedTensors load_archive(const std::filesystem::path& path);

/// Grayscale PNG of a 2D image. Values are clipped to [0, 1] and quantized
/// as floor(v * max + 0.5). Rows are written top to bottom.
void export_png(const Tensor& image, const std::filesystem::path& path, int bit_depth = 8);
/// Maps [min, max] to [0, 1] (constant images map to 0).
Tensor rescale_unit(const Tensor& image);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// Hex SHA-256 of a byte string.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace gpr
