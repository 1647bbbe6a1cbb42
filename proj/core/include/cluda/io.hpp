#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cluda/tensor.hpp"

namespace cluda {

// On-disk tensor container ("CLDT" blob):
//   magic "CLDT" | u16 version=1 | u8 dtype (0=f32, 1=u8) | u8 rank |
//   u32 dims[rank] | payload, all integers and floats little-endian.
// The same container stores dataset images/labels and checkpoint tensors.

inline constexpr std::uint16_t kBlobVersion = 1;

enum class BlobDtype : std::uint8_t { F32 = 0, U8 = 1 };

struct Blob {
  BlobDtype dtype = BlobDtype::F32;
  Shape shape;
  std::vector<float> f32;
  std::vector<std::uint8_t> u8;
};

void write_blob(const std::string& path, const Blob& blob);
Blob read_blob(const std::string& path);

void write_blob_f32(const std::string& path, const TensorF& t);
TensorF read_blob_f32(const std::string& path);

void write_blob_u8(const std::string& path, const Shape& shape,
                   const std::vector<std::uint8_t>& data);

}  // namespace cluda
