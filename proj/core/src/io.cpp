#include "cluda/io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <memory>

static_assert(std::endian::native == std::endian::little,
              "CLDT serialization assumes a little-endian host");

namespace cluda {

namespace {

constexpr char kMagic[4] = {'C', 'L', 'D', 'T'};

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_bytes(std::FILE* f, const void* p, std::size_t n, const std::string& path) {
  if (std::fwrite(p, 1, n, f) != n) fail(ErrorKind::IoFailure, "short write to " + path);
}

void read_bytes(std::FILE* f, void* p, std::size_t n, const std::string& path) {
  if (std::fread(p, 1, n, f) != n) fail(ErrorKind::Truncated, "truncated blob " + path);
}

}  // namespace

void write_blob(const std::string& path, const Blob& blob) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) fail(ErrorKind::IoFailure, "cannot open " + path + " for writing");
  write_bytes(f.get(), kMagic, 4, path);
  const std::uint16_t version = kBlobVersion;
  write_bytes(f.get(), &version, 2, path);
  const std::uint8_t dtype = static_cast<std::uint8_t>(blob.dtype);
  write_bytes(f.get(), &dtype, 1, path);
  const std::uint8_t rank = static_cast<std::uint8_t>(blob.shape.size());
  write_bytes(f.get(), &rank, 1, path);
  for (int d : blob.shape) {
    const std::uint32_t dim = static_cast<std::uint32_t>(d);
    write_bytes(f.get(), &dim, 4, path);
  }
  const std::size_t n = static_cast<std::size_t>(numel(blob.shape));
  if (blob.dtype == BlobDtype::F32) {
    if (blob.f32.size() != n) fail(ErrorKind::ShapeMismatch, "f32 payload does not match shape");
    write_bytes(f.get(), blob.f32.data(), n * 4, path);
  } else {
    if (blob.u8.size() != n) fail(ErrorKind::ShapeMismatch, "u8 payload does not match shape");
    write_bytes(f.get(), blob.u8.data(), n, path);
  }
  if (std::fflush(f.get()) != 0) fail(ErrorKind::IoFailure, "flush failed for " + path);
}

Blob read_blob(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) fail(ErrorKind::IoFailure, "cannot open " + path);
  char magic[4];
  read_bytes(f.get(), magic, 4, path);
  if (std::memcmp(magic, kMagic, 4) != 0) fail(ErrorKind::BadMagic, "bad magic in " + path);
  std::uint16_t version = 0;
  read_bytes(f.get(), &version, 2, path);
  if (version != kBlobVersion)
    fail(ErrorKind::BadVersion,
         "unsupported blob version " + std::to_string(version) + " in " + path);
  std::uint8_t dtype = 0, rank = 0;
  read_bytes(f.get(), &dtype, 1, path);
  read_bytes(f.get(), &rank, 1, path);
  if (dtype > 1) fail(ErrorKind::BadVersion, "unknown dtype code in " + path);
  Blob blob;
  blob.dtype = static_cast<BlobDtype>(dtype);
  blob.shape.resize(rank);
  for (int i = 0; i < rank; ++i) {
    std::uint32_t dim = 0;
    read_bytes(f.get(), &dim, 4, path);
    blob.shape[static_cast<std::size_t>(i)] = static_cast<int>(dim);
  }
  const std::size_t n = static_cast<std::size_t>(numel(blob.shape));
  if (blob.dtype == BlobDtype::F32) {
    blob.f32.resize(n);
    read_bytes(f.get(), blob.f32.data(), n * 4, path);
  } else {
    blob.u8.resize(n);
    read_bytes(f.get(), blob.u8.data(), n, path);
  }
  // A well-formed blob ends exactly at the payload.
  char extra;
  if (std::fread(&extra, 1, 1, f.get()) == 1)
    fail(ErrorKind::Truncated, "trailing bytes after payload in " + path);
  return blob;
}

void write_blob_f32(const std::string& path, const TensorF& t) {
  Blob b;
  b.dtype = BlobDtype::F32;
  b.shape = t.shape;
  b.f32 = t.data;
  write_blob(path, b);
}

TensorF read_blob_f32(const std::string& path) {
  Blob b = read_blob(path);
  if (b.dtype != BlobDtype::F32) fail(ErrorKind::BadVersion, "expected f32 blob at " + path);
  return TensorF(b.shape, std::move(b.f32));
}

void write_blob_u8(const std::string& path, const Shape& shape,
                   const std::vector<std::uint8_t>& data) {
  Blob b;
  b.dtype = BlobDtype::U8;
  b.shape = shape;
  b.u8 = data;
  write_blob(path, b);
}

}  // namespace cluda
