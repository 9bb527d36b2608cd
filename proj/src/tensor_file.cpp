#include "maskclip/tensor_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace maskclip {
namespace {

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts need byte swapping");

template <typename T>
void put(std::vector<unsigned char>& out, T value) {
  unsigned char raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

template <typename T>
T take(const std::vector<unsigned char>& in, std::size_t& offset, const std::string& origin) {
  if (in.size() - offset < sizeof(T)) {
    throw TensorFileError(origin + ": truncated tensor header");
  }
  T value;
  std::memcpy(&value, in.data() + offset, sizeof(T));
  offset += sizeof(T);
  return value;
}

}  // namespace

std::uint64_t Tensor::element_count() const {
  std::uint64_t count = 1;
  for (auto d : dims) {
    if (d != 0 && count > std::numeric_limits<std::uint64_t>::max() / d) {
      throw TensorFileError("tensor dims overflow");
    }
    count *= d;
  }
  return count;
}

std::vector<unsigned char> encode_tensor(const Tensor& tensor) {
  if (tensor.element_count() != tensor.values.size()) {
    throw TensorFileError("tensor dims do not match value count");
  }
  std::vector<unsigned char> out;
  out.reserve(12 + 8 * tensor.dims.size() + 8 * tensor.values.size());
  out.insert(out.end(), {'M', 'C', 'P', 'P'});
  put<std::uint32_t>(out, kTensorFileVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.dims.size()));
  for (auto d : tensor.dims) put<std::uint64_t>(out, d);
  const auto* raw = reinterpret_cast<const unsigned char*>(tensor.values.data());
  out.insert(out.end(), raw, raw + 8 * tensor.values.size());
  return out;
}

Tensor decode_tensor(const std::vector<unsigned char>& bytes, const std::string& origin) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "MCPP", 4) != 0) {
    throw TensorFileError(origin + ": bad magic (expected MCPP)");
  }
  std::size_t offset = 4;
  const auto version = take<std::uint32_t>(bytes, offset, origin);
  if (version != kTensorFileVersion) {
    throw TensorFileError(origin + ": unsupported version " + std::to_string(version));
  }
  const auto ndim = take<std::uint32_t>(bytes, offset, origin);
  if (ndim > 16) throw TensorFileError(origin + ": implausible rank " + std::to_string(ndim));
  Tensor t;
  for (std::uint32_t i = 0; i < ndim; ++i) t.dims.push_back(take<std::uint64_t>(bytes, offset, origin));
  std::uint64_t count = 0;
  try {
    count = t.element_count();
  } catch (const TensorFileError&) {
    throw TensorFileError(origin + ": dims overflow");
  }
  if (count > std::numeric_limits<std::uint64_t>::max() / 8) throw TensorFileError(origin + ": dims overflow");
  const std::uint64_t remaining = bytes.size() - offset;
  if (remaining < 8 * count) {
    throw TensorFileError(origin + ": truncated payload (" + std::to_string(remaining) + " of " +
                          std::to_string(8 * count) + " bytes)");
  }
  if (remaining > 8 * count) throw TensorFileError(origin + ": trailing bytes after payload");
  t.values.resize(count);
  std::memcpy(t.values.data(), bytes.data() + offset, 8 * count);
  return t;
}

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorFileError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw TensorFileError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw TensorFileError("short write to " + path.string());
}

void write_tensor(const std::filesystem::path& path, const Tensor& tensor) {
  write_file_bytes(path, encode_tensor(tensor));
}

Tensor read_tensor(const std::filesystem::path& path) {
  return decode_tensor(read_file_bytes(path), path.string());
}

Tensor to_tensor(const Mat& m) {
  Tensor t;
  t.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.values.assign(m.data(), m.data() + m.size());
  return t;
}

Mat to_matrix(const Tensor& t) {
  Eigen::Index rows = 1;
  Eigen::Index cols = 1;
  if (t.dims.size() == 1) {
    cols = static_cast<Eigen::Index>(t.dims[0]);
  } else if (t.dims.size() == 2) {
    rows = static_cast<Eigen::Index>(t.dims[0]);
    cols = static_cast<Eigen::Index>(t.dims[1]);
  } else if (!t.dims.empty()) {
    throw TensorFileError("expected a tensor of rank <= 2, got rank " + std::to_string(t.dims.size()));
  }
  if (static_cast<std::uint64_t>(rows * cols) != t.values.size()) {
    throw TensorFileError("tensor dims do not match value count");
  }
  Mat m(rows, cols);
  std::copy(t.values.begin(), t.values.end(), m.data());
  return m;
}

}  // namespace maskclip
