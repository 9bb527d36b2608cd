#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace maskclip {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

class TensorFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense n-d tensor of doubles in row-major order. Rank 0 holds one value.
struct Tensor {
  std::vector<std::uint64_t> dims;
  std::vector<double> values;

  std::uint64_t element_count() const;
};

// Layout: "MCPP" | u32 version | u32 ndim | ndim x u64 dims | payload (f64 LE).
inline constexpr std::uint32_t kTensorFileVersion = 1;

std::vector<unsigned char> encode_tensor(const Tensor& tensor);
Tensor decode_tensor(const std::vector<unsigned char>& bytes, const std::string& origin = "<memory>");

void write_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_tensor(const std::filesystem::path& path);

Tensor to_tensor(const Mat& m);
/// Interprets a rank-2 tensor (or rank 0/1 as a single row) as a matrix.
Mat to_matrix(const Tensor& t);

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes);

}  // namespace maskclip
