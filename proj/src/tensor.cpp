#include "croplandws/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace croplandws {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
    throw std::invalid_argument("tensor value count does not match shape " + shape_str(shape_));
}

int64_t Tensor::dim(int i) const {
  if (i < 0) i += rank();
  if (i < 0 || i >= rank()) throw std::out_of_range("tensor dim index out of range");
  return shape_[static_cast<size_t>(i)];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel())
    throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::window(int64_t row0, int64_t col0, int64_t rows, int64_t cols) const {
  if (rank() < 2) throw std::invalid_argument("window() needs a rank>=2 tensor");
  const int64_t H = shape_[shape_.size() - 2];
  const int64_t W = shape_[shape_.size() - 1];
  if (row0 < 0 || col0 < 0 || rows < 0 || cols < 0 || row0 + rows > H || col0 + cols > W)
    throw std::out_of_range("window exceeds tensor bounds");
  Shape out_shape = shape_;
  out_shape[out_shape.size() - 2] = rows;
  out_shape[out_shape.size() - 1] = cols;
  Tensor out(out_shape);
  const int64_t planes = numel() / (H * W);
  for (int64_t p = 0; p < planes; ++p) {
    const double* src = data() + p * H * W;
    double* dst = out.data() + p * rows * cols;
    for (int64_t r = 0; r < rows; ++r)
      std::copy_n(src + (row0 + r) * W + col0, cols, dst + r * cols);
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace croplandws
