#include "dms/tensor.hpp"

#include <sstream>

#include "dms/error.hpp"

namespace dms {

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

std::vector<int64_t> row_major_strides(const Shape& shape) {
  std::vector<int64_t> s(shape.size(), 1);
  for (int d = static_cast<int>(shape.size()) - 2; d >= 0; --d)
    s[d] = s[d + 1] * shape[d + 1];
  return s;
}

Tensor::Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
  for (int d : shape)
    require(d > 0, "tensor dimension must be positive, got shape " + shape_str(shape));
  require(static_cast<int64_t>(values.size()) == numel(shape),
          "value count " + std::to_string(values.size()) + " does not match shape " +
              shape_str(shape));
}

Tensor Tensor::zeros(Shape s) { return full(std::move(s), 0.0); }

Tensor Tensor::full(Shape s, double value) {
  int64_t n = numel(s);
  return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

bool Tensor::is_scalar() const { return size() == 1; }

double Tensor::scalar_value() const {
  require(is_scalar(), "expected scalar tensor, got shape " + shape_str(shape));
  return values[0];
}

}  // namespace dms
