#pragma once
#include <cstdint>
#include <string>
#include <vector>

namespace dms {

using Shape = std::vector<int>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);
std::vector<int64_t> row_major_strides(const Shape& shape);

// Dense row-major float64 tensor. `node` links the tensor to the graph node
// that produced it (-1 when detached from any graph).
struct Tensor {
  Shape shape;
  std::vector<double> values;
  int node = -1;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> v);

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double value);
  static Tensor scalar(double value);

  int64_t size() const { return static_cast<int64_t>(values.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  bool is_scalar() const;
  double scalar_value() const;
};

}  // namespace dms
