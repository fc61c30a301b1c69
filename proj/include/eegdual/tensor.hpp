#ifndef EEGDUAL_TENSOR_HPP
#define EEGDUAL_TENSOR_HPP

#include <cstddef>
#include <string>
#include <vector>

namespace eegdual {

using Shape = std::vector<int>;

// Dense row-major tensor of 64-bit reals. Plain value type; gradient buffers
// and graph membership live on the Tape, not here.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(Shape shape);                       // zero-filled
  Tensor(Shape shape, std::vector<double> data);
  Tensor(Shape shape, double fill);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  std::size_t numel() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(int i, int j);                 // 2-d
  double at(int i, int j) const;
  double& at(int i, int j, int k);          // 3-d
  double at(int i, int j, int k) const;
  double& at(int i, int j, int k, int l);   // 4-d
  double at(int i, int j, int k, int l) const;

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;
  void fill(double v);

  Tensor reshaped(Shape s) const;

private:
  Shape shape_;
  std::vector<double> data_;
};

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

}  // namespace eegdual

#endif
