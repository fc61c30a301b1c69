#include "eegdual/tensor.hpp"

#include <cmath>
#include <string>

#include "eegdual/errors.hpp"

namespace eegdual {

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) {
    if (e <= 0) throw DimensionError("tensor extents must be positive");
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size())
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(shape_));
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

double& Tensor::at(int i, int j) {
  return data_[static_cast<std::size_t>(i) * shape_[1] + j];
}
double Tensor::at(int i, int j) const {
  return data_[static_cast<std::size_t>(i) * shape_[1] + j];
}
double& Tensor::at(int i, int j, int k) {
  return data_[(static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k];
}
double Tensor::at(int i, int j, int k) const {
  return data_[(static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k];
}
double& Tensor::at(int i, int j, int k, int l) {
  return data_[((static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
}
double Tensor::at(int i, int j, int k, int l) const {
  return data_[((static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::fill(double v) {
  for (double& x : data_) x = v;
}

Tensor Tensor::reshaped(Shape s) const {
  if (shape_numel(s) != data_.size())
    throw DimensionError("reshape " + shape_str(shape_) + " -> " + shape_str(s) +
                         " changes element count");
  return Tensor(std::move(s), data_);
}

}  // namespace eegdual
