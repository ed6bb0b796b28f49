#include "testdg/array.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace testdg {

namespace {
std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}
}  // namespace

RealArray::RealArray(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

RealArray RealArray::scalar(double v) {
  RealArray a;
  a.data_.assign(1, v);
  return a;
}

RealArray RealArray::from_values(std::vector<std::size_t> shape,
                                 std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("RealArray: shape does not match value count");
  }
  RealArray a;
  a.shape_ = std::move(shape);
  a.data_ = std::move(values);
  return a;
}

double& RealArray::at(std::size_t row, std::size_t col) {
  if (rank() != 2) throw std::invalid_argument("RealArray::at requires rank 2");
  return data_[row * shape_[1] + col];
}

double RealArray::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw std::invalid_argument("RealArray::at requires rank 2");
  return data_[row * shape_[1] + col];
}

std::span<const double> RealArray::row(std::size_t r) const {
  if (rank() != 2) throw std::invalid_argument("RealArray::row requires rank 2");
  return {data_.data() + r * shape_[1], shape_[1]};
}

std::span<double> RealArray::row(std::size_t r) {
  if (rank() != 2) throw std::invalid_argument("RealArray::row requires rank 2");
  return {data_.data() + r * shape_[1], shape_[1]};
}

double RealArray::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("RealArray::item requires exactly one element, got shape " +
                                shape_str());
  }
  return data_[0];
}

bool RealArray::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool RealArray::bit_equal(const RealArray& other) const {
  if (shape_ != other.shape_) return false;
  for (std::size_t i = 0; i < data_.size(); ++i) {
    // bit comparison, so NaN != NaN and -0.0 != 0.0 are surfaced
    if (std::memcmp(&data_[i], &other.data_[i], sizeof(double)) != 0) return false;
  }
  return true;
}

void RealArray::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::string RealArray::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << ",";
    os << shape_[i];
  }
  os << "]";
  return os.str();
}

void ensure_finite(const RealArray& a, const char* context) {
  if (!a.all_finite()) {
    throw std::domain_error(std::string("non-finite values produced by ") + context);
  }
}

}  // namespace testdg
