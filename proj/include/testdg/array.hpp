#ifndef TESTDG_ARRAY_HPP
#define TESTDG_ARRAY_HPP

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace testdg {

// Dense row-major array of doubles. Shape may have any rank; scalars are
// rank-0 with one element.
class RealArray {
 public:
  RealArray() = default;
  explicit RealArray(std::vector<std::size_t> shape, double fill = 0.0);

  static RealArray scalar(double v);
  static RealArray from_values(std::vector<std::size_t> shape,
                               std::vector<double> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 2-D access; throws if rank != 2.
  double& at(std::size_t row, std::size_t col);
  double at(std::size_t row, std::size_t col) const;
  std::span<const double> row(std::size_t r) const;
  std::span<double> row(std::size_t r);

  double item() const;  // value of a one-element array

  bool all_finite() const;
  bool same_shape(const RealArray& other) const { return shape_ == other.shape_; }
  bool bit_equal(const RealArray& other) const;

  void fill(double v);
  std::string shape_str() const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// Throws std::domain_error naming `context` if any value is non-finite.
void ensure_finite(const RealArray& a, const char* context);

}  // namespace testdg

#endif
