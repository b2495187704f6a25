#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lvt/core/error.hpp"

namespace lvt {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major n-dimensional array. Plain value type; differentiation
/// lives in Tape/Var. A scalar is shape {1}.
template <class S>
class Tensor {
 public:
  using value_type = S;

  Tensor() = default;

  explicit Tensor(Shape shape, S fill = S{0}) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (shape_numel(shape_) != data_.size())
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(S v) { return Tensor({1}, std::vector<S>{v}); }

  // 2-D constructor from nested rows, mostly for tests.
  static Tensor matrix(std::initializer_list<std::initializer_list<S>> rows) {
    std::vector<S> flat;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged matrix literal");
      flat.insert(flat.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(flat));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  bool empty() const { return data_.empty(); }

  // Trailing extent, and the product of all leading extents.
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const { return cols() ? size() / cols() : 0; }

  std::span<S> data() { return data_; }
  std::span<const S> data() const { return data_; }
  std::vector<S>& vec() { return data_; }
  const std::vector<S>& vec() const { return data_; }

  S& operator[](std::size_t i) { return data_[i]; }
  const S& operator[](std::size_t i) const { return data_[i]; }

  S& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const S& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<S> row(std::size_t r) { return std::span<S>(data_).subspan(r * cols(), cols()); }
  std::span<const S> row(std::size_t r) const {
    return std::span<const S>(data_).subspan(r * cols(), cols());
  }

  S item() const {
    if (size() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != size())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](S v) { return std::isfinite(v); });
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  void check_shape() const {
    for (auto e : shape_)
      if (e == 0) throw DimensionError("zero extent in shape " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<S> data_;
};

template <class S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// In-place a += b.
template <class S>
void accumulate(Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a, b, "accumulate");
  auto& av = a.vec();
  const auto& bv = b.vec();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
}

}  // namespace lvt
