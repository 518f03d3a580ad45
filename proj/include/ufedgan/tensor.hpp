#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "ufedgan/common.hpp"

namespace ufed {

// Dense row-major n-d array. Image batches use NCHW. A tensor becomes part of
// an autodiff graph when a Tape watches it or an op produces it under an
// active tape; `node` then indexes that tape's node list.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(numel(shape_), T(0)) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size())
      throw DimensionError("Tensor: shape " + shape_str(shape_) + " wants " +
                           std::to_string(numel(shape_)) + " scalars, got " +
                           std::to_string(data_.size()));
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    for (T& x : t.data_) x = v;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool is_scalar() const { return data_.size() == 1; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T item() const {
    if (!is_scalar()) throw ContractError("Tensor::item: tensor is not scalar, shape " + shape_str(shape_));
    return data_[0];
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool v) { requires_grad_ = v; }

  // Populated for watched leaves by Tape::backward; same shape as data.
  std::vector<T>& grad() { return grad_; }
  const std::vector<T>& grad() const { return grad_; }
  bool has_grad() const { return !grad_.empty(); }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  // Tape linkage; -1 when untracked. Valid only for the tape whose tag matches.
  int node = -1;
  const void* tape_tag = nullptr;

 private:
  Shape shape_;
  std::vector<T> data_;
  std::vector<T> grad_;
  bool requires_grad_ = false;
};

// Flattened, ordered snapshot of parameters or gradients; the unit that
// crosses the wire.
template <typename T>
using ParameterVector = std::vector<T>;

template <typename T>
ParameterVector<T> flatten_params(std::span<const Tensor<T>> tensors) {
  std::size_t total = 0;
  for (const auto& t : tensors) total += t.size();
  ParameterVector<T> out;
  out.reserve(total);
  for (const auto& t : tensors) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

template <typename T>
ParameterVector<T> flatten_params(const std::vector<Tensor<T>>& tensors) {
  return flatten_params(std::span<const Tensor<T>>(tensors.data(), tensors.size()));
}

template <typename T>
std::vector<Tensor<T>> unflatten_params(const ParameterVector<T>& vec, const std::vector<Shape>& shapes) {
  std::size_t total = 0;
  for (const auto& s : shapes) total += numel(s);
  if (total != vec.size())
    throw DimensionError("unflatten_params: shapes want " + std::to_string(total) +
                         " scalars, vector holds " + std::to_string(vec.size()));
  std::vector<Tensor<T>> out;
  out.reserve(shapes.size());
  std::size_t off = 0;
  for (const auto& s : shapes) {
    const std::size_t n = numel(s);
    out.emplace_back(s, std::vector<T>(vec.begin() + off, vec.begin() + off + n));
    off += n;
  }
  return out;
}

// In-place variant used when loading weights into an existing model.
template <typename T>
void unflatten_params_into(const ParameterVector<T>& vec, std::vector<Tensor<T>>& tensors) {
  std::size_t total = 0;
  for (const auto& t : tensors) total += t.size();
  if (total != vec.size())
    throw DimensionError("unflatten_params_into: model wants " + std::to_string(total) +
                         " scalars, vector holds " + std::to_string(vec.size()));
  std::size_t off = 0;
  for (auto& t : tensors) {
    std::copy(vec.begin() + off, vec.begin() + off + t.size(), t.data().begin());
    off += t.size();
  }
}

}  // namespace ufed
