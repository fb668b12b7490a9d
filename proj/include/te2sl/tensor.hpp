// Copyright 2026 TE2SL Lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace te2sl {

// Dense row-major tensor of doubles. Value type: copyable, movable,
// safe to pass between threads.
class Tensor {
 public:
  Tensor() = default;

  // Zero-filled tensor of the given shape. All dims must be positive.
  explicit Tensor(std::vector<int> shape);

  // Tensor with explicit contents. Throws ShapeError if the value count does
  // not match the shape, NumericError if any value is NaN or infinite.
  Tensor(std::vector<int> shape, std::vector<double> values);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double fill);

  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  long long numel() const { return static_cast<long long>(values_.size()); }
  bool empty() const { return values_.empty(); }

  // 2-D accessors; rows()/cols() require rank 2.
  int rows() const;
  int cols() const;
  double& at(int r, int c);
  double at(int r, int c) const;

  double& operator[](long long i) { return values_[static_cast<size_t>(i)]; }
  double operator[](long long i) const { return values_[static_cast<size_t>(i)]; }

  std::vector<double>& data() { return values_; }
  const std::vector<double>& data() const { return values_; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  // "[4x3]" — used in error messages.
  std::string shape_str() const;

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && values_ == other.values_;
  }

 private:
  std::vector<int> shape_;
  std::vector<double> values_;
};

// Elementwise helpers on raw values (no gradient bookkeeping).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);
double mean_sq_diff(const Tensor& a, const Tensor& b);

}  // namespace te2sl
