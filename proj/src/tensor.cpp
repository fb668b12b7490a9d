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

#include "te2sl/tensor.hpp"

#include <cmath>
#include <sstream>

#include "te2sl/errors.hpp"

namespace te2sl {

namespace {

long long checked_numel(const std::vector<int>& shape) {
  long long n = 1;
  for (int d : shape) {
    if (d <= 0) {
      throw ShapeError("tensor dimension must be positive, got " + std::to_string(d));
    }
    n *= d;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  values_.assign(static_cast<size_t>(checked_numel(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  long long n = checked_numel(shape_);
  if (n != static_cast<long long>(values_.size())) {
    throw ShapeError("tensor " + shape_str() + " expects " + std::to_string(n) +
                     " values, got " + std::to_string(values_.size()));
  }
  if (!all_finite()) {
    throw NumericError("tensor " + shape_str() + " constructed with non-finite values");
  }
}

Tensor Tensor::full(std::vector<int> shape, double fill) {
  Tensor t(std::move(shape));
  for (auto& v : t.values_) v = fill;
  return t;
}

int Tensor::rows() const {
  if (rank() != 2) throw ShapeError("rows() requires rank-2 tensor, got " + shape_str());
  return shape_[0];
}

int Tensor::cols() const {
  if (rank() != 2) throw ShapeError("cols() requires rank-2 tensor, got " + shape_str());
  return shape_[1];
}

double& Tensor::at(int r, int c) {
  return values_[static_cast<size_t>(r) * static_cast<size_t>(shape_[1]) + static_cast<size_t>(c)];
}

double Tensor::at(int r, int c) const {
  return values_[static_cast<size_t>(r) * static_cast<size_t>(shape_[1]) + static_cast<size_t>(c)];
}

bool Tensor::all_finite() const {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << "x";
    os << shape_[i];
  }
  os << "]";
  return os.str();
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
  Tensor out = a;
  for (long long i = 0; i < out.numel(); ++i) out[i] += b[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("sub: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
  Tensor out = a;
  for (long long i = 0; i < out.numel(); ++i) out[i] -= b[i];
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("max_abs_diff: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
  double m = 0.0;
  for (long long i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

double mean_sq_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("mean_sq_diff: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
  double s = 0.0;
  for (long long i = 0; i < a.numel(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.numel());
}

}  // namespace te2sl
