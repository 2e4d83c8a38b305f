// Copyright 2026 The FedMentor Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
#pragma once

// Dense row-major matrices of doubles and a reproducible random source.
//
// Random streams: every stream is a std::mt19937_64 whose seed is derived by
// SplitMix64-mixing a (run_seed, client_id, round, purpose) tuple, so a
// stream's contents never depend on which thread or in which order it is
// consumed. Normal variates use the Marsaglia polar method; uniforms take the
// top 53 bits of one engine draw. Neither relies on std::*_distribution,
// whose output is implementation defined.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedmentor/error.hpp"

namespace fedmentor {

class Matrix {
 public:
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (rows == 0 || cols == 0) {
      throw ShapeError("matrix dimensions must be positive, got " +
                       shape_string(rows, cols));
    }
  }

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows == 0 || cols == 0) {
      throw ShapeError("matrix dimensions must be positive, got " +
                       shape_string(rows, cols));
    }
    if (data_.size() != rows * cols) {
      throw ShapeError("data length " + std::to_string(data_.size()) +
                       " does not match " + shape_string(rows, cols));
    }
  }

  // Row-list literal, e.g. Matrix{{1, 2}, {3, 4}}.
  Matrix(std::initializer_list<std::initializer_list<double>> rows)
      : Matrix(rows.size(), rows.size() ? rows.begin()->size() : 0) {
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != cols_) throw ShapeError("ragged matrix literal");
      std::size_t j = 0;
      for (double v : row) data_[i * cols_ + j++] = v;
      ++i;
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double operator()(std::size_t i, std::size_t j) const {
    return data_[i * cols_ + j];
  }
  double& operator()(std::size_t i, std::size_t j) {
    return data_[i * cols_ + j];
  }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  std::string shape() const { return shape_string(rows_, cols_); }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  // Bitwise equality of shapes and entries.
  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  static std::string shape_string(std::size_t rows, std::size_t cols) {
    return std::to_string(rows) + "x" + std::to_string(cols);
  }

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<double> data_;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + a.shape() + " by " +
                     b.shape());
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t p = 0; p < a.cols(); ++p) {
      const double aip = a(i, p);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aip * b(p, j);
    }
  }
  return out;
}

// alpha * x + y, elementwise.
inline Matrix axpy(double alpha, const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) {
    throw ShapeError("axpy: shape mismatch " + x.shape() + " vs " + y.shape());
  }
  Matrix out = y;
  auto xs = x.data();
  auto os = out.data();
  for (std::size_t i = 0; i < os.size(); ++i) os[i] = alpha * xs[i] + os[i];
  return out;
}

inline Matrix scaled(double alpha, const Matrix& m) {
  Matrix out = m;
  for (double& v : out.data()) v *= alpha;
  return out;
}

inline double frobenius_norm(const Matrix& m) {
  double sum = 0.0;
  for (double v : m.data()) sum += v * v;
  return std::sqrt(sum);
}

// What a random stream is used for; part of the stream's identity.
enum class StreamPurpose : std::uint64_t {
  kBackbone = 1,
  kAdapterInit = 2,
  kDataTrain = 3,
  kDataVal = 4,
  kShuffle = 5,
  kNoise = 6,
  kFederationSpecs = 7,
  kTest = 99,
};

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Single-owner random stream. Copying duplicates the stream state; never
// share one instance between threads, derive a new stream instead.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  // Stream for a (run, client, round, purpose) tuple. `round` doubles as a
  // generic sub-index (epoch, layer, ...) when the purpose needs one.
  static Rng derive(std::uint64_t run_seed, std::uint64_t client_id,
                    std::uint64_t round, StreamPurpose purpose,
                    std::uint64_t sub = 0) {
    std::uint64_t h = splitmix64(run_seed);
    h = splitmix64(h ^ client_id);
    h = splitmix64(h ^ round);
    h = splitmix64(h ^ static_cast<std::uint64_t>(purpose));
    h = splitmix64(h ^ sub);
    return Rng(h);
  }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n) by rejection; n > 0.
  std::uint64_t uniform_index(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via the Marsaglia polar method.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  // Fisher-Yates, back to front.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[uniform_index(i)]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols,
                       double mean, double std) {
  if (!(std >= 0.0)) {
    throw InvalidArgument("gaussian: std must be >= 0, got " +
                          std::to_string(std));
  }
  Matrix out(rows, cols, mean);
  if (std == 0.0) return out;
  for (double& v : out.data()) v = mean + std * rng.normal();
  return out;
}

}  // namespace fedmentor
