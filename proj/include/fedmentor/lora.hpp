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

// Low-rank adapters: per-layer factor pairs (B: d x r, A: r x k) whose
// product perturbs a frozen d x k weight. Includes layer-position
// classification, parameter/payload accounting and the "FMAD" wire format.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "fedmentor/error.hpp"
#include "fedmentor/linalg.hpp"

namespace fedmentor {

enum class AdapterKind { kA, kB };

enum class LayerPosition { kEarly, kMiddle, kLate };

inline constexpr std::string_view to_string(AdapterKind kind) {
  return kind == AdapterKind::kA ? "A" : "B";
}

inline constexpr std::string_view to_string(LayerPosition pos) {
  switch (pos) {
    case LayerPosition::kEarly:
      return "early";
    case LayerPosition::kMiddle:
      return "middle";
    case LayerPosition::kLate:
      return "late";
  }
  return "?";
}

// Equal thirds by layer index: [0, ceil(L/3)) early,
// [ceil(L/3), ceil(2L/3)) middle, the rest late.
inline LayerPosition classify_layer(std::size_t layer_index,
                                    std::size_t total_layers) {
  if (total_layers == 0 || layer_index >= total_layers) {
    throw InvalidArgument("classify_layer: index " +
                          std::to_string(layer_index) +
                          " out of range for " + std::to_string(total_layers) +
                          " layers");
  }
  const std::size_t first = (total_layers + 2) / 3;
  const std::size_t second = (2 * total_layers + 2) / 3;
  if (layer_index < first) return LayerPosition::kEarly;
  if (layer_index < second) return LayerPosition::kMiddle;
  return LayerPosition::kLate;
}

class LoraPair {
 public:
  LoraPair(std::size_t layer_index, Matrix a, Matrix b)
      : layer_index_(layer_index), a_(std::move(a)), b_(std::move(b)) {
    if (a_.rows() != b_.cols()) {
      throw ShapeError("LoraPair: A is " + a_.shape() + " but B is " +
                       b_.shape() + "; A.rows must equal B.cols");
    }
    if (rank() > std::min(d(), k())) {
      throw ShapeError("LoraPair: rank " + std::to_string(rank()) +
                       " exceeds min(d, k) for d=" + std::to_string(d()) +
                       ", k=" + std::to_string(k()));
    }
  }

  std::size_t layer_index() const { return layer_index_; }
  std::size_t rank() const { return a_.rows(); }
  std::size_t d() const { return b_.rows(); }
  std::size_t k() const { return a_.cols(); }

  const Matrix& a() const { return a_; }
  const Matrix& b() const { return b_; }
  Matrix& a() { return a_; }
  Matrix& b() { return b_; }

  const Matrix& factor(AdapterKind kind) const {
    return kind == AdapterKind::kA ? a_ : b_;
  }
  Matrix& factor(AdapterKind kind) {
    return kind == AdapterKind::kA ? a_ : b_;
  }

  bool conforms(const LoraPair& other) const {
    return layer_index_ == other.layer_index_ && rank() == other.rank() &&
           d() == other.d() && k() == other.k();
  }

  friend bool operator==(const LoraPair&, const LoraPair&) = default;

 private:
  std::size_t layer_index_;
  Matrix a_;
  Matrix b_;
};

// Adapter pairs ordered by layer index, covering a subset of `total_layers`.
class AdapterSet {
 public:
  AdapterSet() = default;

  AdapterSet(std::size_t total_layers, std::vector<LoraPair> pairs)
      : total_layers_(total_layers), pairs_(std::move(pairs)) {
    std::sort(pairs_.begin(), pairs_.end(),
              [](const LoraPair& x, const LoraPair& y) {
                return x.layer_index() < y.layer_index();
              });
    for (std::size_t i = 0; i < pairs_.size(); ++i) {
      if (pairs_[i].layer_index() >= total_layers_) {
        throw ShapeError("AdapterSet: layer index " +
                         std::to_string(pairs_[i].layer_index()) +
                         " out of range for " + std::to_string(total_layers_) +
                         " layers");
      }
      if (i > 0 && pairs_[i].layer_index() == pairs_[i - 1].layer_index()) {
        throw ShapeError("AdapterSet: duplicate layer index " +
                         std::to_string(pairs_[i].layer_index()));
      }
    }
  }

  std::size_t total_layers() const { return total_layers_; }
  std::size_t size() const { return pairs_.size(); }
  bool empty() const { return pairs_.empty(); }

  std::span<const LoraPair> pairs() const { return pairs_; }
  std::span<LoraPair> pairs() { return pairs_; }

  const LoraPair* find(std::size_t layer_index) const {
    for (const auto& p : pairs_) {
      if (p.layer_index() == layer_index) return &p;
    }
    return nullptr;
  }

  bool conforms(const AdapterSet& other) const {
    if (total_layers_ != other.total_layers_ ||
        pairs_.size() != other.pairs_.size()) {
      return false;
    }
    for (std::size_t i = 0; i < pairs_.size(); ++i) {
      if (!pairs_[i].conforms(other.pairs_[i])) return false;
    }
    return true;
  }

  friend bool operator==(const AdapterSet&, const AdapterSet&) = default;

 private:
  std::size_t total_layers_ = 0;
  std::vector<LoraPair> pairs_;
};

// Same shapes, every entry zero.
inline AdapterSet zeros_like(const AdapterSet& set) {
  std::vector<LoraPair> pairs;
  pairs.reserve(set.size());
  for (const auto& p : set.pairs()) {
    pairs.emplace_back(p.layer_index(), Matrix(p.a().rows(), p.a().cols()),
                       Matrix(p.b().rows(), p.b().cols()));
  }
  return AdapterSet(set.total_layers(), std::move(pairs));
}

// d x k update B * A.
inline Matrix merge_delta(const LoraPair& pair) {
  return matmul(pair.b(), pair.a());
}

inline std::uint64_t trainable_param_count(const AdapterSet& set) {
  std::uint64_t n = 0;
  for (const auto& p : set.pairs()) n += p.rank() * (p.d() + p.k());
  return n;
}

// ---------------------------------------------------------------------------
// Wire format (all integers little-endian):
//   "FMAD" | u32 version=1 | u32 layer_count
//   layer_count x (u32 layer_index, u32 r, u32 d, u32 k)
//   for each layer in header order: B (d x r) then A (r x k), row-major f64
// The full shape table precedes the bulk data so a reader can validate every
// shape before touching scalars. `total_layers` is not transmitted; decoders
// infer it as max(layer_index) + 1 unless told otherwise.
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> kWireMagic = {'F', 'M', 'A', 'D'};
inline constexpr std::uint32_t kWireVersion = 1;
inline constexpr std::size_t kWireFixedHeaderBytes = 12;
inline constexpr std::size_t kWireLayerHeaderBytes = 16;
inline constexpr std::size_t kWireScalarBytes = 8;

inline std::size_t wire_header_bytes(const AdapterSet& set) {
  return kWireFixedHeaderBytes + kWireLayerHeaderBytes * set.size();
}

// Exact transmitted size of `set` at the given scalar width. With
// `include_header` the per-layer shape table is counted too, which makes
// payload_bytes(set, 8) equal serialize(set).size().
inline std::uint64_t payload_bytes(const AdapterSet& set, int bytes_per_scalar,
                                   bool include_header = true) {
  if (bytes_per_scalar != 2 && bytes_per_scalar != 4 && bytes_per_scalar != 8) {
    throw InvalidArgument("payload_bytes: unsupported scalar width " +
                          std::to_string(bytes_per_scalar));
  }
  const std::uint64_t body =
      trainable_param_count(set) * static_cast<std::uint64_t>(bytes_per_scalar);
  return include_header ? body + wire_header_bytes(set) : body;
}

// Per-round upload volume for `clients` clients each sending
// `per_client_megabytes`.
inline double round_upload_megabytes(double per_client_megabytes,
                                     std::size_t clients) {
  return per_client_megabytes * static_cast<double>(clients);
}

namespace wire_detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(pos_, std::string("truncated payload reading ") + what);
    }
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  double f64(const char* what) {
    need(8, what);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
      bits |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    }
    pos_ += 8;
    return std::bit_cast<double>(bits);
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffULL) {
    throw InvalidArgument(std::string("serialize: ") + what +
                          " does not fit in u32");
  }
  return static_cast<std::uint32_t>(v);
}

}  // namespace wire_detail

inline std::vector<std::uint8_t> serialize(const AdapterSet& set) {
  using wire_detail::checked_u32;
  using wire_detail::put_f64;
  using wire_detail::put_u32;
  std::vector<std::uint8_t> out;
  out.reserve(payload_bytes(set, 8));
  out.insert(out.end(), kWireMagic.begin(), kWireMagic.end());
  put_u32(out, kWireVersion);
  put_u32(out, checked_u32(set.size(), "layer count"));
  for (const auto& p : set.pairs()) {
    put_u32(out, checked_u32(p.layer_index(), "layer index"));
    put_u32(out, checked_u32(p.rank(), "rank"));
    put_u32(out, checked_u32(p.d(), "d"));
    put_u32(out, checked_u32(p.k(), "k"));
  }
  for (const auto& p : set.pairs()) {
    for (double v : p.b().data()) put_f64(out, v);
    for (double v : p.a().data()) put_f64(out, v);
  }
  return out;
}

// Decodes an FMAD payload. `total_layers`, when given, must cover every
// transmitted layer index.
inline AdapterSet deserialize(std::span<const std::uint8_t> bytes,
                              std::optional<std::size_t> total_layers = {}) {
  wire_detail::Reader in(bytes);
  auto magic = in.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kWireMagic.begin())) {
    throw FormatError(0, "bad magic, expected \"FMAD\"");
  }
  const std::size_t version_at = in.offset();
  const std::uint32_t version = in.u32("version");
  if (version != kWireVersion) {
    throw FormatError(version_at,
                      "unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = in.u32("layer count");

  struct Shape {
    std::uint32_t layer, r, d, k;
  };
  std::vector<Shape> shapes;
  std::uint64_t scalars = 0;
  std::size_t max_layer_plus_one = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = in.offset();
    Shape s{in.u32("layer index"), in.u32("rank"), in.u32("d"), in.u32("k")};
    if (s.r == 0 || s.d == 0 || s.k == 0) {
      throw FormatError(at, "zero dimension in layer header");
    }
    if (s.r > std::min(s.d, s.k)) {
      throw FormatError(at, "rank exceeds min(d, k) in layer header");
    }
    scalars += static_cast<std::uint64_t>(s.r) * (s.d + s.k);
    max_layer_plus_one = std::max<std::size_t>(max_layer_plus_one, s.layer + 1);
    shapes.push_back(s);
  }
  const std::uint64_t remaining = bytes.size() - in.offset();
  if (remaining != scalars * kWireScalarBytes) {
    throw FormatError(in.offset(),
                      "body holds " + std::to_string(remaining) +
                          " bytes, header declares " +
                          std::to_string(scalars * kWireScalarBytes));
  }
  const std::size_t layers = total_layers.value_or(max_layer_plus_one);

  std::vector<LoraPair> pairs;
  pairs.reserve(shapes.size());
  for (const auto& s : shapes) {
    std::vector<double> b(static_cast<std::size_t>(s.d) * s.r);
    for (double& v : b) v = in.f64("B");
    std::vector<double> a(static_cast<std::size_t>(s.r) * s.k);
    for (double& v : a) v = in.f64("A");
    pairs.emplace_back(s.layer, Matrix(s.r, s.k, std::move(a)),
                       Matrix(s.d, s.r, std::move(b)));
  }
  try {
    return AdapterSet(layers, std::move(pairs));
  } catch (const ShapeError& e) {
    throw FormatError(kWireFixedHeaderBytes, e.what());
  }
}

}  // namespace fedmentor
