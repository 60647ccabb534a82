#pragma once

// Rank-4 tensors in NCHW layout and the direct-convolution primitive the
// rest of the library is built on. Dense storage is Eigen-backed and every
// operation here is a pure function of its inputs.

#include <Eigen/Dense>

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace resrep {

using Index = Eigen::Index;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Thrown when a caller violates an operation's shape or range contract.
class ContractViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractViolation(msg);
}

struct Dims4 {
  Index n = 0, c = 0, h = 0, w = 0;
  friend bool operator==(const Dims4&, const Dims4&) = default;
  Index count() const { return n * c * h * w; }
  std::string str() const {
    std::ostringstream os;
    os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
    return os.str();
  }
};

/// Dense (N,C,H,W) array, row-major, with matrix views for the
/// channels-as-rows algebra used throughout the pruning math.
template <typename Scalar>
class Tensor4 {
 public:
  Tensor4() = default;
  Tensor4(Index n, Index c, Index h, Index w)
      : dims_{n, c, h, w}, data_(VectorX<Scalar>::Zero(n * c * h * w)) {}
  explicit Tensor4(Dims4 d) : Tensor4(d.n, d.c, d.h, d.w) {}

  const Dims4& dims() const { return dims_; }
  Index n() const { return dims_.n; }
  Index c() const { return dims_.c; }
  Index h() const { return dims_.h; }
  Index w() const { return dims_.w; }
  Index size() const { return data_.size(); }

  Scalar& at(Index i, Index j, Index p, Index q) {
    return data_[((i * dims_.c + j) * dims_.h + p) * dims_.w + q];
  }
  Scalar at(Index i, Index j, Index p, Index q) const {
    return data_[((i * dims_.c + j) * dims_.h + p) * dims_.w + q];
  }

  VectorX<Scalar>& raw() { return data_; }
  const VectorX<Scalar>& raw() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  /// (n) x (c*h*w) view: one row per leading-axis slice. For a conv kernel
  /// this is the channels-as-rows matrix whose row norms drive pruning.
  Eigen::Map<MatrixX<Scalar>> rows_view() {
    return {data_.data(), dims_.n, dims_.c * dims_.h * dims_.w};
  }
  Eigen::Map<const MatrixX<Scalar>> rows_view() const {
    return {data_.data(), dims_.n, dims_.c * dims_.h * dims_.w};
  }

  /// (c) x (h*w) view of sample i.
  Eigen::Map<MatrixX<Scalar>> sample_view(Index i) {
    return {data_.data() + i * dims_.c * dims_.h * dims_.w, dims_.c, dims_.h * dims_.w};
  }
  Eigen::Map<const MatrixX<Scalar>> sample_view(Index i) const {
    return {data_.data() + i * dims_.c * dims_.h * dims_.w, dims_.c, dims_.h * dims_.w};
  }

  bool all_finite() const { return data_.allFinite(); }

  void set_zero() { data_.setZero(); }

  template <typename Other>
  Tensor4<Other> cast() const {
    Tensor4<Other> out(dims_);
    out.raw() = data_.template cast<Other>();
    return out;
  }

 private:
  Dims4 dims_{};
  VectorX<Scalar> data_;
};

inline Index conv_out_extent(Index in, Index k, Index stride, Index padding) {
  return (in + 2 * padding - k) / stride + 1;
}

namespace detail {

// Unrolls one padded sample into a (C*K*K) x (H'*W') patch matrix so the
// convolution becomes a single matrix product against the kernel rows.
template <typename Scalar>
void im2col(const Tensor4<Scalar>& input, Index sample, Index k, Index stride,
            Index padding, MatrixX<Scalar>& cols) {
  const Index c = input.c(), h = input.h(), w = input.w();
  const Index oh = conv_out_extent(h, k, stride, padding);
  const Index ow = conv_out_extent(w, k, stride, padding);
  cols.setZero(c * k * k, oh * ow);
  for (Index ch = 0; ch < c; ++ch) {
    for (Index p = 0; p < k; ++p) {
      for (Index q = 0; q < k; ++q) {
        const Index row = (ch * k + p) * k + q;
        for (Index oy = 0; oy < oh; ++oy) {
          const Index y = oy * stride + p - padding;
          if (y < 0 || y >= h) continue;
          for (Index ox = 0; ox < ow; ++ox) {
            const Index x = ox * stride + q - padding;
            if (x < 0 || x >= w) continue;
            cols(row, oy * ow + ox) = input.at(sample, ch, y, x);
          }
        }
      }
    }
  }
}

// Scatter-add inverse of im2col, used by the convolution input gradient.
template <typename Scalar>
void col2im(const MatrixX<Scalar>& cols, Index sample, Index k, Index stride,
            Index padding, Tensor4<Scalar>& out) {
  const Index c = out.c(), h = out.h(), w = out.w();
  const Index oh = conv_out_extent(h, k, stride, padding);
  const Index ow = conv_out_extent(w, k, stride, padding);
  for (Index ch = 0; ch < c; ++ch) {
    for (Index p = 0; p < k; ++p) {
      for (Index q = 0; q < k; ++q) {
        const Index row = (ch * k + p) * k + q;
        for (Index oy = 0; oy < oh; ++oy) {
          const Index y = oy * stride + p - padding;
          if (y < 0 || y >= h) continue;
          for (Index ox = 0; ox < ow; ++ox) {
            const Index x = ox * stride + q - padding;
            if (x < 0 || x >= w) continue;
            out.at(sample, ch, y, x) += cols(row, oy * ow + ox);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void check_conv_args(const Tensor4<Scalar>& input, const Tensor4<Scalar>& kernel,
                     Index stride, Index padding) {
  require(kernel.c() == input.c(),
          "conv2d: kernel input channels " + kernel.dims().str() +
              " do not match input " + input.dims().str());
  require(kernel.h() == kernel.w(), "conv2d: kernel must be square, got " + kernel.dims().str());
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(padding >= 0, "conv2d: padding must be >= 0");
  require(input.h() + 2 * padding >= kernel.h() && input.w() + 2 * padding >= kernel.w(),
          "conv2d: kernel " + kernel.dims().str() + " larger than padded input " +
              input.dims().str());
}

}  // namespace detail

/// 2D convolution with zero padding. Output extent along each spatial axis is
/// floor((in + 2*padding - k) / stride) + 1. Internally lowered to a matrix
/// product per sample; the result matches the naive direct-loop semantics.
template <typename Scalar>
Tensor4<Scalar> conv2d(const Tensor4<Scalar>& input, const Tensor4<Scalar>& kernel,
                       const VectorX<Scalar>* bias, Index stride, Index padding) {
  detail::check_conv_args(input, kernel, stride, padding);
  if (bias != nullptr) {
    require(bias->size() == kernel.n(),
            "conv2d: bias length " + std::to_string(bias->size()) +
                " does not match kernel output channels " + std::to_string(kernel.n()));
  }
  const Index k = kernel.h();
  const Index oh = conv_out_extent(input.h(), k, stride, padding);
  const Index ow = conv_out_extent(input.w(), k, stride, padding);
  Tensor4<Scalar> out(input.n(), kernel.n(), oh, ow);
  MatrixX<Scalar> cols;
  auto kmat = kernel.rows_view();
  for (Index i = 0; i < input.n(); ++i) {
    detail::im2col(input, i, k, stride, padding, cols);
    auto omat = out.sample_view(i);
    omat.noalias() = kmat * cols;
    if (bias != nullptr) omat.colwise() += *bias;
  }
  return out;
}

template <typename Scalar>
Tensor4<Scalar> conv2d(const Tensor4<Scalar>& input, const Tensor4<Scalar>& kernel,
                       const VectorX<Scalar>& bias, Index stride, Index padding) {
  return conv2d(input, kernel, &bias, stride, padding);
}

template <typename Scalar>
Tensor4<Scalar> conv2d(const Tensor4<Scalar>& input, const Tensor4<Scalar>& kernel,
                       Index stride, Index padding) {
  return conv2d(input, kernel, static_cast<const VectorX<Scalar>*>(nullptr), stride, padding);
}

/// Gradient of conv2d w.r.t. its input.
template <typename Scalar>
Tensor4<Scalar> conv2d_grad_input(const Tensor4<Scalar>& grad_out, const Tensor4<Scalar>& kernel,
                                  Dims4 input_dims, Index stride, Index padding) {
  require(grad_out.c() == kernel.n(), "conv2d_grad_input: channel mismatch");
  Tensor4<Scalar> grad_in(input_dims);
  const Index k = kernel.h();
  auto kmat = kernel.rows_view();
  MatrixX<Scalar> cols;
  for (Index i = 0; i < grad_out.n(); ++i) {
    cols.noalias() = kmat.transpose() * grad_out.sample_view(i);
    detail::col2im(cols, i, k, stride, padding, grad_in);
  }
  return grad_in;
}

/// Gradient of conv2d w.r.t. the kernel, summed over the batch.
template <typename Scalar>
Tensor4<Scalar> conv2d_grad_kernel(const Tensor4<Scalar>& input, const Tensor4<Scalar>& grad_out,
                                   Dims4 kernel_dims, Index stride, Index padding) {
  Tensor4<Scalar> grad_k(kernel_dims);
  auto gmat = grad_k.rows_view();
  MatrixX<Scalar> cols;
  for (Index i = 0; i < input.n(); ++i) {
    detail::im2col(input, i, kernel_dims.h, stride, padding, cols);
    gmat.noalias() += grad_out.sample_view(i) * cols.transpose();
  }
  return grad_k;
}

/// Gradient of conv2d w.r.t. the bias: sum over batch and spatial positions.
template <typename Scalar>
VectorX<Scalar> conv2d_grad_bias(const Tensor4<Scalar>& grad_out) {
  VectorX<Scalar> g = VectorX<Scalar>::Zero(grad_out.c());
  for (Index i = 0; i < grad_out.n(); ++i) g += grad_out.sample_view(i).rowwise().sum();
  return g;
}

/// Swap the first two axes: (n,c,h,w) -> (c,n,h,w). Involution.
template <typename Scalar>
Tensor4<Scalar> transpose01(const Tensor4<Scalar>& t) {
  Tensor4<Scalar> out(t.c(), t.n(), t.h(), t.w());
  for (Index i = 0; i < t.n(); ++i)
    for (Index j = 0; j < t.c(); ++j)
      for (Index p = 0; p < t.h(); ++p)
        for (Index q = 0; q < t.w(); ++q) out.at(j, i, p, q) = t.at(i, j, p, q);
  return out;
}

/// Euclidean norm of each leading-axis slice, i.e. of each row of the
/// (n) x (c*h*w) matrix view. Entry j is the norm of channel j's parameters.
template <typename Scalar>
VectorX<Scalar> row_norms(const Tensor4<Scalar>& t) {
  return t.rows_view().rowwise().norm();
}

}  // namespace resrep
