#pragma once

// Trainable layer parameter records. Gradient buffers live next to the
// parameters they match; the graph backward pass fills them.

#include <optional>

#include "resrep/tensor.hpp"

namespace resrep {

template <typename Scalar>
struct ConvLayer {
  Tensor4<Scalar> kernel;               // (out_channels, in_channels, k, k)
  std::optional<VectorX<Scalar>> bias;  // absent whenever a BN follows
  Index stride = 1;
  Index padding = 0;

  Tensor4<Scalar> grad_kernel;
  VectorX<Scalar> grad_bias;

  Index out_channels() const { return kernel.n(); }
  Index in_channels() const { return kernel.c(); }
  Index ksize() const { return kernel.h(); }

  void init_grad_buffers() {
    grad_kernel = Tensor4<Scalar>(kernel.dims());
    if (bias) grad_bias = VectorX<Scalar>::Zero(bias->size());
  }
  void zero_grads() {
    grad_kernel.set_zero();
    if (bias) grad_bias.setZero();
  }
};

template <typename Scalar>
struct BatchNormLayer {
  VectorX<Scalar> gamma, beta;
  VectorX<Scalar> running_mean, running_var;
  Scalar epsilon = Scalar(1e-5);
  Scalar momentum = Scalar(0.1);  // running-stat EMA coefficient

  VectorX<Scalar> grad_gamma, grad_beta;

  Index channels() const { return gamma.size(); }

  static BatchNormLayer identity(Index c) {
    BatchNormLayer bn;
    bn.gamma = VectorX<Scalar>::Ones(c);
    bn.beta = VectorX<Scalar>::Zero(c);
    bn.running_mean = VectorX<Scalar>::Zero(c);
    bn.running_var = VectorX<Scalar>::Ones(c);
    return bn;
  }

  void init_grad_buffers() {
    grad_gamma = VectorX<Scalar>::Zero(channels());
    grad_beta = VectorX<Scalar>::Zero(channels());
  }
  void zero_grads() {
    grad_gamma.setZero();
    grad_beta.setZero();
  }
};

}  // namespace resrep
