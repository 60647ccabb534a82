#pragma once

// Ordered layer graph with hand-derived forward/backward passes and the
// classification objective. Nodes reference producers by index; the final
// node emits (N, num_classes, 1, 1) logits.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "resrep/layers.hpp"
#include "resrep/tensor.hpp"

namespace resrep {

enum class NodeKind : std::uint8_t { Conv, BatchNorm, Relu, GlobalAvgPool, Add };
enum class ModelKind : std::uint8_t { Base, Reparam, Converted };
enum class Mode : std::uint8_t { Train, Eval };

inline const char* node_kind_name(NodeKind k) {
  switch (k) {
    case NodeKind::Conv: return "conv";
    case NodeKind::BatchNorm: return "bn";
    case NodeKind::Relu: return "relu";
    case NodeKind::GlobalAvgPool: return "gap";
    case NodeKind::Add: return "add";
  }
  return "?";
}

template <typename Scalar>
struct Node {
  NodeKind kind{};
  int input = -1;   // producer index; -1 means the model input batch
  int input2 = -1;  // second operand, Add only
  std::string name;

  ConvLayer<Scalar> conv;     // kind == Conv
  BatchNormLayer<Scalar> bn;  // kind == BatchNorm

  bool target = false;     // conv designated for pruning
  bool compactor = false;  // pointwise forgetting conv
  int owner = -1;          // compactor: node index of its target conv
  int successor = -1;      // target conv: node index of the conv consuming it

  // Channel mask: 1 keeps the objective gradient, 0 routes the channel to
  // the forgetting update. Attached to compactors (or to target convs when
  // gradient resetting is applied to kernels directly).
  std::vector<std::uint8_t> mask;
};

template <typename Scalar>
struct ModelGraph {
  std::vector<Node<Scalar>> nodes;
  Index in_channels = 3, in_h = 32, in_w = 32;
  Index num_classes = 10;
  ModelKind kind = ModelKind::Base;
  std::string arch_name;

  std::vector<int> target_nodes() const {
    std::vector<int> out;
    for (int i = 0; i < int(nodes.size()); ++i)
      if (nodes[i].kind == NodeKind::Conv && nodes[i].target) out.push_back(i);
    return out;
  }
  std::vector<int> compactor_nodes() const {
    std::vector<int> out;
    for (int i = 0; i < int(nodes.size()); ++i)
      if (nodes[i].kind == NodeKind::Conv && nodes[i].compactor) out.push_back(i);
    return out;
  }
  /// Compactor node attached to a given target conv, or -1.
  int compactor_of(int target_node) const {
    for (int i = 0; i < int(nodes.size()); ++i)
      if (nodes[i].compactor && nodes[i].owner == target_node) return i;
    return -1;
  }

  void init_grad_buffers() {
    for (auto& n : nodes) {
      if (n.kind == NodeKind::Conv) n.conv.init_grad_buffers();
      if (n.kind == NodeKind::BatchNorm) n.bn.init_grad_buffers();
    }
  }
  void zero_grads() {
    for (auto& n : nodes) {
      if (n.kind == NodeKind::Conv) n.conv.zero_grads();
      if (n.kind == NodeKind::BatchNorm) n.bn.zero_grads();
    }
  }
};

/// Per-channel spatial shape of every node output for a single sample.
template <typename Scalar>
std::vector<Dims4> infer_shapes(const ModelGraph<Scalar>& m) {
  std::vector<Dims4> shapes(m.nodes.size());
  auto input_shape = [&](int idx) -> Dims4 {
    return idx < 0 ? Dims4{1, m.in_channels, m.in_h, m.in_w} : shapes[idx];
  };
  for (std::size_t i = 0; i < m.nodes.size(); ++i) {
    const auto& n = m.nodes[i];
    const Dims4 in = input_shape(n.input);
    switch (n.kind) {
      case NodeKind::Conv:
        require(in.c == n.conv.in_channels(),
                "node " + std::to_string(i) + " (" + n.name + "): input channels " +
                    std::to_string(in.c) + " vs kernel " + n.conv.kernel.dims().str());
        shapes[i] = {1, n.conv.out_channels(),
                     conv_out_extent(in.h, n.conv.ksize(), n.conv.stride, n.conv.padding),
                     conv_out_extent(in.w, n.conv.ksize(), n.conv.stride, n.conv.padding)};
        break;
      case NodeKind::BatchNorm:
        require(in.c == n.bn.channels(), "node " + std::to_string(i) + " (" + n.name +
                                             "): BN channels mismatch");
        shapes[i] = in;
        break;
      case NodeKind::Relu:
      case NodeKind::GlobalAvgPool:
        shapes[i] = n.kind == NodeKind::GlobalAvgPool ? Dims4{1, in.c, 1, 1} : in;
        break;
      case NodeKind::Add: {
        const Dims4 in2 = input_shape(n.input2);
        require(in == in2, "node " + std::to_string(i) + " (" + n.name +
                               "): residual-add operand shapes differ " + in.str() + " vs " +
                               in2.str());
        shapes[i] = in;
        break;
      }
    }
  }
  return shapes;
}

/// Structural invariants shared by all architectures.
template <typename Scalar>
void validate_graph(const ModelGraph<Scalar>& m) {
  require(!m.nodes.empty(), "graph is empty");
  infer_shapes(m);  // throws on any shape inconsistency
  for (int t : m.target_nodes()) {
    const auto& n = m.nodes[t];
    require(n.successor >= 0 && n.successor < int(m.nodes.size()) &&
                m.nodes[n.successor].kind == NodeKind::Conv,
            "target node " + std::to_string(t) + " (" + n.name +
                ") has no conv successor");
    for (const auto& c : m.nodes) {
      if (c.kind == NodeKind::Add) {
        require(c.input != t && c.input2 != t,
                "target node " + std::to_string(t) + " (" + n.name +
                    ") feeds a residual add directly");
      }
    }
  }
  for (std::size_t i = 0; i < m.nodes.size(); ++i) {
    const auto& n = m.nodes[i];
    if (n.kind == NodeKind::BatchNorm && n.input >= 0 &&
        m.nodes[n.input].kind == NodeKind::Conv) {
      require(!m.nodes[n.input].conv.bias.has_value(),
              "node " + std::to_string(n.input) + " (" + m.nodes[n.input].name +
                  "): conv followed by BN must not carry a bias");
    }
  }
}

template <typename Scalar>
struct Activations {
  struct BnStats {
    VectorX<Scalar> mean, inv_std;
  };
  std::vector<Tensor4<Scalar>> value;  // one per node
  std::vector<BnStats> bn;             // populated for BN nodes in train mode
  Mode mode = Mode::Eval;

  const Tensor4<Scalar>& output() const { return value.back(); }
};

/// (N, num_classes) view of the final node's logits.
template <typename Scalar>
Eigen::Map<const MatrixX<Scalar>> logits_view(const Activations<Scalar>& acts) {
  const auto& out = acts.output();
  return {out.data(), out.n(), out.c()};
}

namespace detail {

template <typename Scalar>
void batchnorm_forward(const BatchNormLayer<Scalar>& bn, const Tensor4<Scalar>& x,
                       Tensor4<Scalar>& y, VectorX<Scalar>* batch_mean,
                       VectorX<Scalar>* batch_var, VectorX<Scalar>* batch_inv_std) {
  const Index c = x.c();
  const Scalar m = Scalar(x.n() * x.h() * x.w());
  VectorX<Scalar> mean, var;
  if (batch_mean != nullptr) {
    mean = VectorX<Scalar>::Zero(c);
    var = VectorX<Scalar>::Zero(c);
    for (Index i = 0; i < x.n(); ++i) mean += x.sample_view(i).rowwise().sum();
    mean /= m;
    for (Index i = 0; i < x.n(); ++i) {
      var += (x.sample_view(i).colwise() - mean).rowwise().squaredNorm();
    }
    var /= m;
  } else {
    mean = bn.running_mean;
    var = bn.running_var;
  }
  const VectorX<Scalar> inv_std = (var.array() + bn.epsilon).rsqrt().matrix();
  const VectorX<Scalar> scale = bn.gamma.cwiseProduct(inv_std);
  const VectorX<Scalar> shift = bn.beta - mean.cwiseProduct(scale);
  for (Index i = 0; i < x.n(); ++i) {
    y.sample_view(i) =
        ((x.sample_view(i).array().colwise() * scale.array()).colwise() + shift.array())
            .matrix();
  }
  if (batch_mean != nullptr) {
    *batch_mean = std::move(mean);
    *batch_var = std::move(var);
    *batch_inv_std = inv_std;
  }
}

}  // namespace detail

/// Run the graph on a batch. Train mode normalizes BN with batch statistics
/// and folds them into the running estimates; eval mode is read-only in
/// effect (running statistics untouched).
template <typename Scalar>
Activations<Scalar> forward(ModelGraph<Scalar>& model, const Tensor4<Scalar>& batch,
                            Mode mode) {
  require(batch.c() == model.in_channels && batch.h() == model.in_h &&
              batch.w() == model.in_w,
          "forward: batch shape " + batch.dims().str() + " does not match model input (c=" +
              std::to_string(model.in_channels) + ",h=" + std::to_string(model.in_h) +
              ",w=" + std::to_string(model.in_w) + ")");
  Activations<Scalar> acts;
  acts.mode = mode;
  acts.value.resize(model.nodes.size());
  acts.bn.resize(model.nodes.size());
  auto in_of = [&](int idx) -> const Tensor4<Scalar>& {
    return idx < 0 ? batch : acts.value[idx];
  };
  for (std::size_t i = 0; i < model.nodes.size(); ++i) {
    auto& n = model.nodes[i];
    const Tensor4<Scalar>& x = in_of(n.input);
    switch (n.kind) {
      case NodeKind::Conv: {
        require(x.c() == n.conv.in_channels(),
                "node " + std::to_string(i) + " (" + n.name + "): input " + x.dims().str() +
                    " vs kernel " + n.conv.kernel.dims().str());
        const VectorX<Scalar>* b = n.conv.bias ? &*n.conv.bias : nullptr;
        acts.value[i] = conv2d(x, n.conv.kernel, b, n.conv.stride, n.conv.padding);
        break;
      }
      case NodeKind::BatchNorm: {
        require(x.c() == n.bn.channels(), "node " + std::to_string(i) + " (" + n.name +
                                              "): BN channels mismatch");
        acts.value[i] = Tensor4<Scalar>(x.dims());
        if (mode == Mode::Train) {
          VectorX<Scalar> var;
          detail::batchnorm_forward(n.bn, x, acts.value[i], &acts.bn[i].mean, &var,
                                    &acts.bn[i].inv_std);
          n.bn.running_mean =
              (Scalar(1) - n.bn.momentum) * n.bn.running_mean + n.bn.momentum * acts.bn[i].mean;
          n.bn.running_var = (Scalar(1) - n.bn.momentum) * n.bn.running_var + n.bn.momentum * var;
        } else {
          detail::batchnorm_forward<Scalar>(n.bn, x, acts.value[i], nullptr, nullptr,
                                            nullptr);
        }
        break;
      }
      case NodeKind::Relu: {
        acts.value[i] = Tensor4<Scalar>(x.dims());
        acts.value[i].raw() = x.raw().cwiseMax(Scalar(0));
        break;
      }
      case NodeKind::GlobalAvgPool: {
        acts.value[i] = Tensor4<Scalar>(x.n(), x.c(), 1, 1);
        const Scalar inv = Scalar(1) / Scalar(x.h() * x.w());
        for (Index s = 0; s < x.n(); ++s) {
          acts.value[i].sample_view(s).col(0) = x.sample_view(s).rowwise().sum() * inv;
        }
        break;
      }
      case NodeKind::Add: {
        const Tensor4<Scalar>& x2 = in_of(n.input2);
        require(x.dims() == x2.dims(), "node " + std::to_string(i) + " (" + n.name +
                                           "): add operands " + x.dims().str() + " vs " +
                                           x2.dims().str());
        acts.value[i] = Tensor4<Scalar>(x.dims());
        acts.value[i].raw() = x.raw() + x2.raw();
        break;
      }
    }
  }
  return acts;
}

template <typename Scalar>
struct LossOutput {
  Scalar loss{};  // gradients are written into each layer's buffers
};

/// Softmax cross-entropy averaged over the batch. Returns the loss and the
/// gradient w.r.t. the logits.
template <typename Scalar>
Scalar softmax_cross_entropy(Eigen::Map<const MatrixX<Scalar>> logits,
                             const std::vector<int>& labels, MatrixX<Scalar>& dlogits) {
  const Index n = logits.rows(), k = logits.cols();
  require(Index(labels.size()) == n, "loss: labels length mismatch");
  dlogits.resize(n, k);
  Scalar loss = 0;
  for (Index i = 0; i < n; ++i) {
    require(labels[i] >= 0 && labels[i] < k, "loss: label out of range");
    const Scalar zmax = logits.row(i).maxCoeff();
    const MatrixX<Scalar> ex = (logits.row(i).array() - zmax).exp().matrix();
    const Scalar denom = ex.sum();
    loss += std::log(denom) + zmax - logits(i, labels[i]);
    dlogits.row(i) = ex / denom;
    dlogits(i, labels[i]) -= Scalar(1);
  }
  loss /= Scalar(n);
  dlogits /= Scalar(n);
  return loss;
}

/// Reverse pass of the classification objective. Requires train-mode
/// activations from forward(); overwrites every layer's gradient buffers.
template <typename Scalar>
LossOutput<Scalar> backward(ModelGraph<Scalar>& model, const Tensor4<Scalar>& batch,
                            const Activations<Scalar>& acts, const std::vector<int>& labels) {
  require(acts.mode == Mode::Train, "backward: requires train-mode activations");
  require(acts.value.size() == model.nodes.size(), "backward: stale activations");
  model.zero_grads();

  MatrixX<Scalar> dlogits;
  const Scalar loss = softmax_cross_entropy(logits_view(acts), labels, dlogits);

  std::vector<Tensor4<Scalar>> grads(model.nodes.size());
  auto accumulate = [&](int idx, Tensor4<Scalar>&& g) {
    if (idx < 0) return;
    if (grads[idx].size() == 0) {
      grads[idx] = std::move(g);
    } else {
      grads[idx].raw() += g.raw();
    }
  };

  {
    const auto& out = acts.output();
    Tensor4<Scalar> g(out.dims());
    Eigen::Map<MatrixX<Scalar>>(g.data(), out.n(), out.c()) = dlogits;
    grads.back() = std::move(g);
  }

  auto in_of = [&](int idx) -> const Tensor4<Scalar>& {
    return idx < 0 ? batch : acts.value[idx];
  };

  for (int i = int(model.nodes.size()) - 1; i >= 0; --i) {
    if (grads[i].size() == 0) continue;  // node does not influence the loss
    auto& n = model.nodes[i];
    const Tensor4<Scalar>& x = in_of(n.input);
    Tensor4<Scalar>& gout = grads[i];
    switch (n.kind) {
      case NodeKind::Conv: {
        n.conv.grad_kernel.raw() +=
            conv2d_grad_kernel(x, gout, n.conv.kernel.dims(), n.conv.stride, n.conv.padding)
                .raw();
        if (n.conv.bias) n.conv.grad_bias += conv2d_grad_bias(gout);
        if (n.input >= 0) {
          accumulate(n.input, conv2d_grad_input(gout, n.conv.kernel, x.dims(), n.conv.stride,
                                                n.conv.padding));
        }
        break;
      }
      case NodeKind::BatchNorm: {
        const auto& st = acts.bn[i];
        const Scalar m = Scalar(x.n() * x.h() * x.w());
        const Index c = x.c();
        VectorX<Scalar> sum_dy = VectorX<Scalar>::Zero(c);
        VectorX<Scalar> sum_dy_xhat = VectorX<Scalar>::Zero(c);
        for (Index s = 0; s < x.n(); ++s) {
          const MatrixX<Scalar> xhat =
              ((x.sample_view(s).colwise() - st.mean).array().colwise() * st.inv_std.array())
                  .matrix();
          sum_dy += gout.sample_view(s).rowwise().sum();
          sum_dy_xhat += gout.sample_view(s).cwiseProduct(xhat).rowwise().sum();
        }
        n.bn.grad_beta += sum_dy;
        n.bn.grad_gamma += sum_dy_xhat;
        Tensor4<Scalar> gin(x.dims());
        const VectorX<Scalar> scale = n.bn.gamma.cwiseProduct(st.inv_std);
        const VectorX<Scalar> mean_dy = sum_dy / m;
        const VectorX<Scalar> mean_dy_xhat = sum_dy_xhat / m;
        for (Index s = 0; s < x.n(); ++s) {
          const MatrixX<Scalar> xhat =
              ((x.sample_view(s).colwise() - st.mean).array().colwise() * st.inv_std.array())
                  .matrix();
          MatrixX<Scalar> centered = gout.sample_view(s);
          centered.colwise() -= mean_dy;
          centered -= (xhat.array().colwise() * mean_dy_xhat.array()).matrix();
          gin.sample_view(s) = (centered.array().colwise() * scale.array()).matrix();
        }
        accumulate(n.input, std::move(gin));
        break;
      }
      case NodeKind::Relu: {
        Tensor4<Scalar> gin(x.dims());
        gin.raw() = (x.raw().array() > Scalar(0))
                        .select(gout.raw().array(), Scalar(0))
                        .matrix();
        accumulate(n.input, std::move(gin));
        break;
      }
      case NodeKind::GlobalAvgPool: {
        Tensor4<Scalar> gin(x.dims());
        const Scalar inv = Scalar(1) / Scalar(x.h() * x.w());
        for (Index s = 0; s < x.n(); ++s) {
          gin.sample_view(s) =
              (gout.sample_view(s).col(0) * inv).rowwise().replicate(x.h() * x.w());
        }
        accumulate(n.input, std::move(gin));
        break;
      }
      case NodeKind::Add: {
        // The gradient distributes identically to both branches.
        accumulate(n.input2, Tensor4<Scalar>(gout));
        accumulate(n.input, std::move(gout));
        break;
      }
    }
  }
  return {loss};
}

/// Top-1 accuracy over a labeled image set, batched, eval mode.
template <typename Scalar>
double evaluate(ModelGraph<Scalar>& model, const Tensor4<Scalar>& images,
                const std::vector<int>& labels, Index batch_size = 128) {
  require(images.n() > 0, "evaluate: empty dataset");
  require(images.n() == Index(labels.size()), "evaluate: image/label count mismatch");
  Index correct = 0;
  for (Index start = 0; start < images.n(); start += batch_size) {
    const Index count = std::min(batch_size, images.n() - start);
    Tensor4<Scalar> batch(count, images.c(), images.h(), images.w());
    const Index stride = images.c() * images.h() * images.w();
    batch.raw() = images.raw().segment(start * stride, count * stride);
    auto acts = forward(model, batch, Mode::Eval);
    auto lg = logits_view(acts);
    for (Index i = 0; i < count; ++i) {
      Index best = 0;
      lg.row(i).maxCoeff(&best);
      if (int(best) == labels[start + i]) ++correct;
    }
  }
  return double(correct) / double(images.n());
}

enum class ParamRole : std::uint8_t { ConvWeight, ConvBias, BnAffine, CompactorKernel };

template <typename Scalar>
struct ParamView {
  std::string name;
  ParamRole role;
  Scalar* value;
  Scalar* grad;
  Index size;
  int node;
};

/// Enumerate every trainable parameter with its gradient buffer, in a fixed
/// graph order. Gradient buffers must already be initialized.
template <typename Scalar>
std::vector<ParamView<Scalar>> parameters(ModelGraph<Scalar>& model) {
  std::vector<ParamView<Scalar>> out;
  for (int i = 0; i < int(model.nodes.size()); ++i) {
    auto& n = model.nodes[i];
    const std::string prefix = "n" + std::to_string(i);
    if (n.kind == NodeKind::Conv) {
      out.push_back({prefix + ".kernel",
                     n.compactor ? ParamRole::CompactorKernel : ParamRole::ConvWeight,
                     n.conv.kernel.data(), n.conv.grad_kernel.data(), n.conv.kernel.size(), i});
      if (n.conv.bias) {
        out.push_back({prefix + ".bias", ParamRole::ConvBias, n.conv.bias->data(),
                       n.conv.grad_bias.data(), n.conv.bias->size(), i});
      }
    } else if (n.kind == NodeKind::BatchNorm) {
      out.push_back({prefix + ".gamma", ParamRole::BnAffine, n.bn.gamma.data(),
                     n.bn.grad_gamma.data(), n.bn.gamma.size(), i});
      out.push_back({prefix + ".beta", ParamRole::BnAffine, n.bn.beta.data(),
                     n.bn.grad_beta.data(), n.bn.beta.size(), i});
    }
  }
  return out;
}

}  // namespace resrep
