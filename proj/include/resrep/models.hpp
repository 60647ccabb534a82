#pragma once

// Architecture builders. Targets follow the residual-block rule: the first
// conv of each block is prunable, shortcut and stage-transition convs are
// not, and no target feeds a residual add directly.

#include <random>

#include "resrep/graph.hpp"

namespace resrep {

struct ArchSpec {
  std::string name;
  Index in_channels = 3, in_h = 32, in_w = 32;
  std::vector<Index> widths;    // stage widths (resnets) or per-conv widths (miniconv)
  Index blocks_per_stage = 0;   // resnets only
  Index num_classes = 10;
};

/// He-style normal init, deterministic for a given generator state.
template <typename Scalar>
void init_conv_kernel(Tensor4<Scalar>& kernel, std::mt19937& rng) {
  const double fan_in = double(kernel.c() * kernel.h() * kernel.w());
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (Index i = 0; i < kernel.size(); ++i) kernel.raw()[i] = Scalar(dist(rng));
}

/// Incremental graph construction; tracks channel counts so conv nodes can
/// infer their input width.
template <typename Scalar>
class GraphBuilder {
 public:
  GraphBuilder(Index in_channels, Index in_h, Index in_w, Index num_classes,
               std::uint32_t seed)
      : rng_(seed) {
    g_.in_channels = in_channels;
    g_.in_h = in_h;
    g_.in_w = in_w;
    g_.num_classes = num_classes;
  }

  int conv(int input, Index out_c, Index k, Index stride, Index padding, bool with_bias,
           const std::string& name) {
    Node<Scalar> n;
    n.kind = NodeKind::Conv;
    n.input = input;
    n.name = name;
    n.conv.kernel = Tensor4<Scalar>(out_c, channels_of(input), k, k);
    init_conv_kernel(n.conv.kernel, rng_);
    if (with_bias) n.conv.bias = VectorX<Scalar>::Zero(out_c);
    n.conv.stride = stride;
    n.conv.padding = padding;
    return push(std::move(n), out_c);
  }

  int bn(int input, const std::string& name) {
    Node<Scalar> n;
    n.kind = NodeKind::BatchNorm;
    n.input = input;
    n.name = name;
    n.bn = BatchNormLayer<Scalar>::identity(channels_of(input));
    return push(std::move(n), channels_of(input));
  }

  int relu(int input) {
    Node<Scalar> n;
    n.kind = NodeKind::Relu;
    n.input = input;
    n.name = "relu";
    return push(std::move(n), channels_of(input));
  }

  int gap(int input) {
    Node<Scalar> n;
    n.kind = NodeKind::GlobalAvgPool;
    n.input = input;
    n.name = "gap";
    return push(std::move(n), channels_of(input));
  }

  int add(int a, int b, const std::string& name) {
    Node<Scalar> n;
    n.kind = NodeKind::Add;
    n.input = a;
    n.input2 = b;
    n.name = name;
    return push(std::move(n), channels_of(a));
  }

  void mark_target(int conv_node, int successor_conv) {
    g_.nodes[conv_node].target = true;
    g_.nodes[conv_node].successor = successor_conv;
  }

  ModelGraph<Scalar> finish(const std::string& arch_name) {
    g_.arch_name = arch_name;
    g_.init_grad_buffers();
    validate_graph(g_);
    return std::move(g_);
  }

 private:
  Index channels_of(int idx) const {
    return idx < 0 ? g_.in_channels : channels_[idx];
  }
  int push(Node<Scalar>&& n, Index out_c) {
    g_.nodes.push_back(std::move(n));
    channels_.push_back(out_c);
    return int(g_.nodes.size()) - 1;
  }

  ModelGraph<Scalar> g_;
  std::vector<Index> channels_;
  std::mt19937 rng_;
};

namespace detail {

template <typename Scalar>
ModelGraph<Scalar> build_cifar_resnet(Index blocks_per_stage, const std::string& name,
                                      std::uint32_t seed) {
  const std::vector<Index> stage_widths{16, 32, 64};
  GraphBuilder<Scalar> b(3, 32, 32, 10, seed);
  int cur = b.conv(-1, 16, 3, 1, 1, false, "stem.conv");
  cur = b.relu(b.bn(cur, "stem.bn"));

  Index in_c = 16;
  for (std::size_t s = 0; s < stage_widths.size(); ++s) {
    const Index out_c = stage_widths[s];
    for (Index blk = 0; blk < blocks_per_stage; ++blk) {
      const Index stride = (s > 0 && blk == 0) ? 2 : 1;
      const std::string base =
          "stage" + std::to_string(s + 1) + ".block" + std::to_string(blk + 1);
      const int shortcut_src = cur;
      int c1 = b.conv(cur, out_c, 3, stride, 1, false, base + ".conv1");
      int r1 = b.relu(b.bn(c1, base + ".bn1"));
      int c2 = b.conv(r1, out_c, 3, 1, 1, false, base + ".conv2");
      int b2 = b.bn(c2, base + ".bn2");
      int shortcut = shortcut_src;
      if (stride != 1 || in_c != out_c) {
        int sc = b.conv(shortcut_src, out_c, 1, stride, 0, false, base + ".shortcut");
        shortcut = b.bn(sc, base + ".shortcut_bn");
      }
      cur = b.relu(b.add(b2, shortcut, base + ".add"));
      b.mark_target(c1, c2);
      in_c = out_c;
    }
  }
  int pooled = b.gap(cur);
  b.conv(pooled, 10, 1, 1, 0, true, "classifier");
  return b.finish(name);
}

}  // namespace detail

template <typename Scalar = float>
ModelGraph<Scalar> build_resnet56(std::uint32_t seed = 0) {
  return detail::build_cifar_resnet<Scalar>(9, "resnet56", seed);
}

template <typename Scalar = float>
ModelGraph<Scalar> build_resnet110(std::uint32_t seed = 0) {
  return detail::build_cifar_resnet<Scalar>(18, "resnet110", seed);
}

struct MiniConvOptions {
  Index in_channels = 3, in_h = 16, in_w = 16;
  Index num_classes = 10;
  std::uint32_t seed = 0;
};

/// Plain conv-BN-ReLU chain with stride-2 downsampling between stages.
/// Every conv except the last is a target; the classifier is never one.
template <typename Scalar = float>
ModelGraph<Scalar> build_miniconv(const std::vector<Index>& widths,
                                  const MiniConvOptions& opt = {}) {
  require(widths.size() >= 2, "miniconv needs at least 2 widths, got " +
                                  std::to_string(widths.size()));
  GraphBuilder<Scalar> b(opt.in_channels, opt.in_h, opt.in_w, opt.num_classes, opt.seed);
  std::vector<int> convs;
  int cur = -1;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const Index stride = i == 0 ? 1 : 2;
    convs.push_back(b.conv(cur, widths[i], 3, stride, 1, false,
                           "conv" + std::to_string(i + 1)));
    cur = b.relu(b.bn(convs.back(), "bn" + std::to_string(i + 1)));
  }
  for (std::size_t i = 0; i + 1 < convs.size(); ++i) b.mark_target(convs[i], convs[i + 1]);
  int pooled = b.gap(cur);
  b.conv(pooled, opt.num_classes, 1, 1, 0, true, "classifier");
  return b.finish("miniconv");
}

}  // namespace resrep
