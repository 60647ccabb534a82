#pragma once

// Structural re-parameterization: identity compactor insertion, conv-BN
// fusion, compactor pruning and merging, and whole-model conversion to a
// plain narrower network.

#include <algorithm>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "resrep/flops.hpp"
#include "resrep/graph.hpp"
#include "resrep/reports.hpp"

namespace resrep {

/// A compactor whose surviving row set came out empty.
class FullyPruned : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
struct FusedConv {
  Tensor4<Scalar> kernel;
  VectorX<Scalar> bias;
  Index stride = 1;
  Index padding = 0;
};

namespace detail {

/// The unique BN fed by node `t`, which must be its only consumer.
template <typename Scalar>
int bn_after(const ModelGraph<Scalar>& m, int t) {
  int found = -1;
  for (int i = 0; i < int(m.nodes.size()); ++i) {
    const auto& n = m.nodes[i];
    if (n.input == t || (n.kind == NodeKind::Add && n.input2 == t)) {
      require(found < 0, "node " + std::to_string(t) + " (" + m.nodes[t].name +
                             ") has multiple consumers");
      require(n.kind == NodeKind::BatchNorm, "node " + std::to_string(t) + " (" +
                                                 m.nodes[t].name +
                                                 ") is not followed by a BN");
      found = i;
    }
  }
  require(found >= 0, "node " + std::to_string(t) + " (" + m.nodes[t].name +
                          ") has no consumer");
  return found;
}

}  // namespace detail

/// Append an identity pointwise conv after every target conv-BN pair. The
/// transformed model computes exactly the same function.
template <typename Scalar>
ModelGraph<Scalar> insert_compactors(const ModelGraph<Scalar>& model) {
  require(model.kind == ModelKind::Base, "compactors already inserted or model converted");
  const auto targets = model.target_nodes();
  require(!targets.empty(), "model has no target layers");
  for (int t : targets) {
    require(!model.nodes[t].conv.bias.has_value(),
            "target node " + std::to_string(t) + " (" + model.nodes[t].name +
                ") carries a conv bias; conv-BN form required");
  }

  ModelGraph<Scalar> out;
  out.in_channels = model.in_channels;
  out.in_h = model.in_h;
  out.in_w = model.in_w;
  out.num_classes = model.num_classes;
  out.arch_name = model.arch_name;
  out.kind = ModelKind::Reparam;

  // position[i]: where old node i itself landed; read_from[i]: the node new
  // consumers should reference (the compactor once one is appended).
  std::vector<int> position(model.nodes.size()), read_from(model.nodes.size());
  auto remap = [&](int idx) { return idx < 0 ? idx : read_from[idx]; };

  for (int i = 0; i < int(model.nodes.size()); ++i) {
    Node<Scalar> n = model.nodes[i];
    n.input = remap(n.input);
    n.input2 = remap(n.input2);
    out.nodes.push_back(std::move(n));
    position[i] = int(out.nodes.size()) - 1;
    read_from[i] = position[i];

    if (model.nodes[i].kind == NodeKind::BatchNorm && model.nodes[i].input >= 0 &&
        model.nodes[model.nodes[i].input].target) {
      const int owner_old = model.nodes[i].input;
      const Index width = model.nodes[owner_old].conv.out_channels();
      Node<Scalar> comp;
      comp.kind = NodeKind::Conv;
      comp.input = position[i];
      comp.name = model.nodes[owner_old].name + ".compactor";
      comp.conv.kernel = Tensor4<Scalar>(width, width, 1, 1);
      for (Index j = 0; j < width; ++j) comp.conv.kernel.at(j, j, 0, 0) = Scalar(1);
      comp.compactor = true;
      comp.owner = position[owner_old];
      comp.mask.assign(std::size_t(width), 1);
      out.nodes.push_back(std::move(comp));
      read_from[i] = int(out.nodes.size()) - 1;
    }
  }
  for (int i = 0; i < int(model.nodes.size()); ++i) {
    if (model.nodes[i].target) {
      out.nodes[position[i]].successor = position[model.nodes[i].successor];
    }
  }
  out.init_grad_buffers();
  validate_graph(out);
  return out;
}

/// Fold normalization into the preceding conv:
/// scaled kernel row j by γ_j/σ_j, bias_j = β_j − μ_j γ_j/σ_j.
template <typename Scalar>
FusedConv<Scalar> fuse_conv_bn(const Tensor4<Scalar>& kernel, const VectorX<Scalar>& mu,
                               const VectorX<Scalar>& sigma, const VectorX<Scalar>& gamma,
                               const VectorX<Scalar>& beta) {
  const Index d = kernel.n();
  require(mu.size() == d && sigma.size() == d && gamma.size() == d && beta.size() == d,
          "fuse_conv_bn: statistics length mismatch vs kernel " + kernel.dims().str());
  require((sigma.array() > Scalar(0)).all(), "fuse_conv_bn: non-positive sigma");
  FusedConv<Scalar> out;
  const VectorX<Scalar> scale = gamma.cwiseQuotient(sigma);
  out.kernel = kernel;
  out.kernel.rows_view() =
      (kernel.rows_view().array().colwise() * scale.array()).matrix();
  out.bias = beta - mu.cwiseProduct(scale);
  return out;
}

/// Convenience form over layer records; σ comes from the running variance.
template <typename Scalar>
FusedConv<Scalar> fuse_conv_bn(const ConvLayer<Scalar>& conv,
                               const BatchNormLayer<Scalar>& bn) {
  require(conv.out_channels() == bn.channels(),
          "fuse_conv_bn: conv width " + std::to_string(conv.out_channels()) +
              " vs BN channels " + std::to_string(bn.channels()));
  require(!conv.bias.has_value(), "fuse_conv_bn: conv-BN form carries no conv bias");
  const VectorX<Scalar> sigma = (bn.running_var.array() + bn.epsilon).sqrt().matrix();
  auto out = fuse_conv_bn(conv.kernel, bn.running_mean, sigma, bn.gamma, bn.beta);
  out.stride = conv.stride;
  out.padding = conv.padding;
  return out;
}

template <typename Scalar>
struct PruneResult {
  Tensor4<Scalar> kernel;      // surviving rows, original order
  std::vector<Index> kept;     // ascending original indices
  std::vector<Index> dropped;  // complement, ascending
};

/// Drop compactor rows whose Euclidean norm falls below epsilon.
template <typename Scalar>
PruneResult<Scalar> prune_compactor(const Tensor4<Scalar>& q, Scalar epsilon) {
  require(epsilon > Scalar(0), "prune threshold must be positive");
  require(q.h() == 1 && q.w() == 1, "compactor kernel must be pointwise, got " +
                                        q.dims().str());
  const VectorX<Scalar> norms = row_norms(q);
  PruneResult<Scalar> out;
  for (Index j = 0; j < q.n(); ++j) {
    (norms[j] < epsilon ? out.dropped : out.kept).push_back(j);
  }
  if (out.kept.empty()) throw FullyPruned("compactor fully pruned");
  out.kernel = Tensor4<Scalar>(Index(out.kept.size()), q.c(), 1, 1);
  for (Index r = 0; r < Index(out.kept.size()); ++r) {
    out.kernel.rows_view().row(r) = q.rows_view().row(out.kept[std::size_t(r)]);
  }
  return out;
}

/// Collapse a pointwise compactor into the fused conv ahead of it. The
/// composed kernel is T(T(K) convolved with Q) and the bias is Q b.
template <typename Scalar>
FusedConv<Scalar> merge_compactor(const FusedConv<Scalar>& fused,
                                  const Tensor4<Scalar>& qprime) {
  require(qprime.h() == 1 && qprime.w() == 1,
          "compactor kernel must be pointwise, got " + qprime.dims().str());
  require(qprime.c() == fused.kernel.n(),
          "merge_compactor: compactor reads " + std::to_string(qprime.c()) +
              " channels but fused conv emits " + std::to_string(fused.kernel.n()));
  FusedConv<Scalar> out;
  out.kernel = transpose01(conv2d<Scalar>(transpose01(fused.kernel), qprime, nullptr, 1, 0));
  out.bias = qprime.rows_view() * fused.bias;
  out.stride = fused.stride;
  out.padding = fused.padding;
  return out;
}

template <typename Scalar>
struct ConvertResult {
  ModelGraph<Scalar> model;
  WidthReport report;
};

/// Turn a trained re-parameterized model into a plain narrower one: fuse
/// each target conv with its BN, merge in the pruned compactor, and slice
/// the successor conv's matching input channels. Non-target layers are
/// untouched.
template <typename Scalar>
ConvertResult<Scalar> convert_model(const ModelGraph<Scalar>& model,
                                    Scalar epsilon = Scalar(1e-5)) {
  require(model.kind == ModelKind::Reparam, "convert_model expects a re-parameterized model");
  ModelGraph<Scalar> work = model;
  ConvertResult<Scalar> out;
  out.report.original_flops = model_flops(model);

  std::vector<bool> drop(work.nodes.size(), false);
  // consumers of a dropped node read from redirect[i] instead
  std::vector<int> redirect(work.nodes.size());
  for (int i = 0; i < int(work.nodes.size()); ++i) redirect[i] = i;

  for (int t : work.target_nodes()) {
    auto& target = work.nodes[t];
    const int bn_idx = detail::bn_after(work, t);
    const int comp_idx = work.compactor_of(t);
    require(comp_idx >= 0, "target node " + std::to_string(t) + " (" + target.name +
                               ") has no compactor");

    auto fused = fuse_conv_bn(target.conv, work.nodes[bn_idx].bn);
    PruneResult<Scalar> pruned;
    try {
      pruned = prune_compactor(work.nodes[comp_idx].conv.kernel, epsilon);
    } catch (const FullyPruned&) {
      throw FullyPruned("layer " + std::to_string(t) + " (" + target.name +
                        "): every compactor row fell below the prune threshold");
    }
    auto merged = merge_compactor(fused, pruned.kernel);

    out.report.layers.push_back({t, target.name, target.conv.out_channels(),
                                 Index(pruned.kept.size())});

    target.conv.kernel = std::move(merged.kernel);
    target.conv.bias = std::move(merged.bias);
    target.target = false;

    auto& succ = work.nodes[target.successor].conv;
    Tensor4<Scalar> sliced(succ.out_channels(), Index(pruned.kept.size()), succ.ksize(),
                           succ.ksize());
    for (Index o = 0; o < succ.out_channels(); ++o) {
      for (Index r = 0; r < Index(pruned.kept.size()); ++r) {
        const Index src = pruned.kept[std::size_t(r)];
        for (Index p = 0; p < succ.ksize(); ++p) {
          for (Index q = 0; q < succ.ksize(); ++q) {
            sliced.at(o, r, p, q) = succ.kernel.at(o, src, p, q);
          }
        }
      }
    }
    succ.kernel = std::move(sliced);
    target.successor = -1;

    drop[bn_idx] = true;
    drop[comp_idx] = true;
    redirect[bn_idx] = t;
    redirect[comp_idx] = t;
  }

  ModelGraph<Scalar> result;
  result.in_channels = work.in_channels;
  result.in_h = work.in_h;
  result.in_w = work.in_w;
  result.num_classes = work.num_classes;
  result.arch_name = work.arch_name;
  result.kind = ModelKind::Converted;

  std::vector<int> position(work.nodes.size(), -1);
  for (int i = 0; i < int(work.nodes.size()); ++i) {
    if (drop[i]) continue;
    Node<Scalar> n = std::move(work.nodes[i]);
    auto remap = [&](int idx) {
      if (idx < 0) return idx;
      while (drop[idx]) idx = redirect[idx];
      return position[idx];
    };
    n.input = remap(n.input);
    n.input2 = remap(n.input2);
    n.mask.clear();
    result.nodes.push_back(std::move(n));
    position[i] = int(result.nodes.size()) - 1;
  }
  result.init_grad_buffers();
  validate_graph(result);
  out.report.final_flops = model_flops(result);
  out.model = std::move(result);
  return out;
}

}  // namespace resrep
