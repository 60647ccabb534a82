#pragma once

// Multiply-add accounting. Only convolutions count (the pooled classifier
// is itself a pointwise conv); normalization, activations, pooling, and
// residual adds contribute nothing.

#include <cstdint>
#include <map>
#include <vector>

#include "resrep/graph.hpp"

namespace resrep {

inline std::uint64_t layer_flops(Index out_c, Index in_c, Index k, Index out_h,
                                 Index out_w) {
  require(out_c >= 0 && in_c >= 0 && k >= 1 && out_h >= 1 && out_w >= 1,
          "layer_flops: bad dimensions");
  return std::uint64_t(out_c) * std::uint64_t(in_c) * std::uint64_t(k) *
         std::uint64_t(k) * std::uint64_t(out_h) * std::uint64_t(out_w);
}

/// Total multiply-adds for one input sample. Compactors are bookkeeping in a
/// re-parameterized model (they fold away at conversion) and are skipped
/// there; in any other model kind a pointwise conv counts like any other.
template <typename Scalar>
std::uint64_t model_flops(const ModelGraph<Scalar>& m) {
  const auto shapes = infer_shapes(m);
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < m.nodes.size(); ++i) {
    const auto& n = m.nodes[i];
    if (n.kind != NodeKind::Conv) continue;
    if (n.compactor && m.kind == ModelKind::Reparam) continue;
    total += layer_flops(n.conv.out_channels(), n.conv.in_channels(), n.conv.ksize(),
                         shapes[i].h, shapes[i].w);
  }
  return total;
}

/// Channel masks keyed by the node (compactor or target conv) they sit on.
using MaskSet = std::map<int, std::vector<std::uint8_t>>;

inline Index mask_ones(const std::vector<std::uint8_t>& mask) {
  Index ones = 0;
  for (auto b : mask) ones += b != 0;
  return ones;
}

namespace detail {

/// Surviving output width of a target conv: an override mask wins, then the
/// attached mask (compactor's if present, else the node's own), then full
/// width.
template <typename Scalar>
Index effective_width(const ModelGraph<Scalar>& m, int node, const MaskSet* overrides) {
  const auto& n = m.nodes[node];
  const int comp = m.compactor_of(node);
  const std::vector<std::uint8_t>* mask = nullptr;
  if (overrides != nullptr) {
    auto it = comp >= 0 ? overrides->find(comp) : overrides->end();
    if (it == overrides->end()) it = overrides->find(node);
    if (it != overrides->end()) mask = &it->second;
  }
  if (mask == nullptr) mask = comp >= 0 ? &m.nodes[comp].mask : &n.mask;
  if (mask->empty()) return n.conv.out_channels();
  require(Index(mask->size()) == n.conv.out_channels(),
          "node " + std::to_string(node) + " (" + n.name + "): mask length " +
              std::to_string(mask->size()) + " vs width " +
              std::to_string(n.conv.out_channels()));
  return mask_ones(*mask);
}

}  // namespace detail

/// Multiply-adds the model would cost after masked channels are removed:
/// each masked target channel disappears from its own conv's output and
/// from its successor's input. Exact integer arithmetic, so this equals
/// model_flops of the converted model. Masks in `overrides` take precedence
/// over masks attached to the graph.
template <typename Scalar>
std::uint64_t deduced_flops(const ModelGraph<Scalar>& m, const MaskSet* overrides) {
  const auto shapes = infer_shapes(m);
  std::vector<Index> out_width(m.nodes.size());
  std::vector<Index> in_width(m.nodes.size());
  for (std::size_t i = 0; i < m.nodes.size(); ++i) {
    if (m.nodes[i].kind != NodeKind::Conv) continue;
    out_width[i] = m.nodes[i].conv.out_channels();
    in_width[i] = m.nodes[i].conv.in_channels();
  }
  for (int t : m.target_nodes()) {
    const Index kept = detail::effective_width(m, t, overrides);
    out_width[t] = kept;
    const int succ = m.nodes[t].successor;
    require(succ >= 0, "target node " + std::to_string(t) + " has no successor");
    in_width[succ] = kept;
  }
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < m.nodes.size(); ++i) {
    const auto& n = m.nodes[i];
    if (n.kind != NodeKind::Conv) continue;
    if (n.compactor && m.kind == ModelKind::Reparam) continue;
    total += layer_flops(out_width[i], in_width[i], n.conv.ksize(), shapes[i].h, shapes[i].w);
  }
  return total;
}

template <typename Scalar>
std::uint64_t deduced_flops(const ModelGraph<Scalar>& m) {
  return deduced_flops(m, nullptr);
}

template <typename Scalar>
std::uint64_t deduced_flops(const ModelGraph<Scalar>& m, const MaskSet& masks) {
  return deduced_flops(m, &masks);
}

}  // namespace resrep
