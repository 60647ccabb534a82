#pragma once

// The forgetting side of training: norm-penalty gradients routed by channel
// masks, channel metrics, budgeted ascending-metric selection, and the
// structural probes used by the ablation study.

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "resrep/flops.hpp"
#include "resrep/graph.hpp"

namespace resrep {

struct ResRepConfig {
  double lambda = 1e-4;          // penalty strength on masked channels
  double epsilon = 1e-5;         // prune threshold at conversion
  Index theta_init = 4;          // selection cap at the first selection
  Index theta_step = 4;          // cap increment per selection round
  Index selection_interval = 200;
  Index warmup_epochs = 5;
  double flops_target = 0.5;     // fraction of multiply-adds to remove
  double compactor_momentum = 0.99;
  Index total_epochs = 180;
  Index run_epochs = 0;  // epochs for this call; 0 runs to total_epochs
  Index batch_size = 64;
  double initial_lr = 0.01;
  std::uint32_t seed = 0;
  bool augment = false;  // crop-flip pipeline, training batches only

  /// flops_target 0 is a valid degenerate setting: nothing is ever masked.
  void validate() const {
    require(lambda > 0, "lambda must be positive");
    require(epsilon > 0, "epsilon must be positive");
    require(theta_init >= 1, "theta_init must be at least 1");
    require(theta_step >= 0, "theta_step must be non-negative");
    require(selection_interval >= 1, "selection_interval must be at least 1");
    require(warmup_epochs >= 0, "warmup_epochs must be non-negative");
    require(flops_target >= 0 && flops_target < 1, "flops_target must lie in [0, 1)");
    require(total_epochs >= 1, "total_epochs must be at least 1");
    require(run_epochs >= 0, "run_epochs must be non-negative");
    require(batch_size >= 1, "batch_size must be at least 1");
    require(initial_lr > 0, "initial_lr must be positive");
  }
};

inline constexpr double kPenaltySingularityGuard = 1e-12;

/// λ·F/‖F‖, or zero inside the singularity guard around F = 0.
template <typename Scalar>
VectorX<Scalar> penalty_gradient(const VectorX<Scalar>& f, Scalar lambda) {
  const Scalar norm = f.norm();
  if (norm < Scalar(kPenaltySingularityGuard)) return VectorX<Scalar>::Zero(f.size());
  return (lambda / norm) * f;
}

/// Route each channel's objective gradient through its mask and add the
/// norm penalty: row j of grad becomes grad_j * m_j + λ·K_j/‖K_j‖.
/// Masked rows (m_j = 0) are driven toward zero regardless of the objective.
template <typename Scalar>
void reset_gradients(Tensor4<Scalar>& grad, const Tensor4<Scalar>& kernel,
                     const std::vector<std::uint8_t>& mask, Scalar lambda) {
  require(grad.dims() == kernel.dims(), "reset_gradients: gradient " + grad.dims().str() +
                                            " vs kernel " + kernel.dims().str());
  require(Index(mask.size()) == kernel.n(),
          "reset_gradients: mask length " + std::to_string(mask.size()) + " vs " +
              std::to_string(kernel.n()) + " channels");
  auto g = grad.rows_view();
  auto k = kernel.rows_view();
  for (Index j = 0; j < kernel.n(); ++j) {
    if (mask[std::size_t(j)] == 0) g.row(j).setZero();
    const Scalar norm = k.row(j).norm();
    if (norm >= Scalar(kPenaltySingularityGuard)) {
      g.row(j) += (lambda / norm) * k.row(j);
    }
  }
}

struct MetricEntry {
  int node = -1;      // compactor (or bare target) conv node
  Index channel = 0;  // output-channel index within that node
  double value = 0;   // Euclidean norm of the channel's kernel rows
};

using MetricMap = std::vector<MetricEntry>;

/// One entry per prunable channel, ordered by (node, channel). Metrics come
/// from compactors when the model has them, else from the target kernels
/// themselves (the resetting-only ablation).
template <typename Scalar>
MetricMap compute_metrics(const ModelGraph<Scalar>& m) {
  MetricMap out;
  auto compactors = m.compactor_nodes();
  const std::vector<int>& sources = compactors.empty() ? m.target_nodes() : compactors;
  for (int i : sources) {
    const VectorX<Scalar> norms = row_norms(m.nodes[i].conv.kernel);
    for (Index j = 0; j < norms.size(); ++j) {
      out.push_back({i, j, double(norms[j])});
    }
  }
  return out;
}

struct SelectionResult {
  MaskSet masks;                 // wholesale replacement masks, all sources
  Index picked = 0;              // channels actually masked this round
  std::uint64_t original = 0;    // multiply-adds with nothing masked
  std::uint64_t deduced = 0;     // multiply-adds after masking
  bool target_reached = false;
};

/// Pick channels to forget, smallest metric first (ties by node then
/// channel), until the FLOPs-removal target is met or θ picks are made.
/// A compactor's last surviving channel is never picked; if the target is
/// unreachable under that guard, the maximal legal mask is returned with
/// target_reached still false.
template <typename Scalar>
SelectionResult select_channels(const MetricMap& metrics, const ModelGraph<Scalar>& m,
                                double flops_target, Index theta) {
  require(theta >= 0, "selection cap must be non-negative");
  require(flops_target >= 0 && flops_target < 1, "flops_target must lie in [0, 1)");
  SelectionResult out;
  std::map<int, Index> unmasked;
  {
    const auto compactors = m.compactor_nodes();
    for (int i : compactors.empty() ? m.target_nodes() : compactors) {
      const Index width = m.nodes[i].conv.out_channels();
      out.masks[i].assign(std::size_t(width), 1);
      unmasked[i] = width;
    }
  }
  for (const auto& e : metrics) {
    auto it = out.masks.find(e.node);
    require(it != out.masks.end(), "metric references node " + std::to_string(e.node) +
                                       " which carries no prunable channels");
    require(e.channel >= 0 && e.channel < Index(it->second.size()),
            "metric channel " + std::to_string(e.channel) + " out of range for node " +
                std::to_string(e.node));
  }

  MetricMap order = metrics;
  std::sort(order.begin(), order.end(), [](const MetricEntry& a, const MetricEntry& b) {
    if (a.value != b.value) return a.value < b.value;
    if (a.node != b.node) return a.node < b.node;
    return a.channel < b.channel;
  });

  out.original = model_flops(m);
  out.deduced = deduced_flops(m, out.masks);
  auto reached = [&] {
    return double(out.original - out.deduced) >= flops_target * double(out.original);
  };
  out.target_reached = reached();

  for (const auto& e : order) {
    if (out.target_reached || out.picked >= theta) break;
    if (unmasked[e.node] <= 1) continue;  // never forget a whole layer
    out.masks[e.node][std::size_t(e.channel)] = 0;
    --unmasked[e.node];
    ++out.picked;
    out.deduced = deduced_flops(m, out.masks);
    out.target_reached = reached();
  }
  return out;
}

/// Quadratic parameter sums split by mask: (surviving, to-be-forgotten).
/// Sums run over the mask-bearing kernels (compactors, or bare target
/// kernels for the ablation baselines).
template <typename Scalar>
std::pair<double, double> sparsity_trace(const ModelGraph<Scalar>& m, const MaskSet& masks) {
  double survive = 0, forget = 0;
  auto compactors = m.compactor_nodes();
  const std::vector<int>& sources = compactors.empty() ? m.target_nodes() : compactors;
  for (int i : sources) {
    auto rows = m.nodes[i].conv.kernel.rows_view();
    auto it = masks.find(i);
    for (Index j = 0; j < rows.rows(); ++j) {
      const double q = double(rows.row(j).squaredNorm());
      const bool kept = it == masks.end() || it->second[std::size_t(j)] != 0;
      (kept ? survive : forget) += q;
    }
  }
  return {survive, forget};
}

/// Attached-mask convenience: read the masks already on the graph.
template <typename Scalar>
std::pair<double, double> sparsity_trace(const ModelGraph<Scalar>& m) {
  MaskSet masks;
  for (int i = 0; i < int(m.nodes.size()); ++i) {
    if (!m.nodes[i].mask.empty()) masks[i] = m.nodes[i].mask;
  }
  return sparsity_trace(m, masks);
}

/// Structurally remove one output channel of a plain target conv: its
/// kernel row, the BN entry tracking it, and the successor's matching
/// input column all disappear.
template <typename Scalar>
void remove_plain_channel(ModelGraph<Scalar>& m, int t, Index ch) {
  require(m.kind != ModelKind::Reparam, "structural removal expects a plain model");
  auto& target = m.nodes[t];
  require(target.kind == NodeKind::Conv && target.target,
          "node " + std::to_string(t) + " is not a target conv");
  const Index width = target.conv.out_channels();
  require(width > 1, "node " + std::to_string(t) + " (" + target.name +
                         ") is down to its last channel");
  require(ch >= 0 && ch < width, "channel out of range");

  auto drop_entry = [ch](VectorX<Scalar>& v) {
    VectorX<Scalar> out(v.size() - 1);
    out.head(ch) = v.head(ch);
    out.tail(v.size() - 1 - ch) = v.tail(v.size() - 1 - ch);
    v = std::move(out);
  };

  Tensor4<Scalar> kernel(width - 1, target.conv.in_channels(), target.conv.ksize(),
                         target.conv.ksize());
  Index r = 0;
  for (Index j = 0; j < width; ++j) {
    if (j == ch) continue;
    kernel.rows_view().row(r++) = target.conv.kernel.rows_view().row(j);
  }
  target.conv.kernel = std::move(kernel);

  for (auto& n : m.nodes) {
    if (n.kind == NodeKind::BatchNorm && n.input == t) {
      drop_entry(n.bn.gamma);
      drop_entry(n.bn.beta);
      drop_entry(n.bn.running_mean);
      drop_entry(n.bn.running_var);
    }
  }

  auto& succ = m.nodes[target.successor].conv;
  Tensor4<Scalar> sliced(succ.out_channels(), succ.in_channels() - 1, succ.ksize(),
                         succ.ksize());
  for (Index o = 0; o < succ.out_channels(); ++o) {
    Index c = 0;
    for (Index j = 0; j < succ.in_channels(); ++j) {
      if (j == ch) continue;
      for (Index p = 0; p < succ.ksize(); ++p) {
        for (Index q = 0; q < succ.ksize(); ++q) {
          sliced.at(o, c, p, q) = succ.kernel.at(o, j, p, q);
        }
      }
      ++c;
    }
  }
  succ.kernel = std::move(sliced);
  m.init_grad_buffers();
}

template <typename Scalar>
struct MinimalStructureResult {
  std::vector<std::pair<std::string, Index>> widths;  // per target layer
  double baseline_accuracy = 0;
  ModelGraph<Scalar> model;
};

/// Greedy smallest-norm channel removal, `granularity` channels per
/// evaluation, stopping before the first batch of removals that drags
/// accuracy below the unpruned model's.
template <typename Scalar>
MinimalStructureResult<Scalar> minimal_structure(const ModelGraph<Scalar>& model,
                                                 const Tensor4<Scalar>& images,
                                                 const std::vector<int>& labels,
                                                 Index granularity = 1) {
  require(granularity >= 1, "granularity must be at least 1");
  MinimalStructureResult<Scalar> out;
  out.model = model;
  out.baseline_accuracy = evaluate(out.model, images, labels);

  for (;;) {
    ModelGraph<Scalar> candidate = out.model;
    Index removed = 0;
    for (Index step = 0; step < granularity; ++step) {
      const MetricMap metrics = compute_metrics(candidate);
      const MetricEntry* best = nullptr;
      for (const auto& e : metrics) {
        if (candidate.nodes[e.node].conv.out_channels() <= 1) continue;
        if (best == nullptr || e.value < best->value) best = &e;
      }
      if (best == nullptr) break;
      remove_plain_channel(candidate, best->node, best->channel);
      ++removed;
    }
    if (removed == 0) break;
    if (evaluate(candidate, images, labels) < out.baseline_accuracy) break;
    out.model = std::move(candidate);
  }

  for (int t : out.model.target_nodes()) {
    out.widths.emplace_back(out.model.nodes[t].name, out.model.nodes[t].conv.out_channels());
  }
  return out;
}

}  // namespace resrep
