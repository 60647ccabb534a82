#pragma once

// Training loops: plain supervised SGD, the forgetting loop with scheduled
// channel selection, and the penalty-only ablation trainers. All loops share
// one epoch/batch skeleton with deterministic per-(epoch, batch) rng streams,
// so a run can be split across resumes without changing a single update.

#include <algorithm>
#include <cstdint>
#include <utility>
#include <vector>

#include "resrep/data.hpp"
#include "resrep/graph.hpp"
#include "resrep/optim.hpp"
#include "resrep/reparam.hpp"
#include "resrep/resrep.hpp"

namespace resrep {

struct TrainOptions {
  Index epochs = 10;      // schedule length; the lr decay always spans this
  Index run_epochs = 0;   // epochs to run in this call; 0 means to the end
  Index batch_size = 64;
  double initial_lr = 0.01;
  std::uint32_t seed = 0;
  bool augment = false;
  double compactor_momentum = 0.99;
};

struct TrainLog {
  std::vector<double> epoch_loss;  // mean objective per epoch
};

/// One channel-selection round, as logged for the CLI.
struct SelectionEvent {
  Index iteration = 0;
  Index theta = 0;
  std::uint64_t deduced_flops = 0;
  bool target_reached = false;
  MaskSet masks;
};

/// Everything a resumed run needs besides the model itself.
template <typename Scalar>
struct TrainState {
  SgdState<Scalar> sgd;
  Index next_epoch = 0;
  Index iteration = 0;       // completed iterations, across all epochs
  bool masks_frozen = false;
};

namespace detail {

inline Index iterations_per_epoch(Index n, Index batch_size) {
  return (n + batch_size - 1) / batch_size;
}

/// Common epoch/batch skeleton. `at_start` runs before each iteration's
/// forward pass (channel selection hooks in here); `after_backward` runs
/// between the backward pass and the optimizer step (gradient doctoring).
template <typename Scalar, typename AtStart, typename AfterBackward>
TrainLog train_loop(ModelGraph<Scalar>& model, const Dataset<Scalar>& data,
                    const TrainOptions& opt, TrainState<Scalar>& state, AtStart&& at_start,
                    AfterBackward&& after_backward) {
  require(opt.epochs >= 1, "epoch count must be positive");
  require(opt.batch_size >= 1, "batch size must be positive");
  require(opt.initial_lr > 0, "learning rate must be positive");
  require(data.size() >= 1, "cannot train on an empty dataset");
  require(state.next_epoch >= 0 && state.next_epoch <= opt.epochs,
          "resume epoch outside the schedule");
  require(opt.run_epochs >= 0, "run_epochs must be non-negative");
  const Index stop =
      opt.run_epochs > 0 ? std::min(opt.epochs, state.next_epoch + opt.run_epochs) : opt.epochs;

  auto groups = default_param_groups(model, Scalar(opt.compactor_momentum));
  const Index n = data.size();
  TrainLog log;
  for (Index epoch = state.next_epoch; epoch < stop; ++epoch) {
    const Scalar lr = cosine_lr(Scalar(opt.initial_lr), epoch, opt.epochs);
    const auto order =
        shuffled_indices(n, derive_seed(opt.seed, std::uint64_t(epoch), ~std::uint64_t(0)));
    double loss_sum = 0;
    for (Index begin = 0, b = 0; begin < n; begin += opt.batch_size, ++b) {
      const Index count = std::min(opt.batch_size, n - begin);
      at_start(state);
      auto [images, labels] = take_batch(data, order, begin, count);
      if (opt.augment) {
        std::mt19937 rng(std::uint32_t(
            derive_seed(opt.seed, std::uint64_t(epoch), std::uint64_t(b))));
        images = augment(images, rng);
      }
      const auto acts = forward(model, images, Mode::Train);
      const auto out = backward(model, images, acts, labels);
      after_backward(state);
      sgd_step(groups, state.sgd, lr);
      loss_sum += double(out.loss) * double(count);
      ++state.iteration;
    }
    log.epoch_loss.push_back(loss_sum / double(n));
    state.next_epoch = epoch + 1;
  }
  return log;
}

}  // namespace detail

/// Plain SGD classification training, in place.
template <typename Scalar>
TrainLog train_supervised(ModelGraph<Scalar>& model, const Dataset<Scalar>& data,
                          const TrainOptions& opt, TrainState<Scalar>* resume = nullptr) {
  TrainState<Scalar> local;
  auto noop = [](TrainState<Scalar>&) {};
  return detail::train_loop(model, data, opt, resume ? *resume : local, noop, noop);
}

template <typename Scalar>
struct ResRepOutcome {
  ModelGraph<Scalar> model;
  TrainLog log;
  std::vector<SelectionEvent> events;
  bool target_reached = false;
};

namespace detail {

inline TrainOptions to_train_options(const ResRepConfig& cfg) {
  TrainOptions opt;
  opt.epochs = cfg.total_epochs;
  opt.run_epochs = cfg.run_epochs;
  opt.batch_size = cfg.batch_size;
  opt.initial_lr = cfg.initial_lr;
  opt.seed = cfg.seed;
  opt.augment = cfg.augment;
  opt.compactor_momentum = cfg.compactor_momentum;
  return opt;
}

/// Channel-selection hook shared by the compactor loop and the kernel-level
/// ablation. Runs after warmup, then every selection_interval iterations with
/// the cap raised by theta_step each round; freezes masks once the deduced
/// FLOPs reduction first meets the target.
template <typename Scalar>
auto make_selection_hook(ModelGraph<Scalar>& model, const ResRepConfig& cfg,
                         Index iters_per_epoch, std::vector<SelectionEvent>& events) {
  const Index first = cfg.warmup_epochs * iters_per_epoch;
  return [&model, &cfg, &events, first](TrainState<Scalar>& s) {
    if (s.masks_frozen || s.iteration < first) return;
    const Index since = s.iteration - first;
    if (since % cfg.selection_interval != 0) return;
    const Index theta = cfg.theta_init + cfg.theta_step * (since / cfg.selection_interval);
    auto sel = select_channels(compute_metrics(model), model, cfg.flops_target, theta);
    for (const auto& [node, mask] : sel.masks) model.nodes[std::size_t(node)].mask = mask;
    events.push_back({s.iteration, theta, sel.deduced, sel.target_reached, sel.masks});
    if (sel.target_reached) s.masks_frozen = true;
  };
}

}  // namespace detail

/// The full forgetting loop: compactors are inserted (unless resuming an
/// already re-parameterized model), every iteration reroutes their gradients
/// through the masks, and selection rounds re-pick the masked set from
/// scratch until the FLOPs target is met. If the target is unreachable under
/// the one-survivor guard, training still completes and the outcome reports
/// target_reached = false.
template <typename Scalar>
ResRepOutcome<Scalar> train_resrep(const ModelGraph<Scalar>& input, const Dataset<Scalar>& data,
                                   const ResRepConfig& cfg,
                                   TrainState<Scalar>* resume = nullptr) {
  cfg.validate();
  require(input.kind != ModelKind::Converted, "converted models have nothing left to prune");
  ResRepOutcome<Scalar> out;
  out.model = input.kind == ModelKind::Base ? insert_compactors(input) : input;

  TrainState<Scalar> local;
  TrainState<Scalar>& st = resume ? *resume : local;
  const Index per_epoch = detail::iterations_per_epoch(data.size(), cfg.batch_size);
  auto at_start = detail::make_selection_hook(out.model, cfg, per_epoch, out.events);
  auto after_backward = [&](TrainState<Scalar>&) {
    for (int i : out.model.compactor_nodes()) {
      auto& nd = out.model.nodes[std::size_t(i)];
      reset_gradients(nd.conv.grad_kernel, nd.conv.kernel, nd.mask, Scalar(cfg.lambda));
    }
  };
  out.log = detail::train_loop(out.model, data, detail::to_train_options(cfg), st, at_start,
                               after_backward);
  out.target_reached = st.masks_frozen;
  return out;
}

/// Ablation: the same mask-and-penalty update applied to the target kernels
/// themselves, with no compactors in the graph.
template <typename Scalar>
ResRepOutcome<Scalar> train_res_only(const ModelGraph<Scalar>& input, const Dataset<Scalar>& data,
                                     const ResRepConfig& cfg,
                                     TrainState<Scalar>* resume = nullptr) {
  cfg.validate();
  require(input.kind == ModelKind::Base, "kernel-level forgetting trains a plain model");
  require(!input.target_nodes().empty(), "model declares no target layers");
  ResRepOutcome<Scalar> out;
  out.model = input;
  for (int t : out.model.target_nodes()) {
    auto& nd = out.model.nodes[std::size_t(t)];
    if (nd.mask.empty()) nd.mask.assign(std::size_t(nd.conv.out_channels()), 1);
  }

  TrainState<Scalar> local;
  TrainState<Scalar>& st = resume ? *resume : local;
  const Index per_epoch = detail::iterations_per_epoch(data.size(), cfg.batch_size);
  auto at_start = detail::make_selection_hook(out.model, cfg, per_epoch, out.events);
  auto after_backward = [&](TrainState<Scalar>&) {
    for (int t : out.model.target_nodes()) {
      auto& nd = out.model.nodes[std::size_t(t)];
      reset_gradients(nd.conv.grad_kernel, nd.conv.kernel, nd.mask, Scalar(cfg.lambda));
    }
  };
  out.log = detail::train_loop(out.model, data, detail::to_train_options(cfg), st, at_start,
                               after_backward);
  out.target_reached = st.masks_frozen;
  return out;
}

/// Ablation: the compactor penalty alone. No masks and no selection rounds,
/// so how many rows shrink toward zero is governed entirely by the penalty
/// strength.
template <typename Scalar>
ResRepOutcome<Scalar> train_rep_only(const ModelGraph<Scalar>& input, const Dataset<Scalar>& data,
                                     double lambda, const TrainOptions& opt,
                                     TrainState<Scalar>* resume = nullptr) {
  require(lambda >= 0, "penalty strength must be non-negative");
  require(input.kind != ModelKind::Converted, "converted models have nothing left to prune");
  ResRepOutcome<Scalar> out;
  out.model = input.kind == ModelKind::Base ? insert_compactors(input) : input;
  TrainState<Scalar> local;
  TrainState<Scalar>& st = resume ? *resume : local;
  auto noop = [](TrainState<Scalar>&) {};
  auto after_backward = [&](TrainState<Scalar>&) {
    if (lambda == 0) return;
    for (int i : out.model.compactor_nodes()) {
      auto& nd = out.model.nodes[std::size_t(i)];
      const std::vector<std::uint8_t> ones(std::size_t(nd.conv.out_channels()), 1);
      reset_gradients(nd.conv.grad_kernel, nd.conv.kernel, ones, Scalar(lambda));
    }
  };
  out.log = detail::train_loop(out.model, data, opt, st, noop, after_backward);
  return out;
}

/// Ablation baseline: an unmasked norm penalty on every target-kernel
/// channel. With strength 0 this is exactly plain SGD.
template <typename Scalar>
TrainLog train_group_lasso_baseline(ModelGraph<Scalar>& model, const Dataset<Scalar>& data,
                                    double lambda, const TrainOptions& opt,
                                    TrainState<Scalar>* resume = nullptr) {
  require(lambda >= 0, "penalty strength must be non-negative");
  require(model.kind == ModelKind::Base, "the penalty baseline trains a plain model");
  TrainState<Scalar> local;
  auto noop = [](TrainState<Scalar>&) {};
  auto after_backward = [&](TrainState<Scalar>&) {
    if (lambda == 0) return;
    for (int t : model.target_nodes()) {
      auto& nd = model.nodes[std::size_t(t)];
      const std::vector<std::uint8_t> ones(std::size_t(nd.conv.out_channels()), 1);
      reset_gradients(nd.conv.grad_kernel, nd.conv.kernel, ones, Scalar(lambda));
    }
  };
  return detail::train_loop(model, data, opt, resume ? *resume : local, noop, after_backward);
}

/// Physically remove every mask-0 channel of a plain model. Used to price
/// the ablation baselines at a matched budget; re-parameterized models go
/// through conversion instead.
template <typename Scalar>
ModelGraph<Scalar> apply_masks_structurally(const ModelGraph<Scalar>& model,
                                            const MaskSet& masks) {
  require(model.kind != ModelKind::Reparam,
          "re-parameterized models are converted, not sliced");
  ModelGraph<Scalar> out = model;
  for (const auto& [node, mask] : masks) {
    require(node >= 0 && node < int(out.nodes.size()), "mask references a missing node");
    for (Index ch = Index(mask.size()); ch-- > 0;) {
      if (!mask[std::size_t(ch)]) remove_plain_channel(out, node, ch);
    }
  }
  return out;
}

}  // namespace resrep
