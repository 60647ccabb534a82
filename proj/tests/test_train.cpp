#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "resrep/models.hpp"
#include "resrep/train.hpp"
#include "test_util.hpp"

using resrep::Index;
using resrep::ModelGraph;
using resrep::ResRepConfig;
using resrep::TrainOptions;
using resrep::VectorX;

namespace {

template <typename Scalar>
bool same_bits(ModelGraph<Scalar>& a, ModelGraph<Scalar>& b, bool compactors_too = true) {
  auto pa = resrep::parameters(a);
  auto pb = resrep::parameters(b);
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].size != pb[i].size || pa[i].name != pb[i].name) return false;
    if (!compactors_too && pa[i].role == resrep::ParamRole::CompactorKernel) continue;
    if (std::memcmp(pa[i].value, pb[i].value, sizeof(Scalar) * std::size_t(pa[i].size)) != 0)
      return false;
  }
  return true;
}

resrep::Dataset<float> easy_task(Index n = 128, std::uint32_t seed = 101) {
  resrep::SyntheticOptions opt;
  opt.noise = 0.15;
  return resrep::make_synthetic<float>(2, n, seed, opt);
}

}  // namespace

TEST_CASE("supervised training") {
  SUBCASE("fits a separable synthetic task") {
    auto model = resrep::build_miniconv<float>({6, 6}, {3, 16, 16, 2, 31});
    auto data = easy_task();
    TrainOptions opt;
    opt.epochs = 15;
    opt.batch_size = 32;
    opt.initial_lr = 0.05;
    opt.seed = 7;
    auto log = resrep::train_supervised(model, data, opt);
    REQUIRE(log.epoch_loss.size() == 15);
    CHECK(log.epoch_loss.back() < log.epoch_loss.front());
    CHECK(resrep::evaluate(model, data.images, data.labels) > 0.9);
  }

  SUBCASE("bit-reproducible per seed, sensitive to it") {
    auto data = easy_task(64);
    TrainOptions opt;
    opt.epochs = 3;
    opt.batch_size = 16;
    opt.seed = 9;
    auto a = resrep::build_miniconv<float>({4, 4}, {3, 16, 16, 2, 1});
    auto b = resrep::build_miniconv<float>({4, 4}, {3, 16, 16, 2, 1});
    auto c = resrep::build_miniconv<float>({4, 4}, {3, 16, 16, 2, 1});
    resrep::train_supervised(a, data, opt);
    resrep::train_supervised(b, data, opt);
    opt.seed = 10;
    resrep::train_supervised(c, data, opt);
    CHECK(same_bits(a, b));
    CHECK_FALSE(same_bits(a, c));
  }

  SUBCASE("a resumed run matches an uninterrupted one exactly") {
    auto data = easy_task(64);
    TrainOptions opt;
    opt.epochs = 6;
    opt.batch_size = 16;
    opt.initial_lr = 0.02;
    opt.seed = 3;
    auto straight = resrep::build_miniconv<float>({4, 4}, {3, 16, 16, 2, 2});
    auto split = straight;
    resrep::train_supervised(straight, data, opt);

    resrep::TrainState<float> state;
    TrainOptions half = opt;
    half.run_epochs = 3;
    resrep::train_supervised(split, data, half, &state);
    CHECK(state.next_epoch == 3);
    CHECK(state.iteration == 12);
    resrep::train_supervised(split, data, opt, &state);
    CHECK(state.next_epoch == 6);
    CHECK(same_bits(straight, split));
  }

  SUBCASE("augmentation is deterministic and changes the trajectory") {
    auto data = resrep::make_synthetic<float>(2, 32, 5, {3, 32, 32, 0.2});
    TrainOptions opt;
    opt.epochs = 2;
    opt.batch_size = 16;
    opt.augment = true;
    auto a = resrep::build_miniconv<float>({4, 4}, {3, 32, 32, 2, 6});
    auto b = a;
    auto c = a;
    resrep::train_supervised(a, data, opt);
    resrep::train_supervised(b, data, opt);
    opt.augment = false;
    resrep::train_supervised(c, data, opt);
    CHECK(same_bits(a, b));
    CHECK_FALSE(same_bits(a, c));
  }

  SUBCASE("contract violations") {
    auto model = resrep::build_miniconv<float>({4, 4});
    resrep::Dataset<float> empty;
    empty.images = resrep::Tensor4<float>(0, 3, 16, 16);
    TrainOptions opt;
    CHECK_THROWS_AS(resrep::train_supervised(model, empty, opt), resrep::ContractViolation);
    resrep::TrainState<float> late;
    late.next_epoch = 99;
    auto data = easy_task(32);
    CHECK_THROWS_AS(resrep::train_supervised(model, data, opt, &late),
                    resrep::ContractViolation);
  }
}

TEST_CASE("penalty-only baseline") {
  auto data = easy_task(64);
  TrainOptions opt;
  opt.epochs = 4;
  opt.batch_size = 16;
  opt.seed = 11;

  SUBCASE("zero strength is exactly plain SGD") {
    auto plain = resrep::build_miniconv<float>({4, 4}, {3, 16, 16, 2, 3});
    auto lasso = plain;
    resrep::train_supervised(plain, data, opt);
    resrep::train_group_lasso_baseline(lasso, data, 0.0, opt);
    CHECK(same_bits(plain, lasso));
  }

  SUBCASE("positive strength shrinks target-kernel norms") {
    auto plain = resrep::build_miniconv<float>({4, 4}, {3, 16, 16, 2, 3});
    auto lasso = plain;
    resrep::train_supervised(plain, data, opt);
    resrep::train_group_lasso_baseline(lasso, data, 0.05, opt);
    const int t = plain.target_nodes()[0];
    const double plain_norm = resrep::row_norms(plain.nodes[t].conv.kernel).sum();
    const double lasso_norm = resrep::row_norms(lasso.nodes[t].conv.kernel).sum();
    CHECK(lasso_norm < plain_norm);
  }

  SUBCASE("rejects negative strength and re-parameterized models") {
    auto model = resrep::build_miniconv<float>({4, 4});
    CHECK_THROWS_AS(resrep::train_group_lasso_baseline(model, data, -0.1, opt),
                    resrep::ContractViolation);
    auto re = resrep::insert_compactors(model);
    CHECK_THROWS_AS(resrep::train_group_lasso_baseline(re, data, 0.1, opt),
                    resrep::ContractViolation);
  }
}

TEST_CASE("masked-row decay under momentum-free updates") {
  // One compactor row with the objective fully masked: the only gradient is
  // the unit-direction penalty, so the norm drops by exactly lr*lambda each
  // step and the direction never moves.
  resrep::ConvLayer<double> comp;
  comp.kernel = resrep::Tensor4<double>(1, 4, 1, 1);
  comp.kernel.raw() << 0.3, 0.0, 0.4, 0.0;  // norm 0.5
  comp.init_grad_buffers();
  const VectorX<double> direction = comp.kernel.raw() / 0.5;

  resrep::ParamGroup<double> group;
  group.momentum = 0.0;
  group.weight_decay = 0.0;
  group.params.push_back({"q.kernel", resrep::ParamRole::CompactorKernel,
                          comp.kernel.data(), comp.grad_kernel.data(), comp.kernel.size(), 0});
  std::vector<resrep::ParamGroup<double>> groups{group};
  resrep::SgdState<double> state;

  const double lr = 0.01, lambda = 1e-4;
  std::mt19937 rng(12);
  double prev = 0.5;
  for (int step = 0; step < 100; ++step) {
    comp.grad_kernel.raw() = testutil::random_tensor<double>({1, 4, 1, 1}, rng).raw();
    resrep::reset_gradients(comp.grad_kernel, comp.kernel, {0}, lambda);
    resrep::sgd_step(groups, state, lr);
    const double norm = comp.kernel.raw().norm();
    CHECK(norm < prev);
    prev = norm;
  }
  CHECK(prev == doctest::Approx(0.5 - 100 * lr * lambda).epsilon(1e-10));
  CHECK((comp.kernel.raw() / prev - direction).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("forgetting loop") {
  auto base = resrep::build_miniconv<float>({4, 6}, {3, 16, 16, 2, 41});
  auto data = easy_task(64, 102);
  ResRepConfig cfg;
  cfg.total_epochs = 5;
  cfg.batch_size = 16;  // 4 iterations per epoch
  cfg.initial_lr = 0.02;
  cfg.warmup_epochs = 2;
  cfg.selection_interval = 3;
  cfg.theta_init = 1;
  cfg.theta_step = 2;
  cfg.seed = 21;

  SUBCASE("selection schedule: warmup offset, interval, growing cap") {
    cfg.flops_target = 0.9;  // unreachable on purpose
    auto out = resrep::train_resrep(base, data, cfg);
    REQUIRE(out.events.size() == 4);
    const Index expect_iter[] = {8, 11, 14, 17};
    const Index expect_theta[] = {1, 3, 5, 7};
    for (int i = 0; i < 4; ++i) {
      CHECK(out.events[std::size_t(i)].iteration == expect_iter[i]);
      CHECK(out.events[std::size_t(i)].theta == expect_theta[i]);
      CHECK_FALSE(out.events[std::size_t(i)].target_reached);
    }
    CHECK_FALSE(out.target_reached);
    CHECK(out.model.kind == resrep::ModelKind::Reparam);
    // Maximal legal masking: one survivor on the lone 4-wide compactor.
    const int comp = out.model.compactor_nodes()[0];
    CHECK(resrep::mask_ones(out.model.nodes[comp].mask) == 1);
  }

  SUBCASE("masks freeze once the target is met") {
    cfg.flops_target = 0.2;  // one channel suffices
    auto out = resrep::train_resrep(base, data, cfg);
    REQUIRE(out.events.size() == 1);
    CHECK(out.events[0].iteration == 8);
    CHECK(out.events[0].target_reached);
    CHECK(out.target_reached);
    const int comp = out.model.compactor_nodes()[0];
    CHECK(resrep::mask_ones(out.model.nodes[comp].mask) == 3);
    CHECK(out.events[0].deduced_flops == resrep::deduced_flops(out.model));
  }

  SUBCASE("zero target never masks anything") {
    cfg.flops_target = 0.0;
    auto out = resrep::train_resrep(base, data, cfg);
    REQUIRE(out.events.size() == 1);
    CHECK(out.events[0].target_reached);
    const int comp = out.model.compactor_nodes()[0];
    CHECK(resrep::mask_ones(out.model.nodes[comp].mask) == 4);
  }

  SUBCASE("one step touches compactor parameters only through the penalty") {
    ResRepConfig one;
    one.total_epochs = 1;
    one.batch_size = 64;  // single iteration
    one.warmup_epochs = 5;
    one.seed = 77;
    auto re = resrep::insert_compactors(base);
    auto out = resrep::train_resrep(base, data, one);

    TrainOptions opt;
    opt.epochs = 1;
    opt.batch_size = 64;
    opt.initial_lr = one.initial_lr;
    opt.seed = 77;
    resrep::train_supervised(re, data, opt);

    CHECK(same_bits(out.model, re, false));   // everything but compactors
    CHECK_FALSE(same_bits(out.model, re));    // compactors felt the penalty
  }

  SUBCASE("a resumed forgetting run matches an uninterrupted one") {
    cfg.flops_target = 0.3;
    auto straight = resrep::train_resrep(base, data, cfg);

    resrep::TrainState<float> state;
    ResRepConfig head = cfg;
    head.run_epochs = 3;
    auto part = resrep::train_resrep(base, data, head, &state);
    auto tail = resrep::train_resrep(part.model, data, cfg, &state);
    CHECK(same_bits(straight.model, tail.model));
    CHECK(straight.events.size() == part.events.size() + tail.events.size());
  }

  SUBCASE("converted models are rejected") {
    ResRepConfig one;
    one.total_epochs = 1;
    auto re = resrep::insert_compactors(base);
    auto converted = resrep::convert_model(re).model;
    CHECK_THROWS_AS(resrep::train_resrep(converted, data, one), resrep::ContractViolation);
  }
}

TEST_CASE("kernel-level forgetting ablation") {
  auto base = resrep::build_miniconv<double>({4, 6}, {3, 16, 16, 2, 51});
  auto data = resrep::make_synthetic<double>(2, 32, 103);
  ResRepConfig cfg;
  cfg.total_epochs = 2;
  cfg.batch_size = 16;  // 2 iterations per epoch
  cfg.warmup_epochs = 0;
  cfg.selection_interval = 1;
  cfg.theta_init = 1;
  cfg.theta_step = 1;
  cfg.flops_target = 0.3;
  cfg.seed = 5;

  auto out = resrep::train_res_only(base, data, cfg);
  CHECK(out.model.kind == resrep::ModelKind::Base);
  CHECK(out.model.compactor_nodes().empty());
  REQUIRE(out.events.size() == 2);
  CHECK(out.events[1].target_reached);

  const int t = out.model.target_nodes()[0];
  REQUIRE(resrep::mask_ones(out.model.nodes[t].mask) == 2);

  resrep::MaskSet masks;
  masks[t] = out.model.nodes[t].mask;
  auto sliced = resrep::apply_masks_structurally(out.model, masks);
  CHECK(sliced.nodes[t].conv.out_channels() == 2);
  CHECK(resrep::model_flops(sliced) == resrep::deduced_flops(out.model));
  CHECK(resrep::evaluate(sliced, data.images, data.labels) >= 0.0);

  SUBCASE("rejects re-parameterized inputs") {
    auto re = resrep::insert_compactors(
        resrep::build_miniconv<double>({4, 6}, {3, 16, 16, 2, 51}));
    CHECK_THROWS_AS(resrep::train_res_only(re, data, cfg), resrep::ContractViolation);
    CHECK_THROWS_AS(resrep::apply_masks_structurally(re, masks), resrep::ContractViolation);
  }
}
