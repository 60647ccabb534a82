#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "resrep/models.hpp"
#include "resrep/reparam.hpp"
#include "resrep/resrep.hpp"
#include "test_util.hpp"

using resrep::Index;
using resrep::MaskSet;
using resrep::MetricEntry;
using resrep::MetricMap;
using resrep::ModelGraph;
using resrep::NodeKind;
using resrep::Tensor4;
using resrep::VectorX;

namespace {

// conv1 is the lone prunable layer; both convs keep full 32x32 resolution,
// matching the widths used in the deduction hand case.
ModelGraph<float> wide_probe() {
  resrep::GraphBuilder<float> b(3, 32, 32, 10, 1);
  int c1 = b.conv(-1, 16, 3, 1, 1, false, "c1");
  int r1 = b.relu(b.bn(c1, "bn1"));
  int c2 = b.conv(r1, 16, 3, 1, 1, false, "c2");
  int r2 = b.relu(b.bn(c2, "bn2"));
  b.conv(b.gap(r2), 10, 1, 1, 0, true, "classifier");
  b.mark_target(c1, c2);
  return b.finish("wide-probe");
}

void set_row_norm(Tensor4<float>& kernel, Index row, float norm) {
  kernel.rows_view().row(row).setZero();
  kernel.rows_view()(row, 0) = norm;
}

}  // namespace

TEST_CASE("penalty gradient") {
  SUBCASE("zero input is guarded to zero") {
    VectorX<double> f = VectorX<double>::Zero(5);
    CHECK(resrep::penalty_gradient(f, 1e-4).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("hand case (3,4) at strength 1e-4") {
    VectorX<double> f(2);
    f << 3.0, 4.0;
    auto g = resrep::penalty_gradient(f, 1e-4);
    CHECK(g[0] == doctest::Approx(6e-5).epsilon(1e-12));
    CHECK(g[1] == doctest::Approx(8e-5).epsilon(1e-12));
  }
  SUBCASE("magnitude is always the strength") {
    std::mt19937 rng(2);
    for (int i = 0; i < 20; ++i) {
      auto f = testutil::random_vector<double>(7, rng);
      CHECK(resrep::penalty_gradient(f, 1e-4).norm() == doctest::Approx(1e-4).epsilon(1e-9));
    }
  }
  SUBCASE("points along the parameter direction") {
    VectorX<double> f(3);
    f << 1.0, -2.0, 2.0;  // norm 3
    auto g = resrep::penalty_gradient(f, 0.3);
    CHECK((g - 0.1 * f).cwiseAbs().maxCoeff() <= 1e-15);
  }
}

TEST_CASE("gradient resetting") {
  std::mt19937 rng(3);
  auto kernel = testutil::random_tensor<double>({4, 3, 1, 1}, rng);
  auto objective = testutil::random_tensor<double>({4, 3, 1, 1}, rng);

  SUBCASE("all-ones mask with zero strength changes nothing") {
    auto grad = objective;
    resrep::reset_gradients(grad, kernel, {1, 1, 1, 1}, 0.0);
    CHECK((grad.raw() - objective.raw()).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("a masked row ignores the objective entirely") {
    auto grad = objective;
    resrep::reset_gradients(grad, kernel, {1, 0, 1, 1}, 1e-4);
    const auto expected =
        resrep::penalty_gradient(VectorX<double>(kernel.rows_view().row(1)), 1e-4);
    CHECK((grad.rows_view().row(1).transpose() - expected).cwiseAbs().maxCoeff() <= 1e-18);
  }
  SUBCASE("mixed mask matches the rowwise oracle") {
    auto grad = objective;
    const std::vector<std::uint8_t> mask{0, 1, 0, 1};
    resrep::reset_gradients(grad, kernel, mask, 1e-4);
    for (Index j = 0; j < 4; ++j) {
      VectorX<double> row = kernel.rows_view().row(j);
      VectorX<double> expected = resrep::penalty_gradient(row, 1e-4);
      if (mask[std::size_t(j)]) expected += VectorX<double>(objective.rows_view().row(j));
      CHECK((grad.rows_view().row(j).transpose() - expected).cwiseAbs().maxCoeff() <= 1e-18);
    }
  }
  SUBCASE("shape and mask-length contracts") {
    auto grad = objective;
    CHECK_THROWS_AS(resrep::reset_gradients(grad, kernel, {1, 1}, 1e-4),
                    resrep::ContractViolation);
    auto small = testutil::random_tensor<double>({2, 3, 1, 1}, rng);
    CHECK_THROWS_AS(resrep::reset_gradients(small, kernel, {1, 1, 1, 1}, 1e-4),
                    resrep::ContractViolation);
  }
}

TEST_CASE("channel metrics") {
  auto base = resrep::build_miniconv<float>({4, 6, 5}, {3, 16, 16, 10, 4});
  auto re = resrep::insert_compactors(base);

  SUBCASE("fresh identity compactors all read exactly 1") {
    for (const auto& e : resrep::compute_metrics(re)) {
      CHECK(e.value == 1.0);
      CHECK(re.nodes[e.node].compactor);
    }
    CHECK(resrep::compute_metrics(re).size() == 4 + 6);
  }
  SUBCASE("a zeroed row reads 0 and a scaled row reads its norm") {
    const int comp = re.compactor_nodes()[0];
    re.nodes[comp].conv.kernel.rows_view().row(2).setZero();
    re.nodes[comp].conv.kernel.rows_view().row(1) *= 2.5f;
    auto metrics = resrep::compute_metrics(re);
    for (const auto& e : metrics) {
      if (e.node != comp) continue;
      if (e.channel == 2) CHECK(e.value == 0.0);
      if (e.channel == 1) CHECK(e.value == doctest::Approx(2.5).epsilon(1e-6));
    }
  }
  SUBCASE("random kernels match the row-norm oracle") {
    std::mt19937 rng(5);
    const int comp = re.compactor_nodes()[1];
    re.nodes[comp].conv.kernel = testutil::random_tensor<float>({6, 6, 1, 1}, rng);
    auto norms = resrep::row_norms(re.nodes[comp].conv.kernel);
    for (const auto& e : resrep::compute_metrics(re)) {
      if (e.node == comp) CHECK(e.value == doctest::Approx(norms[e.channel]).epsilon(1e-7));
    }
  }
  SUBCASE("a plain model falls back to target kernels") {
    auto metrics = resrep::compute_metrics(base);
    CHECK(metrics.size() == 4 + 6);
    for (const auto& e : metrics) CHECK(base.nodes[e.node].target);
  }
}

TEST_CASE("channel selection") {
  auto base = resrep::build_miniconv<float>({4, 6}, {3, 16, 16, 10, 6});
  auto re = resrep::insert_compactors(base);
  const int comp = re.compactor_nodes()[0];

  SUBCASE("a zero cap masks nothing") {
    auto sel = resrep::select_channels(resrep::compute_metrics(re), re, 0.5, 0);
    CHECK(sel.picked == 0);
    CHECK(sel.masks.at(comp) == std::vector<std::uint8_t>(4, 1));
    CHECK_FALSE(sel.target_reached);
  }
  SUBCASE("a zero target masks nothing and reports done") {
    auto sel = resrep::select_channels(resrep::compute_metrics(re), re, 0.0, 8);
    CHECK(sel.picked == 0);
    CHECK(sel.target_reached);
  }
  SUBCASE("ascending metric order with the cap binding") {
    set_row_norm(re.nodes[comp].conv.kernel, 0, 0.1f);
    set_row_norm(re.nodes[comp].conv.kernel, 1, 0.9f);
    set_row_norm(re.nodes[comp].conv.kernel, 2, 0.5f);
    set_row_norm(re.nodes[comp].conv.kernel, 3, 0.7f);
    auto sel = resrep::select_channels(resrep::compute_metrics(re), re, 0.7, 2);
    CHECK(sel.picked == 2);
    CHECK(sel.masks.at(comp) == std::vector<std::uint8_t>{0, 1, 0, 1});
    CHECK_FALSE(sel.target_reached);
  }
  SUBCASE("selection stops the moment the budget is met") {
    // Removing one conv1 channel deletes 1*3*9*256 + 6*1*9*64 multiply-adds,
    // about a quarter of the model.
    auto metrics = resrep::compute_metrics(re);
    auto sel = resrep::select_channels(metrics, re, 0.05, 10);
    CHECK(sel.picked == 1);
    CHECK(sel.target_reached);
    CHECK(sel.deduced == resrep::deduced_flops(re, sel.masks));
    CHECK(double(sel.original - sel.deduced) >= 0.05 * double(sel.original));
  }
  SUBCASE("ties break by node then channel") {
    auto sel = resrep::select_channels(resrep::compute_metrics(re), re, 0.9, 2);
    CHECK(sel.masks.at(comp) == std::vector<std::uint8_t>{0, 0, 1, 1});
  }
  SUBCASE("the last channel of a layer is never picked") {
    auto deep = resrep::insert_compactors(
        resrep::build_miniconv<float>({1, 6, 8}, {3, 16, 16, 10, 7}));
    const int tiny = deep.compactor_nodes()[0];
    const int big = deep.compactor_nodes()[1];
    deep.nodes[tiny].conv.kernel.raw().setConstant(0.05f);  // globally smallest
    auto sel = resrep::select_channels(resrep::compute_metrics(deep), deep, 0.9, 3);
    CHECK(sel.masks.at(tiny) == std::vector<std::uint8_t>{1});
    CHECK(resrep::mask_ones(sel.masks.at(big)) == 6 - 3);
    CHECK(sel.picked == 3);
  }
  SUBCASE("an unreachable target yields the maximal legal mask") {
    auto sel = resrep::select_channels(resrep::compute_metrics(re), re, 0.95, 100);
    CHECK_FALSE(sel.target_reached);
    CHECK(sel.masks.at(comp) == std::vector<std::uint8_t>{0, 0, 0, 1});
    CHECK(sel.picked == 3);
  }
  SUBCASE("selection is pure and deterministic") {
    auto metrics = resrep::compute_metrics(re);
    auto a = resrep::select_channels(metrics, re, 0.4, 3);
    auto b = resrep::select_channels(metrics, re, 0.4, 3);
    CHECK(a.masks == b.masks);
    CHECK(a.picked == b.picked);
    CHECK(a.deduced == b.deduced);
  }
}

TEST_CASE("deduction hand case: 16-wide conv with a 16-wide successor") {
  auto m = wide_probe();
  MaskSet masks;
  masks[0].assign(16, 1);
  masks[0][5] = 0;
  const std::uint64_t full = resrep::model_flops(m);
  const std::uint64_t reduced = resrep::deduced_flops(m, masks);
  CHECK(full - reduced == std::uint64_t(3 * 9 * 1024 + 16 * 9 * 1024));
}

TEST_CASE("sparsity trace") {
  auto base = resrep::build_miniconv<float>({4, 5}, {3, 8, 8, 10, 8});
  auto re = resrep::insert_compactors(base);
  const int comp = re.compactor_nodes()[0];

  SUBCASE("all-ones masks put the whole quadratic sum on the surviving side") {
    MaskSet masks;
    masks[comp].assign(4, 1);
    auto [survive, forget] = resrep::sparsity_trace(re, masks);
    CHECK(survive == doctest::Approx(4.0).epsilon(1e-6));  // identity compactor
    CHECK(forget == 0.0);
  }
  SUBCASE("identity compactor with one masked row splits 3 to 1") {
    MaskSet masks;
    masks[comp] = {1, 0, 1, 1};
    auto [survive, forget] = resrep::sparsity_trace(re, masks);
    CHECK(survive == doctest::Approx(3.0).epsilon(1e-6));
    CHECK(forget == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("the two sides always sum to the total") {
    std::mt19937 rng(9);
    re.nodes[comp].conv.kernel = testutil::random_tensor<float>({4, 4, 1, 1}, rng);
    const double total = double(re.nodes[comp].conv.kernel.raw().squaredNorm());
    MaskSet masks;
    masks[comp] = {0, 1, 0, 1};
    auto [survive, forget] = resrep::sparsity_trace(re, masks);
    CHECK(survive + forget == doctest::Approx(total).epsilon(1e-6));
  }
  SUBCASE("attached masks are read when no explicit set is given") {
    re.nodes[comp].mask = {1, 0, 1, 1};
    auto [survive, forget] = resrep::sparsity_trace(re);
    CHECK(survive == doctest::Approx(3.0).epsilon(1e-6));
    CHECK(forget == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("structural channel removal on a plain model") {
  auto m = resrep::build_miniconv<double>({4, 5}, {3, 8, 8, 10, 10});
  const int t = m.target_nodes()[0];
  const int succ = m.nodes[t].successor;
  // Zero one channel end to end so removal provably changes nothing.
  m.nodes[t].conv.kernel.rows_view().row(2).setZero();

  auto x = testutil::random_tensor<double>(3, 3, 8, 8, 11);
  auto before = resrep::forward(m, x, resrep::Mode::Eval).output();
  resrep::remove_plain_channel(m, t, 2);
  auto after = resrep::forward(m, x, resrep::Mode::Eval).output();

  CHECK(m.nodes[t].conv.out_channels() == 3);
  CHECK(m.nodes[succ].conv.in_channels() == 3);
  for (auto& n : m.nodes) {
    if (n.kind == NodeKind::BatchNorm && n.input == t) CHECK(n.bn.channels() == 3);
  }
  CHECK((before.raw() - after.raw()).cwiseAbs().maxCoeff() <= 1e-12);

  SUBCASE("contract violations") {
    CHECK_THROWS_AS(resrep::remove_plain_channel(m, t, 7), resrep::ContractViolation);
    CHECK_THROWS_AS(resrep::remove_plain_channel(m, m.nodes[t].successor + 1, 0),
                    resrep::ContractViolation);
    auto re = resrep::insert_compactors(resrep::build_miniconv<double>({4, 5}));
    CHECK_THROWS_AS(resrep::remove_plain_channel(re, re.target_nodes()[0], 0),
                    resrep::ContractViolation);
  }
}

TEST_CASE("minimal structure search") {
  SUBCASE("exactly-zero channels are always removed") {
    auto m = resrep::build_miniconv<double>({5, 4}, {3, 8, 8, 4, 12});
    const int t = m.target_nodes()[0];
    m.nodes[t].conv.kernel.rows_view().row(1).setZero();
    m.nodes[t].conv.kernel.rows_view().row(3).setZero();

    auto images = testutil::random_tensor<double>(40, 3, 8, 8, 13);
    std::vector<int> labels(40);
    std::mt19937 rng(14);
    for (auto& l : labels) l = int(rng() % 4);

    auto result = resrep::minimal_structure(m, images, labels);
    REQUIRE(result.widths.size() == 1);
    CHECK(result.widths[0].second <= 3);
  }

  SUBCASE("a single-width model is already minimal") {
    auto m = resrep::build_miniconv<double>({1, 4}, {3, 8, 8, 4, 15});
    auto images = testutil::random_tensor<double>(20, 3, 8, 8, 16);
    std::vector<int> labels(20, 0);
    auto result = resrep::minimal_structure(m, images, labels);
    CHECK(result.widths[0].second == 1);
  }

  SUBCASE("the channel carrying all signal survives") {
    resrep::GraphBuilder<double> b(1, 4, 4, 2, 17);
    int c1 = b.conv(-1, 2, 1, 1, 0, false, "c1");
    int r1 = b.relu(b.bn(c1, "bn1"));
    int c2 = b.conv(r1, 2, 1, 1, 0, false, "c2");
    int r2 = b.relu(b.bn(c2, "bn2"));
    b.conv(b.gap(r2), 2, 1, 1, 0, true, "classifier");
    b.mark_target(c1, c2);
    auto m = b.finish("signal-probe");

    // Channel 0 passes the input through; channel 1 is dead weight.
    m.nodes[c1].conv.kernel.set_zero();
    m.nodes[c1].conv.kernel.at(0, 0, 0, 0) = 1.0;
    m.nodes[c2].conv.kernel.set_zero();
    m.nodes[c2].conv.kernel.at(0, 0, 0, 0) = 1.0;
    m.nodes[c2].conv.kernel.at(1, 1, 0, 0) = 1.0;
    auto& head = m.nodes.back().conv;
    head.kernel.set_zero();
    head.kernel.at(0, 0, 0, 0) = 2.0;
    head.kernel.at(1, 0, 0, 0) = -2.0;
    (*head.bias)[1] = 1.0;

    Tensor4<double> images(30, 1, 4, 4);
    std::vector<int> labels(30);
    for (Index i = 0; i < 30; ++i) {
      const double c = i % 2 == 0 ? 1.0 : -1.0;
      images.sample_view(i).setConstant(c);
      labels[std::size_t(i)] = c > 0 ? 0 : 1;
    }

    auto result = resrep::minimal_structure(m, images, labels);
    CHECK(result.baseline_accuracy == 1.0);
    REQUIRE(result.widths.size() == 1);
    CHECK(result.widths[0].second == 1);
    CHECK(resrep::evaluate(result.model, images, labels) == 1.0);
    // The survivor is the passthrough row.
    const int kept = result.model.target_nodes()[0];
    CHECK(result.model.nodes[kept].conv.kernel.at(0, 0, 0, 0) == 1.0);
  }
}
