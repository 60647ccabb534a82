#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <numbers>
#include <vector>

#include "resrep/models.hpp"
#include "resrep/optim.hpp"
#include "test_util.hpp"

using resrep::Index;
using resrep::ParamGroup;
using resrep::ParamView;
using resrep::SgdState;
using resrep::VectorX;

namespace {

struct Slot {
  VectorX<double> value;
  VectorX<double> grad;

  Slot(std::initializer_list<double> v, std::initializer_list<double> g)
      : value(VectorX<double>::Zero(Index(v.size()))),
        grad(VectorX<double>::Zero(Index(g.size()))) {
    Index i = 0;
    for (double x : v) value[i++] = x;
    i = 0;
    for (double x : g) grad[i++] = x;
  }

  ParamView<double> view(const std::string& name) {
    return {name, resrep::ParamRole::ConvWeight, value.data(), grad.data(), value.size(), 0};
  }
};

}  // namespace

TEST_CASE("plain step applies lr times gradient plus coupled decay") {
  Slot s({2.0, -1.0}, {0.5, 0.25});
  ParamGroup<double> g;
  g.momentum = 0.0;
  g.weight_decay = 0.1;
  g.params.push_back(s.view("p"));
  std::vector<ParamGroup<double>> groups{g};
  SgdState<double> state;

  resrep::sgd_step(groups, state, 0.1);
  // v = grad + wd*value = (0.7, 0.15); value -= 0.1*v
  CHECK(s.value[0] == doctest::Approx(2.0 - 0.07).epsilon(1e-15));
  CHECK(s.value[1] == doctest::Approx(-1.0 - 0.015).epsilon(1e-15));

  SUBCASE("gradient buffers are cleared by the step") {
    CHECK(s.grad[0] == 0.0);
    CHECK(s.grad[1] == 0.0);
  }
}

TEST_CASE("zero gradient with zero decay moves nothing") {
  Slot s({3.0, 4.0}, {0.0, 0.0});
  ParamGroup<double> g;
  g.momentum = 0.9;
  g.weight_decay = 0.0;
  g.params.push_back(s.view("p"));
  std::vector<ParamGroup<double>> groups{g};
  SgdState<double> state;
  for (int i = 0; i < 5; ++i) resrep::sgd_step(groups, state, 0.1);
  CHECK(s.value[0] == 3.0);
  CHECK(s.value[1] == 4.0);
  CHECK(state.velocity.at("p").cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("momentum compounds velocity across steps") {
  Slot s({0.0}, {1.0});
  ParamGroup<double> g;
  g.momentum = 0.9;
  g.weight_decay = 0.0;
  g.params.push_back(s.view("p"));
  std::vector<ParamGroup<double>> groups{g};
  SgdState<double> state;

  resrep::sgd_step(groups, state, 0.1);  // v=1, p=-0.1
  CHECK(s.value[0] == doctest::Approx(-0.1).epsilon(1e-15));
  s.grad[0] = 1.0;
  resrep::sgd_step(groups, state, 0.1);  // v=1.9, p=-0.29
  CHECK(s.value[0] == doctest::Approx(-0.29).epsilon(1e-15));
  CHECK(state.velocity.at("p")[0] == doctest::Approx(1.9).epsilon(1e-15));
}

TEST_CASE("decay coupling equals feeding the decay term through the gradient") {
  Slot decayed({1.5, -2.5}, {0.0, 0.0});
  Slot fed({1.5, -2.5}, {0.0, 0.0});
  const double wd = 0.05;

  ParamGroup<double> ga;
  ga.momentum = 0.9;
  ga.weight_decay = wd;
  ga.params.push_back(decayed.view("p"));
  std::vector<ParamGroup<double>> a{ga};

  ParamGroup<double> gb;
  gb.momentum = 0.9;
  gb.weight_decay = 0.0;
  gb.params.push_back(fed.view("p"));
  std::vector<ParamGroup<double>> b{gb};

  SgdState<double> sa, sb;
  for (int i = 0; i < 4; ++i) {
    fed.grad = wd * fed.value;  // what coupling would add, given equal trajectories
    resrep::sgd_step(a, sa, 0.1);
    resrep::sgd_step(b, sb, 0.1);
    REQUIRE(decayed.value == fed.value);
  }
}

TEST_CASE("velocity buffers are keyed by name and size-checked") {
  Slot s({1.0}, {1.0});
  ParamGroup<double> g;
  g.params.push_back(s.view("p"));
  std::vector<ParamGroup<double>> groups{g};
  SgdState<double> state;
  state.velocity["p"] = VectorX<double>::Zero(3);
  CHECK_THROWS_AS(resrep::sgd_step(groups, state, 0.1), resrep::ContractViolation);
}

TEST_CASE("cosine schedule hits its endpoints and quarter point") {
  CHECK(resrep::cosine_lr(0.01, 0, 180) == doctest::Approx(0.01).epsilon(1e-15));
  CHECK(resrep::cosine_lr(0.01, 90, 180) == doctest::Approx(0.005).epsilon(1e-12));
  const double quarter = 0.01 * 0.5 * (1.0 + std::cos(std::numbers::pi / 4.0));
  CHECK(resrep::cosine_lr(0.01, 45, 180) == doctest::Approx(quarter).epsilon(1e-15));
  CHECK(quarter == doctest::Approx(0.0085355339).epsilon(1e-7));

  for (Index e = 1; e < 180; ++e) {
    CHECK(resrep::cosine_lr(0.01, e, 180) < resrep::cosine_lr(0.01, e - 1, 180));
  }

  CHECK_THROWS_AS(resrep::cosine_lr(0.01, 180, 180), resrep::ContractViolation);
  CHECK_THROWS_AS(resrep::cosine_lr(0.01, -1, 180), resrep::ContractViolation);
  CHECK_THROWS_AS(resrep::cosine_lr(0.01, 0, 0), resrep::ContractViolation);
}

TEST_CASE("default groups split parameters by role") {
  auto m = resrep::build_miniconv<float>({4, 6}, {3, 8, 8, 10, 1});
  m.nodes[0].compactor = true;  // stand-in: treat the first conv as a compactor
  auto groups = resrep::default_param_groups<float>(m, 0.99f);
  REQUIRE(groups.size() == 3);

  CHECK(groups[0].momentum == 0.9f);
  CHECK(groups[0].weight_decay == 1e-4f);
  CHECK(groups[1].momentum == 0.9f);
  CHECK(groups[1].weight_decay == 0.0f);
  CHECK(groups[2].momentum == 0.99f);
  CHECK(groups[2].weight_decay == 0.0f);

  // conv2 kernel + classifier kernel + classifier bias; bn affine pairs;
  // the flagged compactor kernel.
  CHECK(groups[0].params.size() == 3);
  CHECK(groups[1].params.size() == 4);
  CHECK(groups[2].params.size() == 1);
  CHECK(groups[2].params[0].name == "n0.kernel");
}

TEST_CASE("training steps are bit-reproducible") {
  auto run = [] {
    auto m = resrep::build_miniconv<float>({4, 6}, {3, 8, 8, 10, 21});
    auto groups = resrep::default_param_groups<float>(m);
    SgdState<float> state;
    auto x = testutil::random_tensor<float>(4, 3, 8, 8, 22);
    std::vector<int> labels{1, 2, 3, 4};
    for (int i = 0; i < 3; ++i) {
      auto acts = resrep::forward(m, x, resrep::Mode::Train);
      resrep::backward(m, x, acts, labels);
      resrep::sgd_step(groups, state, 0.01f);
    }
    std::vector<float> flat;
    for (auto& p : resrep::parameters(m)) flat.insert(flat.end(), p.value, p.value + p.size);
    return flat;
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.size() == b.size());
  CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0);
}
