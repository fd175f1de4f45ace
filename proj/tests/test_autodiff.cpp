#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "doublyaware/autodiff.hpp"
#include "doublyaware/nn.hpp"
#include "support.hpp"

using namespace doublyaware;
using testing_support::fd_check;
using testing_support::random_matrix;

namespace {

// Two 3x4 segments "x" and "y" plus a 4x2 "w" and a 1x2 "b".
ad::ParamVector make_params(std::uint64_t seed, double scale = 1.0) {
  ad::ParamVector p({{"x", {3, 4}}, {"y", {3, 4}}, {"w", {4, 2}}, {"b", {2}}});
  Rng rng(seed);
  for (double& v : p.values()) v = scale * rng.normal();
  return p;
}

// Random fixed projection so every output element reaches the loss with its own weight.
ad::Var project(ad::Tape& tape, ad::Var v, std::uint64_t seed) {
  const auto& m = tape.value(v);
  Rng rng(seed);
  auto c = tape.constant(random_matrix(m.rows, m.cols, rng));
  return ad::sum(v * c);
}

double fd_error(const ad::LossFn& fn, const ad::ParamVector& at) {
  const auto g = ad::grad(fn, at);
  auto f = [&](const std::vector<double>& vals) {
    ad::ParamVector p = at;
    std::copy(vals.begin(), vals.end(), p.values().begin());
    return ad::evaluate(fn, p);
  };
  std::vector<double> vals(at.values().begin(), at.values().end());
  return fd_check(f, vals, g, {}).max_rel_error;
}

const std::filesystem::path kTmp = std::filesystem::temp_directory_path() / "doublyaware_test_autodiff";

}  // namespace

TEST_CASE("gradient of half squared norm is the parameter vector") {
  const auto p = make_params(3);
  ad::LossFn fn = [](ad::Tape&, ad::ParamHandle& h) {
    ad::Var total = ad::sum(ad::square(h.segment(0)));
    for (std::size_t i = 1; i < 4; ++i) total = total + ad::sum(ad::square(h.segment(i)));
    return 0.5 * total;
  };
  const auto g = ad::grad(fn, p);
  REQUIRE(g.size() == p.size());
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(p.values()[i]).epsilon(1e-14));
}

TEST_CASE("gradient of a constant loss is zero") {
  const auto p = make_params(4);
  ad::LossFn fn = [](ad::Tape& t, ad::ParamHandle&) { return t.constant(Matrix(1, 1, 2.5)); };
  const auto g = ad::grad(fn, p);
  REQUIRE(g.size() == p.size());
  for (double v : g) CHECK(v == 0.0);
}

TEST_CASE("every primitive agrees with central differences") {
  const auto p = make_params(11);
  const auto positive = [&] {
    auto q = p;
    for (double& v : q.values()) v = 0.5 + std::abs(v);
    return q;
  }();
  struct Case {
    const char* name;
    ad::LossFn fn;
    bool needs_positive = false;
  };
  using ad::Var;
  const std::vector<Case> cases = {
      {"affine", [](ad::Tape& t, ad::ParamHandle& h) { return project(t, ad::affine(h.segment(0), h.segment(2), h.segment(3)), 1); }},
      {"elu", [](ad::Tape& t, ad::ParamHandle& h) { return project(t, ad::elu(h.segment(0)), 2); }},
      {"tanh", [](ad::Tape& t, ad::ParamHandle& h) { return project(t, ad::tanh(h.segment(0)), 3); }},
      {"exp", [](ad::Tape& t, ad::ParamHandle& h) { return project(t, ad::exp(h.segment(0)), 4); }},
      {"log", [](ad::Tape& t, ad::ParamHandle& h) { return project(t, ad::log(h.segment(0)), 5); }, true},
      {"square", [](ad::Tape& t, ad::ParamHandle& h) { return project(t, ad::square(h.segment(0)), 6); }},
      {"add", [](ad::Tape& t, ad::ParamHandle& h) { return project(t, h.segment(0) + h.segment(1), 7); }},
      {"sub", [](ad::Tape& t, ad::ParamHandle& h) { return project(t, h.segment(0) - h.segment(1), 8); }},
      {"mul", [](ad::Tape& t, ad::ParamHandle& h) { return project(t, h.segment(0) * h.segment(1), 9); }},
      {"scale", [](ad::Tape& t, ad::ParamHandle& h) { return project(t, -1.7 * h.segment(0), 10); }},
      {"add_scalar", [](ad::Tape& t, ad::ParamHandle& h) { return project(t, ad::square(h.segment(0) + 0.3), 11); }},
      {"mean", [](ad::Tape&, ad::ParamHandle& h) { return ad::mean(ad::square(h.segment(0))); }},
      {"row_sum", [](ad::Tape& t, ad::ParamHandle& h) { return project(t, ad::row_sum(h.segment(0) * h.segment(1)), 12); }},
      {"softmax_rows", [](ad::Tape& t, ad::ParamHandle& h) { return project(t, ad::softmax_rows(h.segment(0)), 13); }},
      {"concat_cols", [](ad::Tape& t, ad::ParamHandle& h) { return project(t, ad::square(ad::concat_cols(h.segment(0), h.segment(1))), 14); }},
      {"slice_cols", [](ad::Tape& t, ad::ParamHandle& h) { return project(t, ad::square(ad::slice_cols(h.segment(0), 1, 3)), 15); }},
      {"broadcast_row", [](ad::Tape& t, ad::ParamHandle& h) {
         Var x = ad::affine(h.segment(0), h.segment(2), h.segment(3));
         return project(t, x * h.segment(3) + h.segment(3), 16);
       }},
      {"broadcast_col", [](ad::Tape& t, ad::ParamHandle& h) {
         Var col = ad::row_sum(h.segment(1));
         return project(t, h.segment(0) * col - col, 17);
       }},
      {"broadcast_scalar", [](ad::Tape& t, ad::ParamHandle& h) {
         Var s = ad::mean(h.segment(1));
         return project(t, h.segment(0) * s + s, 18);
       }},
      {"composite", [](ad::Tape& t, ad::ParamHandle& h) {
         Var a = ad::tanh(ad::affine(ad::elu(h.segment(0)), h.segment(2), h.segment(3)));
         Var sm = ad::softmax_rows(a);
         return project(t, ad::log(sm + 0.1) * ad::exp(a), 19);
       }},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    CHECK(fd_error(c.fn, c.needs_positive ? positive : p) < 1e-4);
  }
}

TEST_CASE("clip straight-through passes the gradient unchanged") {
  auto p = make_params(5, 3.0);
  ad::LossFn fn = [](ad::Tape& t, ad::ParamHandle& h) { return project(t, ad::clip_st(h.segment(0), -1.0, 1.0), 21); };
  ad::LossFn ident = [](ad::Tape& t, ad::ParamHandle& h) { return project(t, h.segment(0), 21); };
  CHECK(ad::grad(fn, p) == ad::grad(ident, p));
  ad::Tape tape;
  ad::ParamHandle h(tape, p);
  const auto& v = tape.value(ad::clip_st(h.segment(0), -1.0, 1.0));
  for (double x : v.data) CHECK(std::abs(x) <= 1.0);
}

TEST_CASE("non-finite intermediates name the primitive") {
  auto p = make_params(6);
  p.values()[0] = -1.0;
  ad::LossFn fn = [](ad::Tape&, ad::ParamHandle& h) { return ad::sum(ad::log(h.segment(0))); };
  try {
    ad::grad(fn, p);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.primitive == "log");
  }
  ad::LossFn big = [](ad::Tape&, ad::ParamHandle& h) { return ad::sum(ad::exp(1000.0 * h.segment(1))); };
  p.values()[12] = 5.0;
  try {
    ad::evaluate(big, p);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.primitive == "exp");
  }
}

TEST_CASE("grad and evaluate leave their input untouched") {
  const auto p = make_params(7);
  const auto copy = p;
  ad::LossFn fn = [](ad::Tape&, ad::ParamHandle& h) { return ad::sum(ad::square(ad::tanh(h.segment(0)))); };
  ad::grad(fn, p);
  ad::evaluate(fn, p);
  CHECK(p == copy);
}

TEST_CASE("shape mismatches are contract violations") {
  const auto p = make_params(8);
  ad::Tape tape;
  ad::ParamHandle h(tape, p);
  CHECK_THROWS_AS(ad::affine(h.segment(2), h.segment(2), h.segment(3)), ContractViolation);
  CHECK_THROWS_AS(ad::add(h.segment(0), h.segment(2)), ContractViolation);
  ad::Mlp net({3, 4, 2});
  CHECK_THROWS_AS(net.forward(Matrix(1, 5)), ContractViolation);
}

TEST_CASE("ParamVector layout") {
  ad::ParamVector p({{"a", {2, 3}}, {"b", {4}}, {"c", {2, 2, 2}}});
  CHECK(p.size() == 6 + 4 + 8);
  REQUIRE(p.layout().size() == 3);
  CHECK(p.layout()[1].offset == 6);
  CHECK(p.layout()[2].offset == 10);
  CHECK(p.segment(2).size() == 8);
  ad::ParamVector q({{"a", {2, 3}}, {"b", {4}}, {"c", {2, 4}}});
  CHECK_FALSE(p.same_layout(q));
}

TEST_CASE("Mlp parameter count and output dimension") {
  const std::vector<std::size_t> sizes = {5, 7, 3, 2};
  ad::Mlp net(sizes);
  CHECK(net.params().size() == (5 + 1) * 7 + (7 + 1) * 3 + (3 + 1) * 2);
  CHECK(ad::parameter_count(sizes) == net.params().size());
  CHECK(net.forward(std::vector<double>{1, 2, 3, 4, 5}).size() == 2);
}

TEST_CASE("all-zero network outputs zero") {
  ad::Mlp net({4, 8, 8, 3});
  const auto y = net.forward(std::vector<double>{0.3, -2.0, 5.0, 1.0});
  for (double v : y) CHECK(v == 0.0);
}

TEST_CASE("identity linear layer returns its input") {
  ad::Mlp net({3, 3});
  auto w = net.weight(0);
  for (std::size_t i = 0; i < 3; ++i) w[i * 3 + i] = 1.0;
  const std::vector<double> x = {0.5, -1.25, 3.0};
  CHECK(net.forward(x) == x);
}

TEST_CASE("tape forward matches the plain forward") {
  const auto net = ad::Mlp::he_uniform({4, 16, 16, 3}, 99);
  Rng rng(5);
  const auto x = random_matrix(6, 4, rng);
  ad::Tape tape;
  ad::ParamHandle h(tape, net.params());
  const auto& y = tape.value(net.forward(h, tape.constant(x)));
  const auto ref = net.forward(x);
  REQUIRE(y.same_shape(ref));
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.data[i] == doctest::Approx(ref.data[i]).epsilon(1e-13));
}

TEST_CASE("seeded initialization is reproducible and within the He bound") {
  const auto a = ad::Mlp::he_uniform({6, 10, 2}, 17);
  const auto b = ad::Mlp::he_uniform({6, 10, 2}, 17);
  const auto c = ad::Mlp::he_uniform({6, 10, 2}, 18);
  CHECK(a.params() == b.params());
  CHECK_FALSE(a.params() == c.params());
  auto net = a;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const double bound = std::sqrt(6.0 / static_cast<double>(net.layer_sizes()[l]));
    for (double v : net.weight(l)) CHECK(std::abs(v) <= bound);
    for (double v : net.bias(l)) CHECK(v == 0.0);
  }
}

TEST_CASE("seeded network output regression fixture") {
  const auto net = ad::Mlp::he_uniform({3, 8, 8, 2}, 2024);
  const auto y = net.forward(std::vector<double>{0.1, -0.4, 0.7});
  REQUIRE(y.size() == 2);
  CHECK(y[0] == doctest::Approx(-0.83134600109911194).epsilon(1e-12));
  CHECK(y[1] == doctest::Approx(0.37602271958695194).epsilon(1e-12));
}

TEST_CASE("Mlp loss gradient agrees with central differences on 100 coordinates") {
  for (auto act : {ad::Activation::elu, ad::Activation::tanh}) {
    const auto net = ad::Mlp::he_uniform({5, 32, 32, 3}, 31, act);
    Rng rng(32);
    const auto x = random_matrix(8, 5, rng);
    const auto target = random_matrix(8, 3, rng);
    ad::LossFn fn = [&](ad::Tape& t, ad::ParamHandle& h) {
      return ad::mean(ad::square(net.forward(h, t.constant(x)) - t.constant(target)));
    };
    const auto g = ad::grad(fn, net.params());
    auto f = [&](const std::vector<double>& vals) {
      ad::ParamVector p = net.params();
      std::copy(vals.begin(), vals.end(), p.values().begin());
      return ad::evaluate(fn, p);
    };
    std::vector<double> vals(net.params().values().begin(), net.params().values().end());
    const auto coords = testing_support::random_coords(vals.size(), 100, 33);
    CHECK(fd_check(f, vals, g, coords).max_rel_error < 1e-4);
  }
}

TEST_CASE("Adam with zero gradient leaves parameters unchanged") {
  auto p = make_params(40);
  const auto before = p;
  ad::AdamState st;
  std::vector<double> g(p.size(), 0.5);
  ad::adam_step(p, g, st, 1e-3);
  const auto m_after_one = st.m;
  std::fill(g.begin(), g.end(), 0.0);
  auto p2 = p;
  ad::adam_step(p2, g, st, 1e-3);
  // Existing moments keep moving parameters, fresh state with zero gradient does not.
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(st.m[i] == doctest::Approx(0.9 * m_after_one[i]));
  ad::AdamState fresh;
  auto p3 = before;
  ad::adam_step(p3, g, fresh, 1e-3);
  CHECK(p3 == before);
  for (double m : fresh.m) CHECK(m == 0.0);
  CHECK(fresh.t == 1);
}

TEST_CASE("Adam steps approach lr times sign of a constant gradient") {
  ad::ParamVector p({{"w", {4}}});
  const std::vector<double> g = {2.0, -0.01, 300.0, -7.0};
  ad::AdamState st;
  const double lr = 1e-3;
  std::vector<double> prev(p.values().begin(), p.values().end());
  for (int i = 0; i < 2000; ++i) {
    std::copy(p.values().begin(), p.values().end(), prev.begin());
    ad::adam_step(p, g, st, lr);
  }
  for (std::size_t i = 0; i < 4; ++i) {
    const double step = p.values()[i] - prev[i];
    CHECK(step == doctest::Approx(-lr * (g[i] > 0 ? 1.0 : -1.0)).epsilon(1e-4));
  }
}

TEST_CASE("a single Adam step has magnitude lr") {
  ad::ParamVector p({{"w", {3}}});
  ad::AdamState st;
  ad::adam_step(p, std::vector<double>{0.7, -3.0, 1e-2}, st, 0.01);
  CHECK(p.values()[0] == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(p.values()[1] == doctest::Approx(0.01).epsilon(1e-6));
  CHECK(p.values()[2] == doctest::Approx(-0.01).epsilon(1e-4));
}

TEST_CASE("optimizer edge cases") {
  auto p = make_params(41);
  const auto before = p;
  std::vector<double> g(p.size(), 1.0);
  ad::AdamState st;
  ad::adam_step(p, g, st, 0.0);
  CHECK(p == before);
  ad::sgd_step(p, g, 0.0);
  CHECK(p == before);
  ad::sgd_step(p, g, 0.5);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(p.values()[i] == before.values()[i] - 0.5);
  g[3] = std::nan("");
  CHECK_THROWS_AS(ad::adam_step(p, g, st, 1e-3), NumericError);
  CHECK_THROWS_AS(ad::sgd_step(p, g, 1e-3), NumericError);
  CHECK_THROWS_AS(ad::adam_step(p, std::vector<double>(3, 0.0), st, 1e-3), ContractViolation);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  std::filesystem::create_directories(kTmp);
  const auto net = ad::Mlp::he_uniform({4, 9, 2}, 77);
  const auto path = kTmp / "net.dapv";
  ad::save_params(path, net.params());
  const auto loaded = ad::load_params(path);
  CHECK(loaded == net.params());
  ad::Mlp other({4, 9, 2});
  ad::load_params_into(path, other.params());
  CHECK(other.params() == net.params());
  ad::Mlp wrong({4, 8, 2});
  CHECK_THROWS_AS(ad::load_params_into(path, wrong.params()), VersionError);
}

TEST_CASE("checkpoint header is little-endian with the documented layout") {
  std::filesystem::create_directories(kTmp);
  ad::ParamVector p({{"ab", {2}}});
  p.values()[0] = 1.0;
  p.values()[1] = -2.0;
  const auto path = kTmp / "tiny.dapv";
  ad::save_params(path, p);
  std::ifstream in(path, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), {});
  // magic, version, count, name length, name, rank, dim, two doubles
  REQUIRE(bytes.size() == 4 + 4 + 4 + 4 + 2 + 4 + 4 + 16);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "DAPV");
  CHECK(bytes[8] == 1);
  CHECK(bytes[12] == 2);
  CHECK(bytes[16] == 'a');
  CHECK(bytes[18] == 1);
  CHECK(bytes[22] == 2);
  // 1.0 = 0x3FF0000000000000, little-endian
  CHECK(bytes[26 + 7] == 0x3F);
  CHECK(bytes[26 + 6] == 0xF0);
}

TEST_CASE("corrupt or missing checkpoints are rejected") {
  std::filesystem::create_directories(kTmp);
  CHECK_THROWS_AS(ad::load_params(kTmp / "does_not_exist.dapv"), IoError);
  const auto path = kTmp / "bad.dapv";
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE0000";
  }
  CHECK_THROWS_AS(ad::load_params(path), VersionError);
}
