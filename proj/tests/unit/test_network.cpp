#include <doctest.h>

#include <random>

#include "pldcp/error.hpp"
#include "pldcp/network.hpp"

using namespace pldcp;

namespace {

NetworkDims tiny_dims() {
  NetworkDims d;
  d.input_dim = 5;
  d.shallow_hidden = 6;
  d.hidden = 4;
  d.n_classes = 3;
  d.n_domains = 2;
  return d;
}

void zero_all(ModelParams& p) {
  for (auto& [name, m] : p.tensors())
    for (double& v : m->data()) v = 0.0;
}

Matrix random_rows(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = g(rng);
  return m;
}

}  // namespace

TEST_CASE("zero weights give a zero shallow feature") {
  ModelParams p = ModelParams::init(tiny_dims(), 1);
  zero_all(p);
  Graph g;
  Var out = shallow(bind(g, p, false), g.constant(random_rows(3, 5, 2)));
  for (double v : out.value().data()) CHECK(v == 0.0);
}

TEST_CASE("identity layers pass a non-negative input through") {
  NetworkDims d = tiny_dims();
  d.input_dim = d.shallow_hidden = d.hidden = 4;
  ModelParams p = ModelParams::init(d, 1);
  p.g1.weight = Matrix::identity(4);
  p.g2.weight = Matrix::identity(4);
  Graph g;
  const Matrix x = Matrix::from_rows({{0.5, 1.0, 2.0, 0.0}});
  CHECK(shallow(bind(g, p, false), g.constant(x)).value() == x);
}

TEST_CASE("initialisation is deterministic per seed") {
  const ModelParams a = ModelParams::init(tiny_dims(), 9);
  const ModelParams b = ModelParams::init(tiny_dims(), 9);
  const ModelParams c = ModelParams::init(tiny_dims(), 10);
  auto ta = a.tensors();
  auto tb = b.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) CHECK(*ta[i].second == *tb[i].second);
  CHECK(a.s != c.s);
  CHECK(a.g1.bias == Matrix(1, 6));
  CHECK(a.s.rows() == 4);
  CHECK(a.s.cols() == 4);
}

TEST_CASE("glorot bounds and S scale") {
  NetworkDims d = tiny_dims();
  d.input_dim = 40;
  d.shallow_hidden = 60;
  d.hidden = 50;
  const ModelParams p = ModelParams::init(d, 3);
  const double limit = std::sqrt(6.0 / 100.0);
  for (double v : p.g1.weight.data()) CHECK(std::abs(v) <= limit);
  double sq = 0.0;
  for (double v : p.s.data()) sq += v * v;
  CHECK(sq / static_cast<double>(p.s.size()) == doctest::Approx(1.0 / 50.0).epsilon(0.1));
}

TEST_CASE("equal disentanglers give equal features and zero f_d gives a constant x_d") {
  ModelParams p = ModelParams::init(tiny_dims(), 4);
  p.fd = p.fc;
  Graph g;
  const Matrix x = random_rows(6, 5, 5);
  auto z = disentangle(bind(g, p, false), g.constant(x));
  CHECK(z.x_c.value() == z.x_d.value());

  p = ModelParams::init(tiny_dims(), 4);
  for (double& v : p.fd.weight.data()) v = 0.0;
  p.fd.bias = Matrix::from_rows({{1.0, -2.0, 0.5, 3.0}});
  Graph g2;
  auto z2 = disentangle(bind(g2, p, false), g2.constant(x));
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(z2.x_d.value()(r, c) == p.fd.bias(0, c));
}

TEST_CASE("a batch maps row by row in order") {
  const ModelParams p = ModelParams::init(tiny_dims(), 6);
  const Matrix x = random_rows(5, 5, 7);
  Graph g;
  auto batch = disentangle(bind(g, p, false), g.constant(x));
  REQUIRE(batch.x_c.rows() == 5);
  for (std::size_t r = 0; r < 5; ++r) {
    Graph one;
    auto z = disentangle(bind(one, p, false), one.constant(Matrix::row_vector(x.row(r))));
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(z.x_c.value()(0, c) == doctest::Approx(batch.x_c.value()(r, c)).epsilon(1e-14));
      CHECK(z.x_d.value()(0, c) == doctest::Approx(batch.x_d.value()(r, c)).epsilon(1e-14));
    }
  }
}

TEST_CASE("disentangle runs the shared trunk once") {
  const ModelParams p = ModelParams::init(tiny_dims(), 6);
  Graph g;
  const BoundParams b = bind(g, p, true);
  (void)disentangle(b, g.constant(random_rows(3, 5, 1)));
  CHECK(g.op_count(OpKind::kLeakyRelu) == 2);  // two f_g layers, nothing else activates
  CHECK(g.op_count(OpKind::kMatMul) == 4);     // g1, g2, fc, fd
}

TEST_CASE("dimension mismatch is a shape error") {
  const ModelParams p = ModelParams::init(tiny_dims(), 6);
  Graph g;
  CHECK_THROWS_AS(shallow(bind(g, p, false), g.constant(random_rows(2, 7, 1))), Error);
}

TEST_CASE("discriminator heads are independent sigmoids") {
  ModelParams p = ModelParams::init(tiny_dims(), 2);
  zero_all(p);
  Graph g;
  Var out = discriminate(bind(g, p, false).dc, g.constant(random_rows(2, 4, 3)));
  CHECK(out.cols() == 3);
  for (double v : out.value().data()) CHECK(v == 0.5);

  p.dc.bias = Matrix::from_rows({{20.0, 0.0, -1.0}});
  Graph g2;
  Var big = discriminate(bind(g2, p, false).dc, g2.constant(random_rows(1, 4, 3)));
  CHECK(big.value()(0, 0) > 1.0 - 1e-6);
  CHECK(big.value()(0, 0) < 1.0);

  // Perturbing one head column moves only that entry.
  p = ModelParams::init(tiny_dims(), 2);
  const Matrix v = random_rows(1, 4, 8);
  Graph g3;
  const Matrix before = discriminate(bind(g3, p, false).dc, g3.constant(v)).value();
  for (std::size_t r = 0; r < 4; ++r) p.dc.weight(r, 1) += 0.3;
  Graph g4;
  const Matrix after = discriminate(bind(g4, p, false).dc, g4.constant(v)).value();
  CHECK(after(0, 0) == before(0, 0));
  CHECK(after(0, 2) == before(0, 2));
  CHECK(after(0, 1) != before(0, 1));
  for (double x : after.data()) {
    CHECK(x > 0.0);
    CHECK(x < 1.0);
  }
}

TEST_CASE("bilinear similarity examples") {
  const std::vector<double> x = {1.0, 2.0};
  const std::vector<double> mu = {3.0, 4.0};
  CHECK(bilinear_sim(Matrix::identity(2), x, mu) == 11.0);
  CHECK(bilinear_sim(Matrix(2, 2), x, mu) == 0.0);
  const std::vector<double> e0 = {1.0, 0.0};
  const std::vector<double> e1 = {0.0, 1.0};
  CHECK(bilinear_sim(Matrix::from_rows({{0.0, 1.0}, {0.0, 0.0}}), e0, e1) == 1.0);
  CHECK(bilinear_sim(Matrix::from_rows({{0.0, 1.0}, {0.0, 0.0}}), e1, e0) == 0.0);
  CHECK_THROWS_AS(bilinear_sim(Matrix::identity(3), x, mu), Error);
}

TEST_CASE("property: bilinear similarity is linear in x_d and matches the graph form") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 30; ++trial) {
    const Matrix s = random_rows(5, 5, 100 + static_cast<std::uint64_t>(trial));
    std::vector<double> x(5), mu(5);
    for (double& v : x) v = g(rng);
    for (double& v : mu) v = g(rng);
    const double a = g(rng);
    std::vector<double> ax = x;
    for (double& v : ax) v *= a;
    const double h = bilinear_sim(s, x, mu);
    CHECK(std::abs(bilinear_sim(s, ax, mu) - a * h) < 1e-10 * (1.0 + std::abs(a * h)));

    Graph graph;
    Var sv = graph.constant(s);
    Var scores = bilinear_scores(graph.constant(Matrix::row_vector(x)), &sv,
                                 graph.constant(Matrix::row_vector(mu)));
    CHECK(std::abs(scores.value()(0, 0) - h) < 1e-12 * (1.0 + std::abs(h)));
  }
}

TEST_CASE("parameter JSON round-trips exactly and rejects wrong shapes") {
  ModelParams p = ModelParams::init(tiny_dims(), 12);
  p.bilinear = false;
  const auto back = params_from_json(params_to_json(p));
  auto ta = p.tensors();
  auto tb = back.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) CHECK(*ta[i].second == *tb[i].second);
  CHECK(back.dims == p.dims);
  CHECK_FALSE(back.bilinear);

  auto j = params_to_json(p);
  j["tensors"]["fc.weight"]["rows"] = 3;
  try {
    (void)params_from_json(j);
    FAIL("expected checkpoint error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kCheckpoint);
    CHECK(std::string(e.what()).find("fc.weight") != std::string::npos);
  }
}
