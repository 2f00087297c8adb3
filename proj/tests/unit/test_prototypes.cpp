#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "pldcp/dataset.hpp"
#include "pldcp/error.hpp"
#include "pldcp/io.hpp"
#include "pldcp/prototypes.hpp"
#include "pldcp/trainer.hpp"

using namespace pldcp;

namespace {

Matrix random_rows(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = g(rng);
  return m;
}

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace

TEST_CASE("domain prototypes are per-domain means") {
  const Matrix x = Matrix::from_rows({{1.0, 2.0}, {3.0, 4.0}});
  const std::vector<int> ids = {0, 0};
  CHECK(compute_domain_prototypes(x, ids, 1) == Matrix::from_rows({{2.0, 3.0}}));

  const std::vector<int> one_each = {1, 0};
  CHECK(compute_domain_prototypes(x, one_each, 2) == Matrix::from_rows({{3.0, 4.0}, {1.0, 2.0}}));
}

TEST_CASE("an empty domain is an error naming it") {
  const Matrix x = Matrix::from_rows({{1.0}, {2.0}});
  const std::vector<int> ids = {0, 2};
  try {
    (void)compute_domain_prototypes(x, ids, 3);
    FAIL("expected data error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("domain 1") != std::string::npos);
  }
}

TEST_CASE("property: prototypes are order independent and match a streaming mean") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix x = random_rows(40, 6, 50 + static_cast<std::uint64_t>(trial));
    std::vector<int> dom(40), lab(40);
    for (std::size_t i = 0; i < 40; ++i) {
      dom[i] = static_cast<int>(i % 4);
      lab[i] = static_cast<int>((i / 4) % 3);
    }
    const Matrix p = compute_domain_prototypes(x, dom, 4);
    const ClassPrototypes c = compute_class_prototypes(x, dom, lab, 4, 3);
    CHECK(compute_domain_prototypes(x, dom, 4) == p);  // same order, bit for bit

    std::vector<std::size_t> perm(40);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix xp(40, 6);
    std::vector<int> dp(40), lp(40);
    for (std::size_t i = 0; i < 40; ++i) {
      std::copy(x.row(perm[i]).begin(), x.row(perm[i]).end(), xp.row(i).begin());
      dp[i] = dom[perm[i]];
      lp[i] = lab[perm[i]];
    }
    const Matrix pp = compute_domain_prototypes(xp, dp, 4);
    const ClassPrototypes cp = compute_class_prototypes(xp, dp, lp, 4, 3);
    for (std::size_t k = 0; k < p.size(); ++k) CHECK(std::abs(p.data()[k] - pp.data()[k]) < 1e-9);
    for (std::size_t k = 0; k < c.protos.size(); ++k)
      CHECK(std::abs(c.protos.data()[k] - cp.protos.data()[k]) < 1e-9);

    // Welford-style running mean per domain as an independent accumulator.
    for (int d = 0; d < 4; ++d) {
      std::vector<double> mean(6, 0.0);
      double n = 0.0;
      for (std::size_t i = 0; i < 40; ++i) {
        if (dom[i] != d) continue;
        n += 1.0;
        for (std::size_t j = 0; j < 6; ++j) mean[j] += (x(i, j) - mean[j]) / n;
      }
      for (std::size_t j = 0; j < 6; ++j) CHECK(std::abs(mean[j] - p(static_cast<std::size_t>(d), j)) < 1e-9);
    }
  }
}

TEST_CASE("class prototypes: single sample, masking and midpoint") {
  const Matrix x = Matrix::from_rows({{1.0, 1.0}, {3.0, 5.0}, {0.0, 2.0}, {2.0, 0.0}});
  const std::vector<int> dom = {0, 0, 1, 1};
  const std::vector<int> lab = {0, 1, 1, 1};
  const ClassPrototypes c = compute_class_prototypes(x, dom, lab, 2, 3);
  CHECK(c.mask == std::vector<double>{1, 1, 0, 0, 1, 0});
  CHECK(c.protos(0, 0) == 1.0);
  CHECK(c.protos(1, 1) == 5.0);
  CHECK(c.protos(4, 0) == 1.0);  // midpoint of (0,2) and (2,0)
  CHECK(c.protos(4, 1) == 1.0);
  CHECK(c.protos(2, 0) == 0.0);
}

TEST_CASE("domain similarity examples") {
  const std::vector<double> x = {0.3, -1.2};
  const Matrix same = Matrix::from_rows({{1.0, 2.0}, {1.0, 2.0}, {1.0, 2.0}});
  const Matrix eye = Matrix::identity(2);
  for (double v : domain_similarity(&eye, x, same)) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

  const Matrix unit = Matrix::from_rows({{0.0, 1.0}, {1.0, 0.0}});
  const std::vector<double> aligned = {0.0, 2.0};
  const auto d = domain_similarity(&eye, aligned, unit);
  CHECK(select_domain(d) == 0);

  const std::vector<double> lg = {std::log(2.0), 0.0};
  const auto r = domain_similarity(&eye, lg, Matrix::identity(2));
  CHECK(std::abs(r[0] - 2.0 / 3.0) < 1e-12);
  CHECK(std::abs(r[1] - 1.0 / 3.0) < 1e-12);
  CHECK(domain_similarity(nullptr, lg, Matrix::identity(2)) == r);
}

TEST_CASE("select_domain picks the argmax with lowest-index ties") {
  CHECK(select_domain(std::vector<double>{0.1, 0.7, 0.2}) == 1);
  CHECK(select_domain(std::vector<double>{0.25, 0.25, 0.25, 0.25}) == 0);
  CHECK(select_domain(std::vector<double>{0.2, 0.4, 0.4}) == 1);
  CHECK_THROWS_AS(select_domain(std::vector<double>{}), Error);
}

TEST_CASE("property: argmax of D_sim equals argmax of the raw scores, D_sim sums to 1") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Matrix s = random_rows(4, 4, seed);
    const Matrix protos = random_rows(5, 4, seed + 1000);
    const Matrix x = random_rows(1, 4, seed + 2000);
    const auto d = domain_similarity(&s, x.row(0), protos);
    CHECK(std::abs(std::accumulate(d.begin(), d.end(), 0.0) - 1.0) < 1e-12);
    std::vector<double> raw;
    for (std::size_t n = 0; n < 5; ++n) raw.push_back(bilinear_sim(s, x.row(0), protos.row(n)));
    CHECK(select_domain(d) == select_domain(raw));
  }
}

TEST_CASE("class inference examples") {
  const Matrix protos = Matrix::from_rows({{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}});
  const std::vector<double> all = {1, 1, 1};
  const std::vector<double> x = {0.0, 2.0, 0.0};
  const auto l = class_inference(x, protos, all);
  CHECK(select_domain(l) == 1);
  CHECK(std::abs(sum(l) - 1.0) < 1e-12);

  // Symmetric prototypes about x_c.
  const Matrix sym = Matrix::from_rows({{1.0, 1.0}, {1.0, -1.0}});
  const std::vector<double> two = {1, 1};
  const auto ls = class_inference(std::vector<double>{1.0, 0.0}, sym, two);
  CHECK(ls[0] == ls[1]);

  // Masked classes get exactly zero.
  const std::vector<double> mask = {1, 0, 1};
  const auto lm = class_inference(x, protos, mask);
  CHECK(lm[1] == 0.0);
  CHECK(std::abs(sum(lm) - 1.0) < 1e-12);
  CHECK_THROWS_AS(class_inference(x, protos, std::vector<double>{0, 0, 0}), Error);
}

TEST_CASE("property: class inference ignores positive rescaling of x_c") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Matrix protos = random_rows(4, 6, seed);
    const Matrix x = random_rows(1, 6, seed + 77);
    const std::vector<double> mask(4, 1.0);
    const auto l = class_inference(x.row(0), protos, mask);
    std::vector<double> x4(x.row(0).begin(), x.row(0).end()), x3 = x4;
    for (double& v : x4) v *= 4.0;  // exact in binary floating point
    for (double& v : x3) v *= 3.0;
    CHECK(class_inference(x4, protos, mask) == l);
    const auto l3 = class_inference(x3, protos, mask);
    for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(l3[k] - l[k]) < 1e-12);
    CHECK(std::abs(sum(l) - 1.0) < 1e-12);
  }
}

TEST_CASE("graph inference reads l off the selected domain and routes gradient to S only with surrogates") {
  PrototypeStore store;
  store.n_classes = 2;
  store.domain_protos = random_rows(3, 4, 1);
  store.class_protos = random_rows(6, 4, 2);
  store.class_mask = std::vector<double>(6, 1.0);
  const Matrix xc = random_rows(5, 4, 3);
  const Matrix xd = random_rows(5, 4, 4);
  const Matrix s = random_rows(4, 4, 5);

  for (bool surrogates : {true, false}) {
    Graph g;
    g.set_surrogate_gradients(surrogates);
    Var sv = g.parameter(s);
    const Inference inf = infer(g.constant(xc), g.constant(xd), &sv, store);
    for (std::size_t i = 0; i < 5; ++i) {
      const auto d = domain_similarity(&s, xd.row(i), store.domain_protos);
      CHECK(inf.d_star[i] == select_domain(d));
      const auto grp = static_cast<std::size_t>(inf.d_star[i]);
      Matrix protos(2, 4);
      for (int k = 0; k < 2; ++k) {
        auto src = store.class_proto(grp, k);
        std::copy(src.begin(), src.end(), protos.row(static_cast<std::size_t>(k)).begin());
      }
      const auto l = class_inference(xc.row(i), protos, std::vector<double>{1, 1});
      CHECK(inf.l.value()(i, 0) == l[0]);
      CHECK(inf.l.value()(i, 1) == l[1]);
    }
    // Push l's first column up; only the straight-through path reaches S.
    Matrix w(5, 2);
    for (std::size_t i = 0; i < 5; ++i) w(i, 0) = 1.0;
    g.backward(sum(mul(inf.l, g.constant(w))));
    double norm = 0.0;
    for (double v : g.grad(sv).data()) norm += std::abs(v);
    if (surrogates) {
      CHECK(norm > 0.0);
    } else {
      CHECK(norm == 0.0);
    }
  }
}

TEST_CASE("pooled stores ignore the selected domain") {
  PrototypeStore store;
  store.n_classes = 3;
  store.pooled = true;
  store.domain_protos = random_rows(4, 3, 1);
  store.class_protos = random_rows(3, 3, 2);
  store.class_mask = {1, 1, 1};
  Graph g;
  const Matrix xc = random_rows(6, 3, 3);
  const Inference inf = infer(g.constant(xc), g.constant(random_rows(6, 3, 4)), nullptr, store);
  for (std::size_t i = 0; i < 6; ++i) {
    const auto l = class_inference(xc.row(i), store.class_protos, store.class_mask);
    for (std::size_t k = 0; k < 3; ++k) CHECK(inf.l.value()(i, k) == l[k]);
  }
}

namespace {

struct Trained {
  Dataset data;
  SourceDomainSet source;
  TrainResult result;
};

const Trained& trained_model() {
  static const Trained t = [] {
    SynthConfig cfg;
    cfg.n_subjects = 4;
    cfg.samples_per_class = 20;
    cfg.feature_dim = 24;
    cfg.latent_dim = 8;
    cfg.noise = 0.0;
    Trained out;
    out.data = synth_gen(cfg, 31);
    out.source = make_source_set(out.data.samples, 3, 24, DomainKey::kSubject);
    TrainConfig tc;
    tc.epochs = 20;
    tc.batch_size = 32;
    tc.shallow_hidden = 32;
    tc.hidden = 16;
    tc.seed = 5;
    out.result = train(tc, out.source);
    return out;
  }();
  return t;
}

}  // namespace

TEST_CASE("a target subject sharing a source offset with no noise is classified perfectly") {
  const Trained& t = trained_model();
  // Same generator, same seed: subject 2's samples are the target, relabelled
  // as an unseen subject. With sigma = 0 each one coincides with its class
  // prototype in its own domain, so the nearest-prototype answer is its label.
  std::vector<Sample> target;
  for (const auto& s : t.data.samples) {
    if (s.subject != 2) continue;
    Sample c = s;
    c.subject = 99;
    target.push_back(c);
  }
  const auto pred = predict(t.result.params, t.result.store, target);
  long correct = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    correct += pred[i] == target[i].label;
    CHECK(pred[i] >= 0);
    CHECK(pred[i] <= 2);
  }
  CHECK(correct == static_cast<long>(target.size()));
}

TEST_CASE("permuting the domain order leaves predictions unchanged") {
  const Trained& t = trained_model();
  const PrototypeStore& a = t.result.store;
  PrototypeStore b = a;
  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  for (std::size_t n = 0; n < 4; ++n) {
    std::copy(a.domain_protos.row(perm[n]).begin(), a.domain_protos.row(perm[n]).end(), b.domain_protos.row(n).begin());
    for (int k = 0; k < 3; ++k) {
      const std::size_t dst = n * 3 + static_cast<std::size_t>(k);
      const std::size_t src = perm[n] * 3 + static_cast<std::size_t>(k);
      std::copy(a.class_protos.row(src).begin(), a.class_protos.row(src).end(), b.class_protos.row(dst).begin());
      b.class_mask[dst] = a.class_mask[src];
    }
  }
  const Embeddings emb = embed(t.result.params, t.data.samples);
  CHECK(predict(t.result.params, a, emb) == predict(t.result.params, b, emb));

  Graph ga, gb;
  Var sa = ga.constant(t.result.params.s), sb = gb.constant(t.result.params.s);
  const auto ia = infer(ga.constant(emb.x_c), ga.constant(emb.x_d), &sa, a);
  const auto ib = infer(gb.constant(emb.x_c), gb.constant(emb.x_d), &sb, b);
  for (std::size_t i = 0; i < ia.d_star.size(); ++i)
    CHECK(perm[static_cast<std::size_t>(ib.d_star[i])] == static_cast<std::size_t>(ia.d_star[i]));
}

TEST_CASE("embedding and prototype exports") {
  const Trained& t = trained_model();
  const Embeddings emb = embed(t.result.params, t.source.samples);
  std::vector<EmbeddingRow> rows;
  for (std::size_t i = 0; i < t.source.samples.size(); ++i) {
    rows.push_back({t.source.samples[i].id, t.source.domain_ids[i], "source", emb.x_d.row(i), emb.x_c.row(i)});
  }
  const auto dir = std::filesystem::temp_directory_path() / "pldcp_proto_test";
  write_embeddings(dir / "embeddings.csv", rows);
  write_prototypes(dir / "prototypes.csv", t.result.store);
  const std::string text = io::read_file(dir / "embeddings.csv");
  CHECK(std::count(text.begin(), text.end(), '\n') == static_cast<long>(rows.size() + 1));
  CHECK(text.rfind("sample_id,domain_id,split,xd_0", 0) == 0);
  const auto first_row = io::split(text.substr(text.find('\n') + 1, text.find('\n', text.find('\n') + 1) - text.find('\n') - 1), ',');
  CHECK(first_row.size() == 3 + 2 * 16);
  const std::string protos = io::read_file(dir / "prototypes.csv");
  CHECK(std::count(protos.begin(), protos.end(), '\n') == 1 + 4 + 4 * 3);

  const PrototypeStore back = store_from_json(store_to_json(t.result.store));
  CHECK(back.domain_protos == t.result.store.domain_protos);
  CHECK(back.class_protos == t.result.store.class_protos);
  CHECK(back.class_mask == t.result.store.class_mask);
  std::filesystem::remove_all(dir);
}
