#include <benchmark/benchmark.h>

#include <random>

#include "pldcp/objectives.hpp"
#include "pldcp/prototypes.hpp"
#include "pldcp/trainer.hpp"

using namespace pldcp;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = g(rng);
  return m;
}

// Reference synthetic set with one subject held out, shared by the model benchmarks.
const SourceDomainSet& source() {
  static const SourceDomainSet set = [] {
    const Dataset d = synth_gen(SynthConfig{}, 2024);
    std::vector<Sample> s;
    for (const auto& x : d.samples)
      if (x.subject != 10) s.push_back(x);
    return make_source_set(std::move(s), 3, 310, DomainKey::kSubject);
  }();
  return set;
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto m = static_cast<std::size_t>(state.range(2));
  const Matrix a = random_matrix(n, k, 1);
  const Matrix b = random_matrix(k, m, 2);
  for (auto _ : state) benchmark::DoNotOptimize(la::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<long long>(2 * n * k * m));
}
BENCHMARK(BM_Matmul)->Args({96, 310, 128})->Args({96, 128, 128})->Args({1620, 64, 64})->Args({256, 256, 256});

static void BM_MatmulTN(benchmark::State& state) {
  const Matrix a = random_matrix(96, 310, 1);
  const Matrix b = random_matrix(96, 128, 2);
  for (auto _ : state) benchmark::DoNotOptimize(la::matmul_tn(a, b));
}
BENCHMARK(BM_MatmulTN);

// One optimisation step's worth of work: forward, objective and backward on a batch.
static void BM_TrainStep(benchmark::State& state) {
  const auto batch_size = static_cast<std::size_t>(state.range(0));
  const SourceDomainSet& src = source();
  TrainConfig cfg;
  const ModelParams p = initial_params(cfg, src);
  const PrototypeStore store = build_store(p, src, false);
  Batch b;
  b.x = Matrix(batch_size, 310);
  for (std::size_t i = 0; i < batch_size; ++i) {
    const std::size_t k = (i * 17) % src.samples.size();
    std::copy(src.samples[k].features.begin(), src.samples[k].features.end(), b.x.row(i).begin());
    b.labels.push_back(src.samples[k].label);
    b.domains.push_back(src.domain_ids[k]);
    b.ids.push_back(k);
  }
  const ObjectiveOptions opt = ablation_apply(cfg).objective;
  for (auto _ : state) {
    Graph g;
    const Objective obj = total_objective(bind(g, p, true), b, store, opt);
    g.backward(obj.total);
    benchmark::DoNotOptimize(obj.breakdown.total);
  }
}
BENCHMARK(BM_TrainStep)->Arg(32)->Arg(96);

static void BM_BuildStore(benchmark::State& state) {
  const SourceDomainSet& src = source();
  const ModelParams p = initial_params(TrainConfig{}, src);
  for (auto _ : state) benchmark::DoNotOptimize(build_store(p, src, false));
}
BENCHMARK(BM_BuildStore)->Unit(benchmark::kMillisecond);

static void BM_Predict(benchmark::State& state) {
  const SourceDomainSet& src = source();
  const ModelParams p = initial_params(TrainConfig{}, src);
  const PrototypeStore store = build_store(p, src, false);
  const Dataset d = synth_gen(SynthConfig{}, 2024);
  std::vector<Sample> target;
  for (const auto& x : d.samples)
    if (x.subject == 10) target.push_back(x);
  for (auto _ : state) benchmark::DoNotOptimize(predict(p, store, target));
  state.SetItemsProcessed(state.iterations() * static_cast<long long>(target.size()));
}
BENCHMARK(BM_Predict)->Unit(benchmark::kMillisecond);

static void BM_TrainEpochs(benchmark::State& state) {
  const SourceDomainSet& src = source();
  TrainConfig cfg;
  cfg.epochs = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(train(cfg, src).store.class_protos);
}
BENCHMARK(BM_TrainEpochs)->Arg(2)->Unit(benchmark::kMillisecond)->Iterations(3);

BENCHMARK_MAIN();
