#include <vector>

#include <benchmark/benchmark.h>

#include "gffm/analytic_oracle.hpp"
#include "gffm/datasets.hpp"
#include "gffm/eval_bench.hpp"
#include "gffm/flow_train.hpp"
#include "gffm/sampler.hpp"
#include "gffm/velocity_model.hpp"

using namespace gffm;

namespace {

ModelArch arch(int hidden) {
  ModelArch a;
  a.hidden = hidden;
  a.depth = 3;
  return a;
}

std::vector<Condition> labels(int n) {
  std::vector<Condition> c;
  for (int j = 0; j < n; ++j) c.push_back(Condition{j % 8, std::nullopt});
  return c;
}

Dataset ring_data() {
  DatasetSpec s;
  s.mixture = GaussianMixtureSpec::ring(8, 2, 4.0, 0.16);
  s.n_items = 4096;
  return make_mixture_dataset(s);
}

}  // namespace

static void BM_Forward(benchmark::State& state) {
  const ModelArch a = arch(static_cast<int>(state.range(0)));
  const VelocityModel m = init_params(1, a);
  const int batch = static_cast<int>(state.range(1));
  Rng rng(2);
  const Eigen::MatrixXd x = rng.normal_matrix(2, batch);
  const Eigen::VectorXd t = Eigen::VectorXd::Constant(batch, 0.5);
  const std::vector<Condition> c = labels(batch);
  for (auto _ : state) benchmark::DoNotOptimize(m.forward(x, t, c));
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_Forward)->Args({64, 128})->Args({256, 128})->Args({64, 2048});

static void BM_LossAndBackward(benchmark::State& state) {
  const ModelArch a = arch(64);
  const VelocityModel m = init_params(1, a);
  const Dataset ds = ring_data();
  const bool mg = state.range(0) != 0;
  Rng rng(3);
  const LossBatch batch = draw_loss_batch(std::span<const DataItem>(ds).first(128), rng, 0.2, 0.3);
  for (auto _ : state) {
    ad::Tape tape;
    const ModelVars vars = bind(tape, m);
    const ad::Var loss = mg ? mg_cfm_loss(tape, vars, a, batch, 0.7, true) : cfm_loss(tape, vars, a, batch);
    benchmark::DoNotOptimize(tape.backward(loss));
  }
}
BENCHMARK(BM_LossAndBackward)->Arg(0)->Arg(1)->ArgNames({"mg"});

static void BM_Train200Steps(benchmark::State& state) {
  const ModelArch a = arch(64);
  const Dataset ds = ring_data();
  TrainConfig cfg;
  cfg.loss_kind = state.range(0) ? LossKind::MgCfm : LossKind::Cfm;
  cfg.total_steps = 200;
  cfg.warmup_steps = 10;
  for (auto _ : state) benchmark::DoNotOptimize(train(cfg, a, ds).record.steps.size());
}
BENCHMARK(BM_Train200Steps)->Arg(0)->Arg(1)->ArgNames({"mg"})->Unit(benchmark::kMillisecond);

static void BM_SampleNfe32(benchmark::State& state) {
  const ModelArch a = arch(64);
  const VelocityModel m = init_params(1, a);
  const std::vector<Condition> c = labels(1024);
  SamplerConfig cfg;
  cfg.cfg_enabled = state.range(0) != 0;
  for (auto _ : state) benchmark::DoNotOptimize(sample_batch(m, c, cfg).x.sum());
  state.SetItemsProcessed(state.iterations() * 1024);
}
BENCHMARK(BM_SampleNfe32)->Arg(0)->Arg(1)->ArgNames({"cfg"})->Unit(benchmark::kMillisecond);

static void BM_OracleSample(benchmark::State& state) {
  const GaussianMixtureSpec spec = GaussianMixtureSpec::ring(8, 2, 4.0, 0.16);
  const AnalyticField field(spec);
  const std::vector<Condition> c = labels(1024);
  SamplerConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(sample_batch(field, c, cfg).x.sum());
}
BENCHMARK(BM_OracleSample)->Unit(benchmark::kMillisecond);

static void BM_SlicedW2(benchmark::State& state) {
  Rng rng(5);
  const Eigen::MatrixXd a = rng.normal_matrix(2, 2048);
  const Eigen::MatrixXd b = rng.normal_matrix(2, 2048);
  for (auto _ : state) {
    Rng proj(6);
    benchmark::DoNotOptimize(sliced_wasserstein(a, b, 128, proj));
  }
}
BENCHMARK(BM_SlicedW2)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
