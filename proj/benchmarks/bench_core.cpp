#include <benchmark/benchmark.h>

#include "unimask/clustering.hpp"
#include "unimask/finetune.hpp"
#include "unimask/ops.hpp"
#include "unimask/pretrain.hpp"

using namespace unimask;

namespace {

Tensor gaussian(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::matrix(n, d);
  for (double& v : t.storage()) v = rng.normal();
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  const Tensor a = gaussian(n, n, 1), b = gaussian(n, n, 2);
  for (auto _ : state) {
    Graph g;
    benchmark::DoNotOptimize(g.value(ops::matmul(g, g.constant(a), g.constant(b))).data());
  }
  state.SetItemsProcessed(state.iterations() * std::int64_t(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_EncoderForward(benchmark::State& state) {
  const ModelConfig mc;
  const ParamStore p = init_params(mc, 1);
  const auto t = std::size_t(state.range(0));
  const Tensor a = gaussian(t, std::size_t(mc.dim_a), 3), b = gaussian(t, std::size_t(mc.dim_b), 4);
  for (auto _ : state) benchmark::DoNotOptimize(extract_features(p, mc, {&a, &b}).data());
  state.SetItemsProcessed(state.iterations() * std::int64_t(t));
}
BENCHMARK(BM_EncoderForward)->Arg(40)->Arg(120);

void BM_EncoderForwardBackward(benchmark::State& state) {
  const ModelConfig mc;
  const ParamStore p = init_params(mc, 1);
  const auto t = std::size_t(state.range(0));
  const Tensor a = gaussian(t, std::size_t(mc.dim_a), 3), b = gaussian(t, std::size_t(mc.dim_b), 4);
  std::vector<int> targets(t);
  for (std::size_t i = 0; i < t; ++i) targets[i] = int(i % std::size_t(mc.clusters));
  Rng rng(5);
  const MaskSpec mask = sample_mask(t, 0.08, 5, rng);
  for (auto _ : state) {
    Graph g;
    const EncoderOutput enc = encode(g, p, mc, {&a, &b}, mask.indices);
    const MaskedLoss l = masked_prediction_loss(g, cluster_logits(g, p, enc.final), targets, mask);
    benchmark::DoNotOptimize(backward(g, *l.loss, p).size());
  }
  state.SetItemsProcessed(state.iterations() * std::int64_t(t));
}
BENCHMARK(BM_EncoderForwardBackward)->Arg(40)->Arg(120);

void BM_KMeansAssign(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  Codebook cb;
  cb.centroids = gaussian(40, 64, 6);
  const Tensor x = gaussian(n, 64, 7);
  for (auto _ : state) benchmark::DoNotOptimize(assign(cb, x).data());
  state.SetItemsProcessed(state.iterations() * std::int64_t(n));
}
BENCHMARK(BM_KMeansAssign)->Arg(1000)->Arg(10000);

void BM_BeamSearch(benchmark::State& state) {
  const auto beam = std::size_t(state.range(0));
  const StepScorer scorer = [](std::span<const int> prefix) {
    std::vector<double> l(21);
    double z = 0.0;
    for (std::size_t v = 0; v < l.size(); ++v) {
      l[v] = double((prefix.size() * 7 + v * 13) % 11) * 0.3;
      z += std::exp(l[v]);
    }
    for (double& v : l) v -= std::log(z);
    return l;
  };
  const BeamConfig cfg{beam, 1.0, 30, 20, 0, {20}};
  for (auto _ : state) benchmark::DoNotOptimize(beam_search(scorer, cfg).score);
}
BENCHMARK(BM_BeamSearch)->Arg(1)->Arg(4)->Arg(16);

}  // namespace

BENCHMARK_MAIN();
