#include <benchmark/benchmark.h>

#include <string>
#include <vector>

#include "gradctrl/classifier.hpp"
#include "gradctrl/control.hpp"
#include "gradctrl/synthworld.hpp"

using namespace gradctrl;

namespace {

AttributeClassifier make_clf(std::size_t dim, std::size_t classes, std::uint64_t seed,
                             const std::string& id = "t") {
  Rng rng(seed);
  auto attr = classes == 1 ? AttributeSpec::binary(id)
                           : AttributeSpec::multiclass(id, {"c0", "c1", "c2", "c3"});
  return AttributeClassifier::random(attr, dim, 32, rng);
}

void BM_Forward(benchmark::State& state) {
  const auto clf = make_clf(state.range(0), 1, 1);
  Rng rng(2);
  const Vector z = gaussian_sample(rng, state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(forward(clf, z));
}
BENCHMARK(BM_Forward)->Arg(64)->Arg(512);

void BM_InputJacobian(benchmark::State& state) {
  const auto clf = make_clf(state.range(0), 4, 1);
  Rng rng(2);
  const Vector z = gaussian_sample(rng, state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(input_jacobian(clf, z));
}
BENCHMARK(BM_InputJacobian)->Arg(64)->Arg(512);

void BM_DisentangledDirection(benchmark::State& state) {
  const std::size_t dim = 512;
  const auto target = make_clf(dim, 1, 1);
  std::vector<AttributeClassifier> entangled;
  DisentangleSpec spec{"t", 0, {}};
  for (std::uint64_t e = 0; e < 3; ++e) {
    const std::string id = "e" + std::to_string(e);
    entangled.push_back(make_clf(dim, 1, 10 + e, id));
    spec.entangled.push_back({id, static_cast<std::size_t>(state.range(0))});
  }
  Rng rng(2);
  const Vector z = gaussian_sample(rng, dim);
  for (auto _ : state) {
    benchmark::DoNotOptimize(disentangled_direction(z, target, 0, entangled, spec));
  }
}
BENCHMARK(BM_DisentangledDirection)->Arg(50)->Arg(250);

void BM_Manipulate(benchmark::State& state) {
  const WorldSpec world = default_world();
  const auto target = make_clf(world.dim, 1, 1);
  const std::vector<AttributeClassifier> entangled{make_clf(world.dim, 1, 3, "e")};
  const DisentangleSpec spec{"t", 0, {{"e", 100}}};
  StepPolicy policy;
  policy.max_steps = 20;
  policy.stop_on_boundary = false;
  Rng rng(2);
  const Vector z0 = sample_latent(world, rng);
  const std::vector<Observer> observers{observe(target)};
  for (auto _ : state) {
    benchmark::DoNotOptimize(manipulate(z0, target, 0, entangled, spec, policy, observers));
  }
}
BENCHMARK(BM_Manipulate);

}  // namespace

BENCHMARK_MAIN();
