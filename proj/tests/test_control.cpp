#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <set>
#include <vector>

#include "gradctrl/classifier.hpp"
#include "gradctrl/control.hpp"
#include "gradctrl/errors.hpp"
#include "gradctrl/synthworld.hpp"
#include "support/oracles.hpp"

using namespace gradctrl;

namespace {

Vector random_values(Rng& rng, std::size_t n) {
  Vector v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

std::vector<double> block_weights(std::size_t dim, std::size_t begin, std::size_t end, double w) {
  std::vector<double> out(dim, 0.0);
  for (std::size_t i = begin; i < end; ++i) out[i] = w;
  return out;
}

/// Fixture on the default world: near-linear probe classifiers for gender
/// (which leaks into the smile block) and smile.
class ProbeWorld : public ::testing::Test {
 protected:
  void SetUp() override {
    gender_block = world.blocks[0];
    smile_block = world.blocks[1];
    auto gender_w = block_weights(world.dim, gender_block.begin, gender_block.end, 0.1);
    for (std::size_t i = smile_block.begin; i < smile_block.end; ++i) gender_w[i] = 0.05;
    // Smile saliency decreases channel by channel inside its block, then
    // continues at a lower level across the rest of the latent.
    std::vector<double> smile_w(world.dim, 0.0);
    for (std::size_t i = 0; i < world.dim; ++i) {
      const bool own = i >= smile_block.begin && i < smile_block.end;
      smile_w[i] = own ? 1.0 - 0.001 * static_cast<double>(i - smile_block.begin)
                       : 1e-3 * (1.0 + static_cast<double>(i) / 1024.0);
    }
    clfs.push_back(oracle::linear_probe(AttributeSpec::binary("gender"), world.dim, {gender_w}));
    clfs.push_back(oracle::linear_probe(AttributeSpec::binary("smile"), world.dim, {smile_w}));
    observers = {observe(clfs[0]), observe(clfs[1])};
  }

  const AttributeClassifier& gender() const { return clfs[0]; }
  std::span<const AttributeClassifier> entangled() const { return {clfs.data() + 1, 1}; }

  WorldSpec world = default_world();
  ChannelBlock gender_block, smile_block;
  std::vector<AttributeClassifier> clfs;
  std::vector<Observer> observers;
};

}  // namespace

TEST(Saliency, Examples) {
  EXPECT_EQ(saliency(Vector{-3, 0, 2}), (Vector{3, 0, 2}));
  EXPECT_TRUE(saliency(Vector(9)).all_zero());
  Rng rng(1);
  const Vector n = random_values(rng, 64);
  const Vector s = saliency(n);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(s[i], std::fabs(n[i]));
}

TEST(TopCDims, Examples) {
  EXPECT_EQ(top_c_dims(Vector{1, 5, 3}, 1), (std::vector<std::size_t>{1}));
  EXPECT_EQ(top_c_dims(Vector{2, 2, 1}, 1), (std::vector<std::size_t>{0, 1}));
  EXPECT_TRUE(top_c_dims(Vector{2, 2, 1}, 0).empty());
  EXPECT_EQ(top_c_dims(Vector{2, 2, 1}, 3), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_THROW(top_c_dims(Vector{2, 2, 1}, 4), RangeError);
}

TEST(TopCDims, MatchesFullSortOracle) {
  Rng rng(2);
  const Vector l = saliency(random_values(rng, 512));
  EXPECT_EQ(top_c_dims(l, 100), oracle::top_c(l.values(), 100));
}

TEST(TopCDims, SizeProperties) {
  Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng.below(64);
    const bool tied = trial % 2 == 1;
    Vector l(n);
    for (double& x : l) x = tied ? static_cast<double>(rng.below(4)) : rng.uniform();
    const std::size_t c = rng.below(n + 1);
    const auto dims = top_c_dims(l, c);
    EXPECT_EQ(dims, oracle::top_c(l.values(), c));
    EXPECT_TRUE(std::is_sorted(dims.begin(), dims.end()));
    if (c >= 1) EXPECT_GE(dims.size(), c);
    if (!tied) EXPECT_EQ(dims.size(), c);
  }
}

TEST(DisentangledDirection, EmptyEntangledListReturnsRawGradient) {
  Rng rng(4);
  const auto clf = AttributeClassifier::random(AttributeSpec::binary("t"), 20, 6, rng);
  const Vector z = gaussian_sample(rng, 20);
  DisentangleSpec spec{"t", 0, {}};
  EXPECT_EQ(disentangled_direction(z, clf, 0, {}, spec), gradient_row(clf, z, 0));
}

TEST(DisentangledDirection, FullCountZeroesEverything) {
  Rng rng(5);
  std::vector<AttributeClassifier> clfs;
  clfs.push_back(AttributeClassifier::random(AttributeSpec::binary("t"), 20, 6, rng));
  clfs.push_back(AttributeClassifier::random(AttributeSpec::binary("e"), 20, 6, rng));
  const Vector z = gaussian_sample(rng, 20);
  DisentangleSpec spec{"t", 0, {{"e", 20}}};
  EXPECT_TRUE(disentangled_direction(z, clfs[0], 0, {clfs.data() + 1, 1}, spec).all_zero());
}

TEST(DisentangledDirection, Errors) {
  Rng rng(6);
  const auto t = AttributeClassifier::random(AttributeSpec::binary("t"), 20, 6, rng);
  const std::vector<AttributeClassifier> wide{
      AttributeClassifier::random(AttributeSpec::binary("e"), 21, 6, rng)};
  const std::vector<AttributeClassifier> ok{
      AttributeClassifier::random(AttributeSpec::binary("e"), 20, 6, rng)};
  const Vector z = gaussian_sample(rng, 20);
  EXPECT_THROW(disentangled_direction(z, t, 0, wide, {"t", 0, {{"e", 5}}}), DimensionError);
  EXPECT_THROW(disentangled_direction(z, t, 0, ok, {"t", 0, {{"e", 21}}}), RangeError);
  EXPECT_THROW(disentangled_direction(z, t, 0, ok, {"t", 0, {{"t", 5}}}), RangeError);
  EXPECT_THROW(disentangled_direction(z, t, 0, ok, {"t", 0, {{"missing", 5}}}), LookupError);
}

TEST(DisentangledDirection, MaskingExactnessAndUnionAgainstBruteForce) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t dim = 4 + rng.below(40);
    std::vector<AttributeClassifier> clfs;
    clfs.push_back(AttributeClassifier::random(AttributeSpec::binary("t"), dim, 5, rng));
    DisentangleSpec spec{"t", 0, {}};
    const std::size_t entangled = rng.below(4);
    for (std::size_t e = 0; e < entangled; ++e) {
      const std::string id = "e" + std::to_string(e);
      clfs.push_back(e == 2 ? AttributeClassifier::random(
                                  AttributeSpec::multiclass(id, {"a", "b", "c"}), dim, 5, rng)
                            : AttributeClassifier::random(AttributeSpec::binary(id), dim, 5, rng));
      spec.entangled.push_back({id, rng.below(dim + 1)});
    }
    const Vector z = gaussian_sample(rng, dim);
    const std::span<const AttributeClassifier> others(clfs.data() + 1, clfs.size() - 1);

    std::set<std::size_t> union_oracle;
    for (std::size_t e = 0; e < entangled; ++e) {
      const Matrix jac = input_jacobian(clfs[e + 1], z);
      std::vector<double> sal(dim, 0.0);
      for (std::size_t r = 0; r < jac.rows(); ++r) {
        for (std::size_t i = 0; i < dim; ++i) sal[i] = std::max(sal[i], std::fabs(jac(r, i)));
      }
      for (std::size_t i : oracle::top_c(sal, spec.entangled[e].count)) union_oracle.insert(i);
    }
    const auto excluded = excluded_dims(z, others, spec);
    EXPECT_EQ(excluded, std::vector<std::size_t>(union_oracle.begin(), union_oracle.end()));

    const Vector raw = gradient_row(clfs[0], z, 0);
    const Vector masked = disentangled_direction(z, clfs[0], 0, others, spec);
    for (std::size_t i = 0; i < dim; ++i) {
      if (union_oracle.count(i)) {
        EXPECT_EQ(masked[i], 0.0);
        EXPECT_FALSE(std::signbit(masked[i]));
      } else {
        EXPECT_EQ(std::bit_cast<std::uint64_t>(masked[i]), std::bit_cast<std::uint64_t>(raw[i]));
      }
    }
  }
}

TEST(DisentangledDirection, AddingAnEntangledAttributeNeverShrinksE) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<AttributeClassifier> clfs;
    DisentangleSpec spec{"t", 0, {}};
    for (int e = 0; e < 4; ++e) {
      clfs.push_back(
          AttributeClassifier::random(AttributeSpec::binary("e" + std::to_string(e)), 30, 4, rng));
    }
    const Vector z = gaussian_sample(rng, 30);
    std::vector<std::size_t> previous;
    for (int e = 0; e < 4; ++e) {
      spec.entangled.push_back({"e" + std::to_string(e), rng.below(31)});
      const auto now = excluded_dims(z, clfs, spec);
      EXPECT_TRUE(std::includes(now.begin(), now.end(), previous.begin(), previous.end()));
      previous = now;
    }
  }
}

TEST_F(ProbeWorld, BlockSizedExclusionZeroesExactlyTheConfoundBlock) {
  Rng rng(9);
  DisentangleSpec spec{"gender", 0, {{"smile", smile_block.size()}}};
  for (int trial = 0; trial < 20; ++trial) {
    const Vector z = sample_latent(world, rng);
    const Vector raw = gradient_row(gender(), z, 0);
    const Vector masked = disentangled_direction(z, gender(), 0, entangled(), spec);
    for (std::size_t i = 0; i < world.dim; ++i) {
      const bool in_smile = i >= smile_block.begin && i < smile_block.end;
      if (in_smile) {
        EXPECT_EQ(masked[i], 0.0);
      } else {
        EXPECT_EQ(masked[i], raw[i]);
      }
    }
    // Oracle smile-score change per unit step along each normalized direction.
    const Vector smile_grad = oracle_gradient(world, "smile", z);
    const double leak_raw = std::fabs(dot(smile_grad, raw)) / l2_norm(raw);
    const double leak_masked = std::fabs(dot(smile_grad, masked)) / l2_norm(masked);
    EXPECT_GT(leak_raw, 0.01);
    EXPECT_LT(leak_masked, leak_raw);
    EXPECT_EQ(leak_masked, 0.0);
  }
}

TEST(Step, UnitBasisMovesByAlpha) {
  StepPolicy policy;
  EXPECT_EQ(policy.alpha, 0.6);
  const Vector z{0, 2, 3, 4};
  EXPECT_EQ(step(z, Vector::basis(4, 0), policy), (Vector{0.6, 2, 3, 4}));
  policy.alpha = -0.6;
  EXPECT_EQ(step(z, Vector{5, 0, 0, 0}, policy), (Vector{-0.6, 2, 3, 4}));
}

TEST(Step, DimMaskThatRemovesTheDirectionIsVanishing) {
  StepPolicy policy;
  policy.dim_mask = std::vector<std::size_t>{0};
  EXPECT_THROW(step(Vector(3), Vector::basis(3, 1), policy), VanishingGradientError);
  EXPECT_THROW(step(Vector(3), Vector(3), StepPolicy{}), VanishingGradientError);
  const Vector moved = step(Vector(3), Vector{3, 4, 0}, policy);
  EXPECT_EQ(moved, (Vector{0.6, 0, 0}));
}

TEST(Step, RawModeIsLiteralAddition) {
  StepPolicy policy;
  policy.normalize = false;
  policy.alpha = 1.0;
  const Vector z{0.5, -1, 2}, n{3, 4, -5};
  EXPECT_EQ(step(z, n, policy), z + n);
}

TEST(Step, InvalidPolicyAndShapes) {
  StepPolicy policy;
  EXPECT_THROW(step(Vector(3), Vector(4), policy), DimensionError);
  policy.alpha = 0.0;
  EXPECT_THROW(step(Vector(3), Vector{1, 0, 0}, policy), RangeError);
  policy.alpha = 0.6;
  policy.dim_mask = std::vector<std::size_t>{3};
  EXPECT_THROW(step(Vector(3), Vector{1, 0, 0}, policy), RangeError);
}

TEST_F(ProbeWorld, StartPastBoundaryStopsImmediately) {
  Vector z(world.dim);
  for (std::size_t i = gender_block.begin; i < gender_block.end; ++i) z[i] = 1.0;
  const Trajectory t =
      manipulate(z, gender(), 0, {}, {"gender", 0, {}}, StepPolicy{}, observers);
  EXPECT_EQ(t.steps.size(), 1u);
  EXPECT_EQ(t.stop_reason, StopReason::boundary_crossed);
}

TEST_F(ProbeWorld, MaxStepsRecordsEveryState) {
  Vector z(world.dim);
  for (std::size_t i = gender_block.begin; i < gender_block.end; ++i) z[i] = -40.0;
  StepPolicy policy;
  policy.max_steps = 5;
  const Trajectory t = manipulate(z, gender(), 0, {}, {"gender", 0, {}}, policy, observers);
  EXPECT_EQ(t.steps.size(), 6u);
  EXPECT_EQ(t.stop_reason, StopReason::max_steps);
  EXPECT_EQ(t.steps.front().z, z);
}

TEST_F(ProbeWorld, TargetLogitRisesMonotonicallyTowardTarget) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    Vector z = sample_latent(world, rng);
    for (std::size_t i = gender_block.begin; i < gender_block.end; ++i) z[i] = -1.0;
    const double start = forward(gender(), z)[0];
    ASSERT_LT(start, 0.0);
    const Trajectory t =
        manipulate(z, gender(), 0, entangled(), {"gender", 0, {{"smile", 100}}}, StepPolicy{},
                   observers);
    EXPECT_EQ(t.stop_reason, StopReason::boundary_crossed);
    for (std::size_t s = 1; s < t.steps.size(); ++s) {
      EXPECT_GT(t.steps[s].logits.at("gender")[0], t.steps[s - 1].logits.at("gender")[0]);
    }
    EXPECT_GT(t.steps.back().logits.at("gender")[0], 0.0);
  }
}

TEST_F(ProbeWorld, NegativeAlphaDrivesLogitBelowZero) {
  Vector z(world.dim);
  for (std::size_t i = gender_block.begin; i < gender_block.end; ++i) z[i] = 0.2;
  StepPolicy policy;
  policy.alpha = -0.6;
  const Trajectory t = manipulate(z, gender(), 0, {}, {"gender", 0, {}}, policy, observers);
  EXPECT_EQ(t.stop_reason, StopReason::boundary_crossed);
  EXPECT_LT(t.steps.back().logits.at("gender")[0], 0.0);
}

TEST_F(ProbeWorld, ManipulateArgumentErrors) {
  const Vector z(world.dim);
  EXPECT_THROW(manipulate(Vector(3), gender(), 0, {}, {"gender", 0, {}}, {}, observers),
               DimensionError);
  EXPECT_THROW(manipulate(z, gender(), 1, {}, {"gender", 0, {}}, {}, observers), IndexError);
  const std::vector<Observer> smile_only{observers[1]};
  EXPECT_THROW(manipulate(z, gender(), 0, {}, {"gender", 0, {}}, {}, smile_only), LookupError);
  StepPolicy zero_steps;
  zero_steps.max_steps = 0;
  EXPECT_THROW(manipulate(z, gender(), 0, {}, {"gender", 0, {}}, zero_steps, observers),
               RangeError);
}

TEST_F(ProbeWorld, FrozenMaskNeverTouchesInitialExclusions) {
  Rng rng(11);
  const Vector z0 = sample_latent(world, rng);
  DisentangleSpec spec{"gender", 0, {{"smile", 50}}, MaskMode::frozen};
  const auto e0 = excluded_dims(z0, entangled(), spec);
  StepPolicy policy;
  policy.stop_on_boundary = false;
  policy.max_steps = 8;
  const Trajectory t = manipulate(z0, gender(), 0, entangled(), spec, policy, observers);
  ASSERT_EQ(t.steps.size(), 9u);
  for (std::size_t i : e0) EXPECT_EQ(t.steps.back().z[i], z0[i]);
}

TEST(Manipulate, StepLengthEqualsAlphaAndAscentIsFirstOrder) {
  // Trained classifiers on the default world give a genuinely nonlinear field.
  const WorldSpec world = default_world();
  Rng data_rng(12);
  TrainConfig cfg;
  cfg.seed = 5;
  std::vector<AttributeClassifier> clfs;
  for (const char* id : {"age", "glasses"}) {
    const auto data = make_training_set(world, id, 30, data_rng);
    clfs.push_back(train(data, world.attribute(id).spec(), cfg).classifier);
  }
  const std::vector<Observer> observers{observe(clfs[0]), observe(clfs[1])};
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const Vector z0 = sample_latent(world, rng);
    StepPolicy policy;
    policy.alpha = trial % 2 == 0 ? 0.6 : -0.6;
    policy.max_steps = 30;
    policy.stop_on_boundary = false;
    for (std::size_t count : {0u, 100u}) {
      const DisentangleSpec spec{"age", 0, {{"glasses", count}}};
      const Trajectory t = manipulate(z0, clfs[0], 0, {clfs.data() + 1, 1}, spec, policy,
                                      observers);
      ASSERT_EQ(t.steps.size(), 31u);
      for (std::size_t s = 1; s < t.steps.size(); ++s) {
        EXPECT_NEAR(l2_norm(t.steps[s].z - t.steps[s - 1].z), 0.6, 1e-10);
      }
      for (const auto& st : t.steps) {
        const Vector g = gradient_row(clfs[0], st.z, 0);
        const Vector d = disentangled_direction(st.z, clfs[0], 0, {clfs.data() + 1, 1}, spec);
        EXPECT_GE(dot(g, d), 0.0);
      }
    }
  }
}

TEST_F(ProbeWorld, SweepGridZeroMatchesUnmaskedManipulate) {
  Rng rng(14);
  const Vector z0 = sample_latent(world, rng);
  const DisentangleSpec spec{"gender", 0, {{"smile", 100}}};
  const std::vector<CountAssignment> grid{{0}};
  const auto runs =
      sweep_exclusion_counts(z0, gender(), 0, entangled(), spec, grid, StepPolicy{}, observers);
  const Trajectory plain =
      manipulate(z0, gender(), 0, {}, {"gender", 0, {}}, StepPolicy{}, observers);
  ASSERT_EQ(runs.size(), 1u);
  const Trajectory& swept = runs.at({0});
  ASSERT_EQ(swept.steps.size(), plain.steps.size());
  for (std::size_t s = 0; s < plain.steps.size(); ++s) EXPECT_EQ(swept.steps[s].z, plain.steps[s].z);
  EXPECT_EQ(swept.stop_reason, plain.stop_reason);
}

TEST_F(ProbeWorld, SweepFullCountVanishes) {
  Rng rng(15);
  const Vector z0 = sample_latent(world, rng);
  const DisentangleSpec spec{"gender", 0, {{"smile", 100}}};
  const std::vector<std::size_t> counts{0, world.dim};
  const auto grid = uniform_count_grid(counts, 1);
  StepPolicy policy;
  if (forward(gender(), z0)[0] > 0.0) policy.alpha = -policy.alpha;
  const auto runs =
      sweep_exclusion_counts(z0, gender(), 0, entangled(), spec, grid, policy, observers);
  ASSERT_EQ(runs.size(), 2u);
  EXPECT_EQ(runs.at({world.dim}).stop_reason, StopReason::vanishing_gradient);
  EXPECT_EQ(runs.at({world.dim}).steps.size(), 1u);
  EXPECT_NE(runs.at({0}).stop_reason, StopReason::vanishing_gradient);
  const std::vector<CountAssignment> bad{{1, 2}};
  EXPECT_THROW(
      sweep_exclusion_counts(z0, gender(), 0, entangled(), spec, bad, StepPolicy{}, observers),
      DimensionError);
}

TEST_F(ProbeWorld, SweepConfoundDriftIsNonIncreasing) {
  Rng rng(16);
  const DisentangleSpec spec{"gender", 0, {{"smile", 100}}};
  const std::vector<std::size_t> counts{50, 100, 150, 200, 250};
  const auto grid = uniform_count_grid(counts, 1);
  std::vector<double> drift(counts.size(), 0.0);
  for (int trial = 0; trial < 20; ++trial) {
    Vector z0 = sample_latent(world, rng);
    for (std::size_t i = gender_block.begin; i < gender_block.end; ++i) z0[i] = -1.0;
    const auto runs =
        sweep_exclusion_counts(z0, gender(), 0, entangled(), spec, grid, StepPolicy{}, observers);
    for (std::size_t k = 0; k < counts.size(); ++k) {
      const Trajectory& t = runs.at(grid[k]);
      drift[k] += std::fabs(oracle_score(world, "smile", t.steps.back().z)[0] -
                            oracle_score(world, "smile", t.steps.front().z)[0]);
    }
  }
  EXPECT_GT(drift[0], 0.0);
  for (std::size_t k = 1; k < counts.size(); ++k) EXPECT_LE(drift[k], drift[k - 1]) << counts[k];
}

TEST(Locality, DirectionsDifferAcrossLatents) {
  const WorldSpec world = default_world();
  Rng data_rng(17);
  TrainConfig cfg;
  cfg.seed = 1;
  const auto clf =
      train(make_training_set(world, "age", 30, data_rng), world.attribute("age").spec(), cfg)
          .classifier;
  Rng rng(18);
  int non_parallel = 0;
  for (int pair = 0; pair < 50; ++pair) {
    const Vector a = gradient_row(clf, sample_latent(world, rng), 0);
    const Vector b = gradient_row(clf, sample_latent(world, rng), 0);
    if (dot(a, b) / (l2_norm(a) * l2_norm(b)) < 0.999) ++non_parallel;
  }
  EXPECT_GT(non_parallel, 0);
}

TEST(TrajectoryJsonl, RoundTripAndLayout) {
  Trajectory t;
  t.target_attr = "color";
  t.target_class = 2;
  t.stop_reason = StopReason::boundary_crossed;
  t.steps.push_back({Vector{0.25, -1.5}, {{"color", Vector{1, 2, 3, 4}}, {"age", Vector{0.5}}}});
  t.steps.push_back({Vector{0.5, -1.0}, {{"color", Vector{0, 2, 5, 1}}, {"age", Vector{-0.1}}}});
  const std::string text = trajectory_to_jsonl(t);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
  EXPECT_EQ(text.rfind("{\"step\":0,\"z\":[0.25,-1.5],\"logits\":{", 0), 0u);
  EXPECT_NE(text.find("{\"stop_reason\":\"boundary_crossed\""), std::string::npos);
  const Trajectory back = trajectory_from_jsonl(text);
  EXPECT_EQ(back.target_attr, "color");
  EXPECT_EQ(back.target_class, 2u);
  EXPECT_EQ(back.stop_reason, StopReason::boundary_crossed);
  ASSERT_EQ(back.steps.size(), 2u);
  EXPECT_EQ(back.steps[1].z, t.steps[1].z);
  EXPECT_EQ(back.steps[1].logits.at("color"), t.steps[1].logits.at("color"));
  EXPECT_EQ(trajectory_to_jsonl(back), text);
}

TEST(TrajectoryJsonl, RejectsMalformedInput) {
  EXPECT_THROW(trajectory_from_jsonl(""), Error);
  EXPECT_THROW(trajectory_from_jsonl("{\"step\":0,\"z\":[1],\"logits\":{}}\n"), Error);
  EXPECT_THROW(trajectory_from_jsonl("not json\n{\"stop_reason\":\"max_steps\"}\n"), Error);
  EXPECT_THROW(parse_stop_reason("sideways"), FormatError);
  for (StopReason r :
       {StopReason::boundary_crossed, StopReason::max_steps, StopReason::vanishing_gradient}) {
    EXPECT_EQ(parse_stop_reason(to_string(r)), r);
  }
}
