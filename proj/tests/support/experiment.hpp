#pragma once

// Seeded default-world experiment shared by the eval tests and the
// acceptance runner: one oracle-labeled bank, one trained classifier per
// attribute, and paired masked/unmasked edits from boundary latents.

#include <map>
#include <string>
#include <vector>

#include "gradctrl/classifier.hpp"
#include "gradctrl/control.hpp"
#include "gradctrl/eval.hpp"
#include "gradctrl/synthworld.hpp"

namespace experiment {

inline constexpr std::uint64_t kRootSeed = 2022;
inline constexpr std::uint64_t kTrainSeed = 7;
inline constexpr std::size_t kBankSize = 100000;
inline constexpr double kBoundaryMargin = 0.5;

inline const std::vector<std::string>& binary_attrs() {
  static const std::vector<std::string> ids{"gender", "smile", "glasses", "age"};
  return ids;
}

struct Setup {
  gradctrl::WorldSpec world;
  gradctrl::Bank bank;
  std::map<std::string, gradctrl::AttributeClassifier> clfs;
  std::map<std::string, gradctrl::AttributeStats> stats;  // binary attributes only
};

/// Built once per process.
inline const Setup& setup() {
  static const Setup s = [] {
    Setup out;
    out.world = gradctrl::default_world(kRootSeed);
    gradctrl::Rng rng = gradctrl::Rng(kRootSeed).split(0);
    out.bank = gradctrl::sample_bank(out.world, kBankSize, rng, 4);
    gradctrl::TrainConfig cfg;
    cfg.seed = kTrainSeed;
    for (const auto& attr : out.world.attributes) {
      const auto data = gradctrl::training_set_from_bank(out.bank, attr.id, 30);
      out.clfs.emplace(attr.id, gradctrl::train(data, attr.spec(), cfg).classifier);
    }
    out.stats = gradctrl::bank_statistics(out.bank, binary_attrs());
    return out;
  }();
  return s;
}

struct PairedRuns {
  gradctrl::EvalRun masked;
  gradctrl::EvalRun unmasked;
};

/// Edits `rows` boundary latents of `target`, once with every other binary
/// attribute excluded at `count` channels and once without masking. Alpha
/// points away from the target classifier's current side. Both runs are
/// scored by the oracle.
inline PairedRuns paired_edits(const std::string& target, std::size_t rows, std::size_t count) {
  const Setup& s = setup();
  const auto observers = gradctrl::oracle_observers(s.world);
  const auto& target_clf = s.clfs.at(target);
  std::vector<gradctrl::AttributeClassifier> entangled;
  gradctrl::DisentangleSpec masked{target, 0, {}};
  for (const auto& id : binary_attrs()) {
    if (id == target) continue;
    entangled.push_back(s.clfs.at(id));
    masked.entangled.push_back({id, count});
  }
  const gradctrl::DisentangleSpec flat{target, 0, {}};

  PairedRuns out;
  out.masked.bank_stats = out.unmasked.bank_stats = s.stats;
  const auto subset = gradctrl::boundary_sample(s.bank, target, kBoundaryMargin, rows);
  for (std::size_t row : subset.rows) {
    const gradctrl::Vector z0 = s.bank.latent(row);
    gradctrl::StepPolicy policy;
    policy.alpha = gradctrl::forward(target_clf, z0)[0] > 0.0 ? -policy.alpha : policy.alpha;
    out.masked.trajectories.push_back(
        gradctrl::manipulate(z0, target_clf, 0, entangled, masked, policy, observers));
    out.unmasked.trajectories.push_back(
        gradctrl::manipulate(z0, target_clf, 0, {}, flat, policy, observers));
  }
  return out;
}

/// AD curves of both runs on one set of uniform edges spanning all points.
inline std::pair<gradctrl::AdCurve, gradctrl::AdCurve> shared_ad_curves(const PairedRuns& runs,
                                                                        const std::string& target) {
  const auto pm = gradctrl::ad_points(runs.masked, target);
  const auto pu = gradctrl::ad_points(runs.unmasked, target);
  std::vector<double> xs;
  for (const auto& p : pm) xs.push_back(p.x);
  for (const auto& p : pu) xs.push_back(p.x);
  const auto edges = gradctrl::uniform_bin_edges(xs);
  return {gradctrl::bin_ad_points(pm, edges), gradctrl::bin_ad_points(pu, edges)};
}

}  // namespace experiment
