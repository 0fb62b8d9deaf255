#include "gradctrl/control.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "gradctrl/errors.hpp"

namespace gradctrl {

namespace {

const AttributeClassifier& find_classifier(std::span<const AttributeClassifier> clfs,
                                           const std::string& id) {
  for (const AttributeClassifier& clf : clfs) {
    if (clf.attr().id == id) return clf;
  }
  throw LookupError("no classifier supplied for entangled attribute '" + id + "'");
}

/// Binary: |gradient|. Multi-class: per-dimension max of |row| over all
/// Jacobian rows, so a channel salient for any class counts.
Vector attribute_saliency(const AttributeClassifier& clf, const Vector& z) {
  if (clf.output_dim() == 1) return saliency(gradient_row(clf, z, 0));
  const Matrix jac = input_jacobian(clf, z);
  Vector out(jac.cols());
  for (std::size_t r = 0; r < jac.rows(); ++r) {
    auto row = jac.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) out[c] = std::max(out[c], std::abs(row[c]));
  }
  return out;
}

TrajectoryStep record(const Vector& z, std::span<const Observer> observers) {
  TrajectoryStep s{z, {}};
  for (const Observer& o : observers) s.logits.emplace(o.id, o.score(z));
  return s;
}

}  // namespace

void DisentangleSpec::validate(std::size_t dim) const {
  for (const ExclusionEntry& e : entangled) {
    if (e.attr == target_attr) {
      throw RangeError("target attribute '" + target_attr + "' cannot also be entangled");
    }
    if (e.count > dim) {
      throw RangeError("exclusion count " + std::to_string(e.count) + " for '" + e.attr +
                       "' exceeds latent dimension " + std::to_string(dim));
    }
  }
}

void StepPolicy::validate(std::size_t dim) const {
  if (max_steps < 1) throw RangeError("max_steps must be at least 1");
  if (alpha == 0.0 || !std::isfinite(alpha)) throw RangeError("alpha must be finite and non-zero");
  if (dim_mask) {
    for (std::size_t i : *dim_mask) {
      if (i >= dim) {
        throw RangeError("dim_mask index " + std::to_string(i) + " outside latent dimension " +
                         std::to_string(dim));
      }
    }
  }
}

std::string_view to_string(StopReason reason) noexcept {
  switch (reason) {
    case StopReason::boundary_crossed: return "boundary_crossed";
    case StopReason::max_steps: return "max_steps";
    case StopReason::vanishing_gradient: return "vanishing_gradient";
  }
  return "max_steps";
}

StopReason parse_stop_reason(std::string_view name) {
  if (name == "boundary_crossed") return StopReason::boundary_crossed;
  if (name == "max_steps") return StopReason::max_steps;
  if (name == "vanishing_gradient") return StopReason::vanishing_gradient;
  throw FormatError(0, "unknown stop reason '" + std::string(name) + "'");
}

Observer observe(const AttributeClassifier& clf) {
  return {clf.attr().id, [&clf](const Vector& z) { return forward(clf, z); }};
}

Vector saliency(const Vector& n) {
  Vector out(n.size());
  for (std::size_t i = 0; i < n.size(); ++i) out[i] = std::abs(n[i]);
  return out;
}

std::vector<std::size_t> top_c_dims(const Vector& saliency_values, std::size_t c) {
  if (c > saliency_values.size()) {
    throw RangeError("top_c_dims: c = " + std::to_string(c) + " exceeds length " +
                     std::to_string(saliency_values.size()));
  }
  if (c == 0) return {};
  std::vector<double> sorted = saliency_values.values();
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(c - 1), sorted.end(),
                   std::greater<>());
  const double threshold = sorted[c - 1];
  std::vector<std::size_t> dims;
  for (std::size_t i = 0; i < saliency_values.size(); ++i) {
    if (saliency_values[i] >= threshold) dims.push_back(i);
  }
  return dims;
}

std::vector<std::size_t> excluded_dims(const Vector& z,
                                       std::span<const AttributeClassifier> entangled_clfs,
                                       const DisentangleSpec& spec) {
  spec.validate(z.size());
  std::vector<std::size_t> excluded;
  for (const ExclusionEntry& entry : spec.entangled) {
    if (entry.count == 0) continue;
    const AttributeClassifier& clf = find_classifier(entangled_clfs, entry.attr);
    const std::vector<std::size_t> dims = top_c_dims(attribute_saliency(clf, z), entry.count);
    std::vector<std::size_t> merged;
    merged.reserve(excluded.size() + dims.size());
    std::set_union(excluded.begin(), excluded.end(), dims.begin(), dims.end(),
                   std::back_inserter(merged));
    excluded = std::move(merged);
  }
  return excluded;
}

Vector mask_dims(Vector n, std::span<const std::size_t> excluded) {
  for (std::size_t i : excluded) {
    if (i >= n.size()) throw IndexError("excluded dimension " + std::to_string(i) + " out of range");
    n[i] = 0.0;
  }
  return n;
}

Vector disentangled_direction(const Vector& z, const AttributeClassifier& target_clf,
                              std::size_t target_class,
                              std::span<const AttributeClassifier> entangled_clfs,
                              const DisentangleSpec& spec) {
  for (const AttributeClassifier& clf : entangled_clfs) {
    if (clf.input_dim() != target_clf.input_dim()) {
      throw DimensionError("classifier '" + clf.attr().id + "' input dim differs from target's");
    }
  }
  Vector direction = gradient_row(target_clf, z, target_class);
  return mask_dims(std::move(direction), excluded_dims(z, entangled_clfs, spec));
}

namespace {

Vector restrict_to_mask(const Vector& n, const std::optional<std::vector<std::size_t>>& mask) {
  if (!mask) return n;
  Vector out(n.size());
  for (std::size_t i : *mask) out[i] = n[i];
  return out;
}

}  // namespace

Vector step(const Vector& z, const Vector& n, const StepPolicy& policy) {
  if (z.size() != n.size()) {
    throw DimensionError("step: latent length " + std::to_string(z.size()) +
                         " != direction length " + std::to_string(n.size()));
  }
  policy.validate(z.size());
  Vector d = restrict_to_mask(n, policy.dim_mask);
  if (policy.normalize) {
    const double norm = l2_norm(d);
    if (norm == 0.0) throw VanishingGradientError("step: cannot normalize a zero direction");
    d *= 1.0 / norm;
  }
  Vector out = z;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += policy.alpha * d[i];
  return out;
}

bool reached_target(const AttributeSpec& attr, const Vector& logits, std::size_t target_class,
                    double alpha) {
  if (attr.head() == HeadKind::sigmoid) return alpha > 0.0 ? logits[0] > 0.0 : logits[0] < 0.0;
  return predicted_label(attr, logits) == target_class;
}

Trajectory manipulate(const Vector& z0, const AttributeClassifier& target_clf,
                      std::size_t target_class, std::span<const AttributeClassifier> entangled_clfs,
                      const DisentangleSpec& spec, const StepPolicy& policy,
                      std::span<const Observer> observers) {
  const std::size_t dim = target_clf.input_dim();
  if (z0.size() != dim) {
    throw DimensionError("manipulate: z0 has length " + std::to_string(z0.size()) +
                         ", classifier expects " + std::to_string(dim));
  }
  spec.validate(dim);
  policy.validate(dim);
  if (target_class >= target_clf.output_dim()) {
    throw IndexError("target class " + std::to_string(target_class) + " out of range");
  }
  const bool observed = std::any_of(observers.begin(), observers.end(), [&](const Observer& o) {
    return o.id == target_clf.attr().id;
  });
  if (!observed) throw LookupError("observers must include the target attribute");

  Trajectory traj;
  traj.target_attr = target_clf.attr().id;
  traj.target_class = target_class;
  traj.steps.push_back(record(z0, observers));

  std::optional<std::vector<std::size_t>> frozen;
  if (spec.mask_mode == MaskMode::frozen) frozen = excluded_dims(z0, entangled_clfs, spec);

  auto at_goal = [&](const Vector& z) {
    return policy.stop_on_boundary &&
           reached_target(target_clf.attr(), forward(target_clf, z), target_class, policy.alpha);
  };

  Vector z = z0;
  for (int s = 0; s < policy.max_steps; ++s) {
    if (at_goal(z)) {
      traj.stop_reason = StopReason::boundary_crossed;
      return traj;
    }
    Vector direction = gradient_row(target_clf, z, target_class);
    direction = mask_dims(std::move(direction),
                          frozen ? *frozen : excluded_dims(z, entangled_clfs, spec));
    direction = restrict_to_mask(direction, policy.dim_mask);
    if (l2_norm(direction) < kVanishingNorm) {
      traj.stop_reason = StopReason::vanishing_gradient;
      return traj;
    }
    z = step(z, direction, policy);
    traj.steps.push_back(record(z, observers));
  }
  traj.stop_reason = at_goal(z) ? StopReason::boundary_crossed : StopReason::max_steps;
  return traj;
}

std::vector<CountAssignment> uniform_count_grid(std::span<const std::size_t> counts,
                                                std::size_t entangled) {
  std::vector<CountAssignment> grid;
  for (std::size_t c : counts) grid.emplace_back(entangled, c);
  return grid;
}

std::map<CountAssignment, Trajectory> sweep_exclusion_counts(
    const Vector& z0, const AttributeClassifier& target_clf, std::size_t target_class,
    std::span<const AttributeClassifier> entangled_clfs, const DisentangleSpec& spec,
    std::span<const CountAssignment> counts_grid, const StepPolicy& policy,
    std::span<const Observer> observers) {
  if (counts_grid.empty()) throw EmptyInputError("sweep_exclusion_counts: empty counts grid");
  std::map<CountAssignment, Trajectory> out;
  for (const CountAssignment& counts : counts_grid) {
    if (counts.size() != spec.entangled.size()) {
      throw DimensionError("count assignment has " + std::to_string(counts.size()) +
                           " entries for " + std::to_string(spec.entangled.size()) +
                           " entangled attributes");
    }
    DisentangleSpec point = spec;
    for (std::size_t i = 0; i < counts.size(); ++i) point.entangled[i].count = counts[i];
    out.emplace(counts, manipulate(z0, target_clf, target_class, entangled_clfs, point, policy,
                                   observers));
  }
  return out;
}

}  // namespace gradctrl
