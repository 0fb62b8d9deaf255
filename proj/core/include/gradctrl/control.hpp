#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gradctrl/classifier.hpp"
#include "gradctrl/numeric.hpp"

namespace gradctrl {

/// Default top-c exclusion count per entangled attribute.
inline constexpr std::size_t kDefaultExclusionCount = 100;
/// Default interpolation step length.
inline constexpr double kDefaultStepSize = 0.6;
/// Directions with a smaller L2 norm count as vanished.
inline constexpr double kVanishingNorm = 1e-12;

struct ExclusionEntry {
  std::string attr;
  std::size_t count = kDefaultExclusionCount;
};

enum class MaskMode {
  per_step,  ///< excluded set recomputed at every trajectory point
  frozen,    ///< excluded set computed once at the starting latent
};

struct DisentangleSpec {
  std::string target_attr;
  std::size_t target_class = 0;
  std::vector<ExclusionEntry> entangled;
  MaskMode mask_mode = MaskMode::per_step;

  /// Throws RangeError when the target is listed as entangled or a count
  /// exceeds the latent dimension.
  void validate(std::size_t dim) const;
};

struct StepPolicy {
  double alpha = kDefaultStepSize;  ///< sign selects increase (+) or decrease (-)
  int max_steps = 100;
  bool normalize = true;
  bool stop_on_boundary = true;
  /// Editable dimensions; all dimensions when empty optional.
  std::optional<std::vector<std::size_t>> dim_mask;

  void validate(std::size_t dim) const;
};

enum class StopReason { boundary_crossed, max_steps, vanishing_gradient };

std::string_view to_string(StopReason reason) noexcept;
StopReason parse_stop_reason(std::string_view name);

struct TrajectoryStep {
  Vector z;
  std::map<std::string, Vector> logits;
};

struct Trajectory {
  std::string target_attr;
  std::size_t target_class = 0;
  std::vector<TrajectoryStep> steps;
  StopReason stop_reason = StopReason::max_steps;
};

/// Named scoring function recorded at every trajectory point.
struct Observer {
  std::string id;
  std::function<Vector(const Vector&)> score;
};

/// Observer wrapping a classifier's forward pass. The classifier must
/// outlive the observer.
Observer observe(const AttributeClassifier& clf);

/// |n_i| elementwise.
Vector saliency(const Vector& n);

/// Indices i with L_i >= t, where t is the c-th largest value of L; empty
/// for c == 0. Ties at the threshold are all included. Ascending order.
std::vector<std::size_t> top_c_dims(const Vector& saliency_values, std::size_t c);

/// Union over entangled attributes of top_c_dims(saliency(gradient)), each
/// gradient taken at z. Sorted ascending, no duplicates.
std::vector<std::size_t> excluded_dims(const Vector& z,
                                       std::span<const AttributeClassifier> entangled_clfs,
                                       const DisentangleSpec& spec);

/// Copy of n with every index in `excluded` set to exactly 0.
Vector mask_dims(Vector n, std::span<const std::size_t> excluded);

/// Target gradient row with the channels salient for entangled attributes
/// zeroed. Classifiers for spec.entangled are looked up by attribute id.
Vector disentangled_direction(const Vector& z, const AttributeClassifier& target_clf,
                              std::size_t target_class,
                              std::span<const AttributeClassifier> entangled_clfs,
                              const DisentangleSpec& spec);

/// z + alpha * d, where d is n restricted to policy.dim_mask and, if
/// policy.normalize, scaled to unit L2 norm. Throws VanishingGradientError
/// when normalizing a zero direction.
Vector step(const Vector& z, const Vector& n, const StepPolicy& policy);

/// True when the target classifier's logits sit on the requested side of the
/// decision boundary (binary: sign(alpha); multi-class: argmax == class).
bool reached_target(const AttributeSpec& attr, const Vector& logits, std::size_t target_class,
                    double alpha);

/// Iterative gradient-field interpolation from z0: the direction is
/// recomputed at the current latent before every step.
Trajectory manipulate(const Vector& z0, const AttributeClassifier& target_clf,
                      std::size_t target_class, std::span<const AttributeClassifier> entangled_clfs,
                      const DisentangleSpec& spec, const StepPolicy& policy,
                      std::span<const Observer> observers);

/// Exclusion counts, one per entry of DisentangleSpec::entangled.
using CountAssignment = std::vector<std::size_t>;

/// Every entangled attribute gets the same count, for each count in `counts`.
std::vector<CountAssignment> uniform_count_grid(std::span<const std::size_t> counts,
                                                std::size_t entangled);

/// One manipulate run per grid point.
std::map<CountAssignment, Trajectory> sweep_exclusion_counts(
    const Vector& z0, const AttributeClassifier& target_clf, std::size_t target_class,
    std::span<const AttributeClassifier> entangled_clfs, const DisentangleSpec& spec,
    std::span<const CountAssignment> counts_grid, const StepPolicy& policy,
    std::span<const Observer> observers);

/// JSON Lines: one {"step","z","logits"} object per point, then a final
/// {"stop_reason","target","target_class"} line.
std::string trajectory_to_jsonl(const Trajectory& trajectory);
Trajectory trajectory_from_jsonl(std::string_view text);

}  // namespace gradctrl
