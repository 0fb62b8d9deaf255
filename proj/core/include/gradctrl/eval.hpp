#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gradctrl/control.hpp"
#include "gradctrl/numeric.hpp"
#include "gradctrl/synthworld.hpp"

namespace gradctrl {

enum class Scorer { oracle, trained_classifier };

/// Per-logit mean and population standard deviation over an image bank.
struct AttributeStats {
  Vector mean;
  Vector sigma;
};

struct EvalRun {
  std::vector<Trajectory> trajectories;
  /// Normalizers; its keys form the attribute set A used by AD.
  std::map<std::string, AttributeStats> bank_stats;
  Scorer scorer = Scorer::oracle;
};

/// Statistics of the bank's oracle scores for the given attributes (all when empty).
std::map<std::string, AttributeStats> bank_statistics(const Bank& bank,
                                                      std::span<const std::string> attrs = {});

/// Statistics of each observer's outputs over the rows of `latents`.
std::map<std::string, AttributeStats> observer_statistics(const Matrix& latents,
                                                          std::span<const Observer> observers);

/// One oracle observer per world attribute.
std::vector<Observer> oracle_observers(const WorldSpec& world);

/// Same latents, logits replaced by the given observers' scores.
Trajectory rescore(const Trajectory& trajectory, std::span<const Observer> observers);

/// Label implied by a logit vector: binary (length 1) -> logit > 0,
/// multi-class -> argmax.
std::size_t logit_label(const Vector& logits);

/// Per target attribute: fraction of its runs where the target label changed
/// (to target_class for multi-class targets) and every other attribute in
/// `attrs` kept its first-step label. Targets default to those present in
/// the runs; a requested target without runs raises MissingDataError.
std::map<std::string, double> manipulation_accuracy(const EvalRun& run,
                                                    std::span<const std::string> attrs,
                                                    std::span<const std::string> targets = {});

/// One manipulated sample in AD space.
struct AdPoint {
  double x = 0.0;          ///< target logit change / sigma_target
  double ad = 0.0;         ///< mean over other attributes of |delta l| / sigma
  double signed_ad = 0.0;  ///< same without the absolute value
};

struct AdBin {
  double x_center = 0.0;
  double mean_ad = 0.0;
  double mean_signed_ad = 0.0;
  std::size_t count = 0;
};

struct AdCurve {
  std::vector<double> edges;
  std::vector<AdBin> bins;  ///< non-empty bins only, ordered by x_center
};

inline constexpr std::size_t kDefaultAdBins = 8;

std::vector<AdPoint> ad_points(const EvalRun& run, std::string_view target);
/// `bins` uniform bins spanning [min x, max x] of the points.
std::vector<double> uniform_bin_edges(std::span<const double> xs, std::size_t bins = kDefaultAdBins);
AdCurve bin_ad_points(std::span<const AdPoint> points, std::span<const double> edges);

/// Mean attribute dependency curve for one target. Uses uniform default
/// edges when none are given.
AdCurve attribute_dependency(const EvalRun& run, std::string_view target,
                             std::optional<std::vector<double>> bin_edges = std::nullopt);

struct ScatterPair {
  double x0 = 0.0, y0 = 0.0;
  double x1 = 0.0, y1 = 0.0;
};

/// Start/end (attr_x, attr_y) logit pairs, one per trajectory. Uses logit
/// component 0 of each attribute.
std::vector<ScatterPair> logit_scatter(const EvalRun& run, std::string_view attr_x,
                                       std::string_view attr_y);

/// Mean |dy/dx| over pairs with dx != 0.
double mean_abs_slope(std::span<const ScatterPair> pairs);

/// Mean |last - first| of attr's logit component 0 over all trajectories.
double mean_logit_drift(const EvalRun& run, std::string_view attr);

/// {"accuracy": {...}, "ad_curves": {...}, "scatter": [...]}.
std::string metrics_to_json(const std::map<std::string, double>& accuracy,
                            const std::map<std::string, AdCurve>& ad_curves,
                            std::span<const ScatterPair> scatter);
/// x_center,mean_ad,mean_signed_ad,count
std::string ad_curve_to_csv(const AdCurve& curve);

}  // namespace gradctrl
