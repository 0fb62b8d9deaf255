#include "gradctrl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

#include <json.hpp>

#include "gradctrl/errors.hpp"

namespace gradctrl {

namespace {

const Vector& logits_of(const TrajectoryStep& step, std::string_view attr) {
  auto it = step.logits.find(std::string(attr));
  if (it == step.logits.end()) {
    throw MissingDataError("trajectory step has no logits for attribute '" + std::string(attr) + "'");
  }
  return it->second;
}

const AttributeStats& stats_of(const EvalRun& run, std::string_view attr) {
  auto it = run.bank_stats.find(std::string(attr));
  if (it == run.bank_stats.end()) {
    throw MissingDataError("no bank statistics for attribute '" + std::string(attr) + "'");
  }
  return it->second;
}

double require_positive_sigma(double sigma, std::string_view attr) {
  if (!(sigma > 0.0)) {
    throw DegenerateNormalizerError("attribute '" + std::string(attr) +
                                    "' has zero logit spread over the bank");
  }
  return sigma;
}

/// Non-target drift normalized by the bank spread; returns (|.|, signed).
std::pair<double, double> normalized_drift(const Vector& first, const Vector& last,
                                           const AttributeStats& stats, std::string_view attr) {
  if (first.size() != stats.sigma.size() || last.size() != first.size()) {
    throw DimensionError("logit width for '" + std::string(attr) + "' does not match bank stats");
  }
  if (first.size() == 1) {
    const double sigma = require_positive_sigma(stats.sigma[0], attr);
    const double delta = (last[0] - first[0]) / sigma;
    return {std::abs(delta), delta};
  }
  // Multi-class: L2 norm of the change over the L2 norm of the spreads.
  const double sigma = require_positive_sigma(l2_norm(stats.sigma), attr);
  const double delta = l2_norm(last - first) / sigma;
  return {delta, delta};
}

}  // namespace

std::map<std::string, AttributeStats> bank_statistics(const Bank& bank,
                                                      std::span<const std::string> attrs) {
  std::vector<std::string> wanted(attrs.begin(), attrs.end());
  if (wanted.empty()) wanted = bank.attr_ids;
  std::map<std::string, AttributeStats> out;
  for (const std::string& id : wanted) {
    const Matrix& scores = bank.scores[bank.attr_index(id)];
    AttributeStats stats{Vector(scores.cols()), Vector(scores.cols())};
    std::vector<double> column(scores.rows());
    for (std::size_t c = 0; c < scores.cols(); ++c) {
      for (std::size_t r = 0; r < scores.rows(); ++r) column[r] = scores(r, c);
      const MeanStd ms = mean_std(column);
      stats.mean[c] = ms.mean;
      stats.sigma[c] = ms.std;
    }
    out.emplace(id, std::move(stats));
  }
  return out;
}

std::map<std::string, AttributeStats> observer_statistics(const Matrix& latents,
                                                          std::span<const Observer> observers) {
  if (latents.rows() == 0) throw EmptyInputError("observer_statistics: no latents");
  std::map<std::string, AttributeStats> out;
  for (const Observer& o : observers) {
    std::vector<Vector> outputs;
    outputs.reserve(latents.rows());
    for (std::size_t r = 0; r < latents.rows(); ++r) outputs.push_back(o.score(latents.row_vector(r)));
    const std::size_t width = outputs.front().size();
    AttributeStats stats{Vector(width), Vector(width)};
    std::vector<double> column(outputs.size());
    for (std::size_t c = 0; c < width; ++c) {
      for (std::size_t r = 0; r < outputs.size(); ++r) column[r] = outputs[r][c];
      const MeanStd ms = mean_std(column);
      stats.mean[c] = ms.mean;
      stats.sigma[c] = ms.std;
    }
    out.emplace(o.id, std::move(stats));
  }
  return out;
}

std::vector<Observer> oracle_observers(const WorldSpec& world) {
  std::vector<Observer> out;
  for (const OracleAttribute& attr : world.attributes) {
    out.push_back({attr.id, [&world, id = attr.id](const Vector& z) { return oracle_score(world, id, z); }});
  }
  return out;
}

Trajectory rescore(const Trajectory& trajectory, std::span<const Observer> observers) {
  Trajectory out = trajectory;
  for (TrajectoryStep& step : out.steps) {
    step.logits.clear();
    for (const Observer& o : observers) step.logits.emplace(o.id, o.score(step.z));
  }
  return out;
}

std::size_t logit_label(const Vector& logits) {
  if (logits.empty()) throw EmptyInputError("logit_label: empty logits");
  if (logits.size() == 1) return logits[0] > 0.0 ? 1 : 0;
  return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

std::map<std::string, double> manipulation_accuracy(const EvalRun& run,
                                                    std::span<const std::string> attrs,
                                                    std::span<const std::string> targets) {
  std::vector<std::string> wanted(targets.begin(), targets.end());
  if (wanted.empty()) {
    for (const Trajectory& t : run.trajectories) {
      if (std::find(wanted.begin(), wanted.end(), t.target_attr) == wanted.end()) {
        wanted.push_back(t.target_attr);
      }
    }
  }
  if (wanted.empty()) throw MissingDataError("manipulation_accuracy: no trajectories");

  std::map<std::string, double> out;
  for (const std::string& target : wanted) {
    std::size_t runs = 0, hits = 0;
    for (const Trajectory& t : run.trajectories) {
      if (t.target_attr != target) continue;
      ++runs;
      const TrajectoryStep& first = t.steps.front();
      const TrajectoryStep& last = t.steps.back();
      const Vector& tl0 = logits_of(first, target);
      const Vector& tl1 = logits_of(last, target);
      const std::size_t before = logit_label(tl0);
      const std::size_t after = logit_label(tl1);
      const bool flipped =
          tl0.size() == 1 ? before != after : (before != t.target_class && after == t.target_class);
      if (!flipped) continue;
      const bool clean = std::all_of(attrs.begin(), attrs.end(), [&](const std::string& a) {
        return a == target || logit_label(logits_of(first, a)) == logit_label(logits_of(last, a));
      });
      if (clean) ++hits;
    }
    if (runs == 0) throw MissingDataError("no trajectories target attribute '" + target + "'");
    out.emplace(target, static_cast<double>(hits) / static_cast<double>(runs));
  }
  return out;
}

std::vector<AdPoint> ad_points(const EvalRun& run, std::string_view target) {
  const AttributeStats& target_stats = stats_of(run, target);
  if (run.bank_stats.size() < 2) {
    throw MissingDataError("attribute dependency needs at least one non-target attribute");
  }
  std::vector<AdPoint> points;
  for (const Trajectory& t : run.trajectories) {
    if (t.target_attr != target) continue;
    const TrajectoryStep& first = t.steps.front();
    const TrajectoryStep& last = t.steps.back();
    const Vector& l0 = logits_of(first, target);
    const Vector& l1 = logits_of(last, target);
    const std::size_t k = l0.size() == 1 ? 0 : t.target_class;
    if (k >= l0.size() || k >= target_stats.sigma.size() || l1.size() != l0.size()) {
      throw DimensionError("target class outside logit width for '" + std::string(target) + "'");
    }
    AdPoint p;
    p.x = (l1[k] - l0[k]) / require_positive_sigma(target_stats.sigma[k], target);
    double abs_sum = 0.0, signed_sum = 0.0;
    for (const auto& [attr, stats] : run.bank_stats) {
      if (attr == target) continue;
      const auto [a, s] = normalized_drift(logits_of(first, attr), logits_of(last, attr), stats, attr);
      abs_sum += a;
      signed_sum += s;
    }
    const double others = static_cast<double>(run.bank_stats.size() - 1);
    p.ad = abs_sum / others;
    p.signed_ad = signed_sum / others;
    points.push_back(p);
  }
  if (points.empty()) throw MissingDataError("no trajectories target attribute '" + std::string(target) + "'");
  return points;
}

std::vector<double> uniform_bin_edges(std::span<const double> xs, std::size_t bins) {
  if (xs.empty()) throw EmptyInputError("uniform_bin_edges: no values");
  if (bins == 0) throw RangeError("uniform_bin_edges: need at least one bin");
  double lo = *std::min_element(xs.begin(), xs.end());
  double hi = *std::max_element(xs.begin(), xs.end());
  if (lo == hi) {
    lo -= 0.5;
    hi += 0.5;
  }
  std::vector<double> edges(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) {
    edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  }
  edges.back() = hi;
  return edges;
}

AdCurve bin_ad_points(std::span<const AdPoint> points, std::span<const double> edges) {
  if (edges.size() < 2) throw RangeError("bin edges need at least two values");
  if (!std::is_sorted(edges.begin(), edges.end())) throw RangeError("bin edges must ascend");
  const std::size_t nbins = edges.size() - 1;
  std::vector<double> sum(nbins, 0.0), signed_sum(nbins, 0.0);
  std::vector<std::size_t> count(nbins, 0);
  for (const AdPoint& p : points) {
    if (p.x < edges.front() || p.x > edges.back()) continue;
    auto it = std::upper_bound(edges.begin(), edges.end(), p.x);
    std::size_t bin = static_cast<std::size_t>(it - edges.begin());
    bin = bin == 0 ? 0 : std::min(bin - 1, nbins - 1);
    sum[bin] += p.ad;
    signed_sum[bin] += p.signed_ad;
    ++count[bin];
  }
  AdCurve curve;
  curve.edges.assign(edges.begin(), edges.end());
  for (std::size_t b = 0; b < nbins; ++b) {
    if (count[b] == 0) continue;
    const double n = static_cast<double>(count[b]);
    curve.bins.push_back({0.5 * (edges[b] + edges[b + 1]), sum[b] / n, signed_sum[b] / n, count[b]});
  }
  return curve;
}

AdCurve attribute_dependency(const EvalRun& run, std::string_view target,
                             std::optional<std::vector<double>> bin_edges) {
  const std::vector<AdPoint> points = ad_points(run, target);
  if (!bin_edges) {
    std::vector<double> xs;
    for (const AdPoint& p : points) xs.push_back(p.x);
    bin_edges = uniform_bin_edges(xs);
  }
  return bin_ad_points(points, *bin_edges);
}

std::vector<ScatterPair> logit_scatter(const EvalRun& run, std::string_view attr_x,
                                       std::string_view attr_y) {
  std::vector<ScatterPair> out;
  for (const Trajectory& t : run.trajectories) {
    const TrajectoryStep& first = t.steps.front();
    const TrajectoryStep& last = t.steps.back();
    out.push_back({logits_of(first, attr_x)[0], logits_of(first, attr_y)[0],
                   logits_of(last, attr_x)[0], logits_of(last, attr_y)[0]});
  }
  return out;
}

double mean_abs_slope(std::span<const ScatterPair> pairs) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const ScatterPair& p : pairs) {
    const double dx = p.x1 - p.x0;
    if (dx == 0.0) continue;
    sum += std::abs((p.y1 - p.y0) / dx);
    ++n;
  }
  if (n == 0) throw MissingDataError("mean_abs_slope: no pair moved along x");
  return sum / static_cast<double>(n);
}

double mean_logit_drift(const EvalRun& run, std::string_view attr) {
  if (run.trajectories.empty()) throw MissingDataError("mean_logit_drift: no trajectories");
  double sum = 0.0;
  for (const Trajectory& t : run.trajectories) {
    sum += std::abs(logits_of(t.steps.back(), attr)[0] - logits_of(t.steps.front(), attr)[0]);
  }
  return sum / static_cast<double>(run.trajectories.size());
}

std::string metrics_to_json(const std::map<std::string, double>& accuracy,
                            const std::map<std::string, AdCurve>& ad_curves,
                            std::span<const ScatterPair> scatter) {
  nlohmann::ordered_json doc;
  doc["accuracy"] = nlohmann::ordered_json::object();
  for (const auto& [attr, acc] : accuracy) doc["accuracy"][attr] = acc;
  doc["ad_curves"] = nlohmann::ordered_json::object();
  for (const auto& [name, curve] : ad_curves) {
    nlohmann::ordered_json c;
    c["edges"] = curve.edges;
    c["bins"] = nlohmann::ordered_json::array();
    for (const AdBin& b : curve.bins) {
      c["bins"].push_back({{"x_center", b.x_center},
                           {"mean_ad", b.mean_ad},
                           {"mean_signed_ad", b.mean_signed_ad},
                           {"count", b.count}});
    }
    doc["ad_curves"][name] = std::move(c);
  }
  doc["scatter"] = nlohmann::ordered_json::array();
  for (const ScatterPair& p : scatter) doc["scatter"].push_back({{p.x0, p.y0}, {p.x1, p.y1}});
  return doc.dump(2) + "\n";
}

std::string ad_curve_to_csv(const AdCurve& curve) {
  std::ostringstream out;
  out.precision(17);
  out << "x_center,mean_ad,mean_signed_ad,count\n";
  for (const AdBin& b : curve.bins) {
    out << b.x_center << ',' << b.mean_ad << ',' << b.mean_signed_ad << ',' << b.count << '\n';
  }
  return out.str();
}

}  // namespace gradctrl
