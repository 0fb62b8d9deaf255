#pragma once

// Independent reference implementations used as test oracles. They are
// deliberately naive (plain loops, full sorts, two-pass statistics) and share
// no code with the library beyond its value types.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <vector>

#include "gradctrl/classifier.hpp"
#include "gradctrl/numeric.hpp"
#include "gradctrl/synthworld.hpp"

namespace oracle {

inline long double naive_dot(const std::vector<double>& a, const std::vector<double>& b) {
  long double sum = 0.0L;
  for (std::size_t i = 0; i < a.size(); ++i) sum += static_cast<long double>(a[i]) * b[i];
  return sum;
}

inline std::vector<double> naive_matvec(const gradctrl::Matrix& m, const gradctrl::Vector& v) {
  std::vector<double> out(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    long double sum = 0.0L;
    for (std::size_t c = 0; c < m.cols(); ++c) sum += static_cast<long double>(m(r, c)) * v[c];
    out[r] = static_cast<double>(sum);
  }
  return out;
}

struct TwoPass {
  double mean;
  double std;
};

inline TwoPass two_pass(const std::vector<double>& xs) {
  long double sum = 0.0L;
  for (double x : xs) sum += x;
  const long double mean = sum / xs.size();
  long double sq = 0.0L;
  for (double x : xs) sq += (x - mean) * (x - mean);
  return {static_cast<double>(mean), static_cast<double>(std::sqrt(sq / xs.size()))};
}

/// Layer-by-layer forward pass written from scratch.
inline std::vector<double> forward(const gradctrl::AttributeClassifier& clf,
                                   const gradctrl::Vector& z) {
  std::vector<double> a(z.begin(), z.end());
  auto affine = [](const gradctrl::DenseLayer& layer, const std::vector<double>& x) {
    std::vector<double> y(layer.out());
    for (std::size_t r = 0; r < layer.out(); ++r) {
      double s = layer.bias[r];
      for (std::size_t c = 0; c < layer.in(); ++c) s += layer.weights(r, c) * x[c];
      y[r] = s;
    }
    return y;
  };
  for (const auto& layer : clf.hidden()) {
    a = affine(layer, a);
    for (double& v : a) v = std::tanh(v);
  }
  return affine(clf.head(), a);
}

/// Central finite-difference Jacobian of `f` at z: rows are outputs.
inline gradctrl::Matrix finite_difference_jacobian(
    const std::function<std::vector<double>(const gradctrl::Vector&)>& f,
    const gradctrl::Vector& z, double eps = 1e-4) {
  const std::size_t outputs = f(z).size();
  gradctrl::Matrix jac(outputs, z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    gradctrl::Vector plus = z, minus = z;
    plus[i] += eps;
    minus[i] -= eps;
    const auto fp = f(plus), fm = f(minus);
    for (std::size_t k = 0; k < outputs; ++k) jac(k, i) = (fp[k] - fm[k]) / (2.0 * eps);
  }
  return jac;
}

/// Threshold rule by full sort: keep every index whose value reaches the c-th largest.
inline std::vector<std::size_t> top_c(const std::vector<double>& values, std::size_t c) {
  if (c == 0) return {};
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const double t = sorted[c - 1];
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] >= t) out.push_back(i);
  }
  return out;
}

/// Score re-evaluated symbolically from the world description.
inline std::vector<double> score(const gradctrl::WorldSpec& world, const std::string& id,
                                 const gradctrl::Vector& z) {
  const auto& attr = world.attribute(id);
  std::vector<double> out(attr.num_classes);
  for (std::size_t k = 0; k < attr.num_classes; ++k) {
    long double s = attr.bias[k];
    for (std::size_t j = 0; j < attr.support.size(); ++j) {
      const double x = z[attr.support[j]];
      const double phi = attr.form == gradctrl::ScoreForm::affine_tanh
                             ? x + attr.tanh_gain * std::tanh(attr.tanh_scale * x)
                             : x;
      s += attr.weights(k, j) * phi;
    }
    for (const auto& term : attr.confounds) {
      const auto& other = world.attribute(term.attr);
      for (std::size_t j = 0; j < other.support.size(); ++j) {
        s += term.weight * other.weights(0, j) * z[other.support[j]];
      }
    }
    out[k] = static_cast<double>(s);
  }
  return out;
}

/// Classifier whose tanh layers stay in their linear
/// regime, so each logit is approximately the linear probe rows[k] . z.
inline gradctrl::AttributeClassifier linear_probe(gradctrl::AttributeSpec attr, std::size_t dim,
                                                  const std::vector<std::vector<double>>& rows,
                                                  double gain = 1e-3) {
  const std::size_t outputs = rows.size();
  const std::size_t width = outputs;
  gradctrl::DenseLayer first{gradctrl::Matrix(width, dim), gradctrl::Vector(width)};
  for (std::size_t k = 0; k < outputs; ++k) {
    for (std::size_t i = 0; i < dim; ++i) first.weights(k, i) = gain * rows[k][i];
  }
  gradctrl::DenseLayer second{gradctrl::Matrix::identity(width), gradctrl::Vector(width)};
  gradctrl::DenseLayer head{gradctrl::Matrix(outputs, width), gradctrl::Vector(outputs)};
  for (std::size_t k = 0; k < outputs; ++k) head.weights(k, k) = 1.0 / (gain * gain);
  // h2 = tanh(g * tanh(g * w.z)) ~ g^2 * w.z; the head divides g^2 back out.
  for (std::size_t k = 0; k < width; ++k) second.weights(k, k) = gain;
  return gradctrl::AttributeClassifier(std::move(attr), {first, second}, head);
}

}  // namespace oracle
