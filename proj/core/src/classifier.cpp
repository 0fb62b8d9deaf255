#include "gradctrl/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "gradctrl/errors.hpp"

namespace gradctrl {

AttributeSpec AttributeSpec::binary(std::string id) {
  return {std::move(id), 1, {"absent", "present"}};
}

AttributeSpec AttributeSpec::multiclass(std::string id, std::vector<std::string> class_names) {
  AttributeSpec spec{std::move(id), class_names.size(), std::move(class_names)};
  spec.validate();
  return spec;
}

void AttributeSpec::validate() const {
  if (id.empty()) throw RangeError("attribute id must not be empty");
  if (num_classes == 0) throw RangeError("attribute '" + id + "': num_classes must be >= 1");
  if (class_names.size() != label_count()) {
    throw RangeError("attribute '" + id + "': expected " + std::to_string(label_count()) +
                     " class names, got " + std::to_string(class_names.size()));
  }
}

namespace {

DenseLayer make_layer(std::size_t out, std::size_t in) { return {Matrix(out, in), Vector(out)}; }

void fill_uniform(DenseLayer& layer, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(layer.in()));
  for (std::size_t i = 0; i < layer.weights.size(); ++i) {
    layer.weights.data()[i] = rng.uniform(-bound, bound);
  }
  for (double& b : layer.bias) b = rng.uniform(-bound, bound);
}

void require_input(const AttributeClassifier& clf, const Vector& z) {
  if (z.size() != clf.input_dim()) {
    throw DimensionError("classifier '" + clf.attr().id + "' expects input of length " +
                         std::to_string(clf.input_dim()) + ", got " + std::to_string(z.size()));
  }
}

Vector affine(const DenseLayer& layer, const Vector& x) {
  Vector out = matvec(layer.weights, x);
  out += layer.bias;
  return out;
}

void tanh_inplace(Vector& v) {
  for (double& x : v) x = std::tanh(x);
}

/// Hidden activations: acts[0] = z, acts[l] = output of hidden layer l.
std::vector<Vector> hidden_activations(const AttributeClassifier& clf, const Vector& z) {
  std::vector<Vector> acts;
  acts.reserve(clf.hidden_layer_count() + 1);
  acts.push_back(z);
  for (const DenseLayer& layer : clf.hidden()) {
    Vector a = affine(layer, acts.back());
    tanh_inplace(a);
    acts.push_back(std::move(a));
  }
  return acts;
}

}  // namespace

AttributeClassifier::AttributeClassifier(AttributeSpec attr, std::vector<DenseLayer> hidden,
                                         DenseLayer head)
    : attr_(std::move(attr)), hidden_(std::move(hidden)), head_(std::move(head)) {
  attr_.validate();
  if (hidden_.empty()) throw DimensionError("classifier needs at least one hidden layer");
  const std::size_t width = hidden_.front().out();
  for (std::size_t l = 0; l < hidden_.size(); ++l) {
    const DenseLayer& layer = hidden_[l];
    if (layer.bias.size() != layer.out()) throw DimensionError("hidden bias length mismatch");
    if (layer.out() != width) throw DimensionError("hidden layers must share one width");
    if (l > 0 && layer.in() != width) throw DimensionError("hidden layers do not chain");
  }
  if (head_.in() != width || head_.out() != attr_.num_classes || head_.bias.size() != head_.out()) {
    throw DimensionError("head layer shape does not match hidden width / num_classes");
  }
  if (input_dim() == 0 || width == 0) throw DimensionError("classifier dimensions must be positive");
  auto finite = [](const DenseLayer& l) { return l.weights.all_finite() && l.bias.all_finite(); };
  if (!std::all_of(hidden_.begin(), hidden_.end(), finite) || !finite(head_)) {
    throw RangeError("classifier '" + attr_.id + "' has non-finite parameters");
  }
}

AttributeClassifier AttributeClassifier::zeros(AttributeSpec attr, std::size_t input_dim,
                                               std::size_t hidden_width,
                                               std::size_t hidden_layers) {
  if (hidden_layers == 0) throw DimensionError("hidden_layers must be >= 1");
  std::vector<DenseLayer> hidden;
  hidden.push_back(make_layer(hidden_width, input_dim));
  for (std::size_t l = 1; l < hidden_layers; ++l) hidden.push_back(make_layer(hidden_width, hidden_width));
  const std::size_t outputs = attr.num_classes;
  return {std::move(attr), std::move(hidden), make_layer(outputs, hidden_width)};
}

AttributeClassifier AttributeClassifier::random(AttributeSpec attr, std::size_t input_dim,
                                                std::size_t hidden_width, Rng& rng,
                                                std::size_t hidden_layers) {
  AttributeClassifier clf = zeros(std::move(attr), input_dim, hidden_width, hidden_layers);
  for (DenseLayer& layer : clf.hidden_) fill_uniform(layer, rng);
  fill_uniform(clf.head_, rng);
  return clf;
}

void AttributeClassifier::shift_head_bias(double shift) {
  for (double& b : head_.bias) b += shift;
}

Vector forward(const AttributeClassifier& clf, const Vector& z) {
  require_input(clf, z);
  Vector x = z;
  for (const DenseLayer& layer : clf.hidden()) {
    x = affine(layer, x);
    tanh_inplace(x);
  }
  return affine(clf.head(), x);
}

Vector probabilities(const AttributeSpec& attr, const Vector& logits) {
  if (logits.size() != attr.num_classes) {
    throw DimensionError("probabilities: expected " + std::to_string(attr.num_classes) +
                         " logits, got " + std::to_string(logits.size()));
  }
  if (attr.head() == HeadKind::sigmoid) {
    return Vector{1.0 / (1.0 + std::exp(-logits[0]))};
  }
  const double peak = *std::max_element(logits.begin(), logits.end());
  Vector p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - peak);
    total += p[i];
  }
  p *= 1.0 / total;
  return p;
}

std::size_t predicted_label(const AttributeSpec& attr, const Vector& logits) {
  if (logits.size() != attr.num_classes) {
    throw DimensionError("predicted_label: expected " + std::to_string(attr.num_classes) +
                         " logits, got " + std::to_string(logits.size()));
  }
  if (attr.head() == HeadKind::sigmoid) return logits[0] > 0.0 ? 1 : 0;
  return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

namespace {

Vector jacobian_row(const AttributeClassifier& clf, const std::vector<Vector>& acts,
                    std::size_t class_j) {
  const auto hidden = clf.hidden();
  Vector delta = clf.head().weights.row_vector(class_j);
  for (std::size_t l = hidden.size(); l-- > 0;) {
    const Vector& a = acts[l + 1];
    for (std::size_t c = 0; c < delta.size(); ++c) delta[c] *= 1.0 - a[c] * a[c];
    delta = matvec_transposed(hidden[l].weights, delta);
  }
  return delta;
}

}  // namespace

Matrix input_jacobian(const AttributeClassifier& clf, const Vector& z) {
  require_input(clf, z);
  const std::vector<Vector> acts = hidden_activations(clf, z);
  Matrix jac(clf.output_dim(), clf.input_dim());
  for (std::size_t j = 0; j < clf.output_dim(); ++j) {
    const Vector row = jacobian_row(clf, acts, j);
    std::copy(row.begin(), row.end(), jac.row(j).begin());
  }
  return jac;
}

Vector gradient_row(const AttributeClassifier& clf, const Vector& z, std::size_t class_j) {
  if (class_j >= clf.output_dim()) {
    throw IndexError("class " + std::to_string(class_j) + " out of range for attribute '" +
                     clf.attr().id + "' with " + std::to_string(clf.output_dim()) + " logit rows");
  }
  require_input(clf, z);
  return jacobian_row(clf, hidden_activations(clf, z), class_j);
}

void TrainConfig::validate() const {
  if (examples_per_class == 0 || epochs <= 0 || !(learning_rate > 0.0) || batch_size == 0 ||
      hidden_width == 0 || hidden_layers == 0) {
    throw RangeError("train config values must all be positive");
  }
}

/// Parameter-space view of a classifier used by the optimizer.
struct ClassifierTrainer {
  static std::vector<DenseLayer*> layers(AttributeClassifier& clf) {
    std::vector<DenseLayer*> out;
    for (DenseLayer& l : clf.hidden_) out.push_back(&l);
    out.push_back(&clf.head_);
    return out;
  }
};

namespace {

struct LayerGrad {
  std::vector<double> weights;
  std::vector<double> bias;
};

std::vector<LayerGrad> zero_grads(const std::vector<DenseLayer*>& layers) {
  std::vector<LayerGrad> g;
  for (const DenseLayer* l : layers) {
    g.push_back({std::vector<double>(l->weights.size(), 0.0), std::vector<double>(l->out(), 0.0)});
  }
  return g;
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

/// Accumulates d(loss)/d(params) for one example into grads; returns its loss.
double backprop(const AttributeClassifier& clf, const std::vector<DenseLayer*>& layers,
                const LabeledLatent& ex, double weight, std::vector<LayerGrad>& grads) {
  const std::vector<Vector> acts = hidden_activations(clf, ex.z);
  const Vector logits = affine(clf.head(), acts.back());

  Vector dlogits(logits.size());
  double loss = 0.0;
  if (clf.attr().head() == HeadKind::sigmoid) {
    const double y = ex.label == 1 ? 1.0 : 0.0;
    loss = softplus(logits[0]) - y * logits[0];
    dlogits[0] = 1.0 / (1.0 + std::exp(-logits[0])) - y;
  } else {
    const Vector p = probabilities(clf.attr(), logits);
    const double peak = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (double l : logits) total += std::exp(l - peak);
    loss = peak + std::log(total) - logits[ex.label];
    for (std::size_t i = 0; i < p.size(); ++i) dlogits[i] = p[i] - (i == ex.label ? 1.0 : 0.0);
  }
  dlogits *= weight;

  Vector delta = dlogits;
  for (std::size_t l = layers.size(); l-- > 0;) {
    const DenseLayer& layer = *layers[l];
    const Vector& input = acts[l];
    LayerGrad& g = grads[l];
    for (std::size_t r = 0; r < layer.out(); ++r) {
      const double d = delta[r];
      if (d == 0.0) continue;
      g.bias[r] += d;
      double* gw = g.weights.data() + r * layer.in();
      for (std::size_t c = 0; c < layer.in(); ++c) gw[c] += d * input[c];
    }
    if (l == 0) break;
    delta = matvec_transposed(layer.weights, delta);
    for (std::size_t c = 0; c < delta.size(); ++c) delta[c] *= 1.0 - input[c] * input[c];
  }
  return loss * weight;
}

class ParameterUpdater {
 public:
  ParameterUpdater(const TrainConfig& cfg, const std::vector<DenseLayer*>& layers)
      : cfg_(cfg) {
    if (cfg.optimizer == Optimizer::adam) {
      first_ = zero_grads(layers);
      second_ = zero_grads(layers);
    }
  }

  void apply(const std::vector<DenseLayer*>& layers, const std::vector<LayerGrad>& grads) {
    ++t_;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      update(layers[l]->weights.data(), grads[l].weights, l, true);
      update(layers[l]->bias.data(), grads[l].bias, l, false);
    }
  }

 private:
  void update(double* params, const std::vector<double>& grad, std::size_t layer, bool weights) {
    const double lr = cfg_.learning_rate;
    if (cfg_.optimizer == Optimizer::gradient_descent) {
      for (std::size_t i = 0; i < grad.size(); ++i) params[i] -= lr * grad[i];
      return;
    }
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    auto& m = weights ? first_[layer].weights : first_[layer].bias;
    auto& v = weights ? second_[layer].weights : second_[layer].bias;
    const double c1 = 1.0 - std::pow(beta1, t_);
    const double c2 = 1.0 - std::pow(beta2, t_);
    for (std::size_t i = 0; i < grad.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
      params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }

  const TrainConfig& cfg_;
  std::vector<LayerGrad> first_, second_;
  int t_ = 0;
};

}  // namespace

TrainResult train(std::span<const LabeledLatent> data, const AttributeSpec& attr,
                  const TrainConfig& cfg) {
  attr.validate();
  cfg.validate();
  if (data.empty()) throw CoverageError("attribute '" + attr.id + "': training set is empty");
  const std::size_t dim = data.front().z.size();
  std::vector<std::size_t> per_label(attr.label_count(), 0);
  for (const LabeledLatent& ex : data) {
    if (ex.z.size() != dim) throw DimensionError("training latents do not share one dimension");
    if (ex.label >= attr.label_count()) {
      throw RangeError("label " + std::to_string(ex.label) + " out of range for attribute '" +
                       attr.id + "'");
    }
    if (!ex.z.all_finite()) throw RangeError("training latent contains non-finite values");
    ++per_label[ex.label];
  }
  for (std::size_t label = 0; label < per_label.size(); ++label) {
    if (per_label[label] == 0) {
      throw CoverageError("attribute '" + attr.id + "': class '" + attr.class_names[label] +
                          "' has no training examples");
    }
  }

  Rng rng(cfg.seed);
  Rng init_rng = rng.split(0);
  Rng order_rng = rng.split(1);
  AttributeClassifier clf =
      AttributeClassifier::random(attr, dim, cfg.hidden_width, init_rng, cfg.hidden_layers);
  const std::vector<DenseLayer*> layers = ClassifierTrainer::layers(clf);
  ParameterUpdater updater(cfg, layers);

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch = std::min(cfg.batch_size, data.size());
  double epoch_loss = 0.0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (batch < data.size()) order_rng.shuffle(order);
    epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t stop = std::min(start + batch, order.size());
      const double weight = 1.0 / static_cast<double>(stop - start);
      std::vector<LayerGrad> grads = zero_grads(layers);
      for (std::size_t k = start; k < stop; ++k) {
        epoch_loss += backprop(clf, layers, data[order[k]], weight, grads) *
                      static_cast<double>(stop - start) / static_cast<double>(data.size());
      }
      updater.apply(layers, grads);
    }
    if (!std::isfinite(epoch_loss)) {
      throw DivergenceError(epoch, "attribute '" + attr.id + "': loss became non-finite at epoch " +
                                       std::to_string(epoch));
    }
  }
  auto finite = [](const DenseLayer* l) { return l->weights.all_finite() && l->bias.all_finite(); };
  if (!std::all_of(layers.begin(), layers.end(), finite)) {
    throw DivergenceError(cfg.epochs - 1, "attribute '" + attr.id +
                                              "': parameters became non-finite at epoch " +
                                              std::to_string(cfg.epochs - 1));
  }

  TrainResult result{std::move(clf), epoch_loss, 0.0};
  result.train_accuracy = accuracy(result.classifier, data);
  return result;
}

double accuracy(const AttributeClassifier& clf, std::span<const LabeledLatent> data) {
  if (data.empty()) throw EmptyInputError("accuracy: empty data");
  std::size_t hits = 0;
  for (const LabeledLatent& ex : data) {
    if (predicted_label(clf.attr(), forward(clf, ex.z)) == ex.label) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

}  // namespace gradctrl
