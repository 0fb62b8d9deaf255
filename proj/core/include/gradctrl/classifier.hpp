#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gradctrl/numeric.hpp"

namespace gradctrl {

enum class HeadKind { sigmoid, softmax };

/// Describes one semantic attribute. num_classes == 1 denotes a binary
/// attribute scored by a single sigmoid logit; >= 2 uses a softmax head.
struct AttributeSpec {
  std::string id;
  std::size_t num_classes = 1;
  std::vector<std::string> class_names;

  static AttributeSpec binary(std::string id);
  static AttributeSpec multiclass(std::string id, std::vector<std::string> class_names);

  HeadKind head() const noexcept { return num_classes == 1 ? HeadKind::sigmoid : HeadKind::softmax; }
  /// Number of distinct labels: 2 for binary attributes, num_classes otherwise.
  std::size_t label_count() const noexcept { return num_classes == 1 ? 2 : num_classes; }

  /// Throws RangeError if the invariants do not hold.
  void validate() const;
};

struct DenseLayer {
  Matrix weights;  // out x in
  Vector bias;     // out

  std::size_t in() const noexcept { return weights.cols(); }
  std::size_t out() const noexcept { return weights.rows(); }
};

/// Latent-to-semantic scoring network: one or two tanh hidden layers of
/// equal width followed by a linear logit layer (the head's pre-activation).
class AttributeClassifier {
 public:
  /// Throws DimensionError if layer shapes do not chain, RangeError if any
  /// parameter is non-finite.
  AttributeClassifier(AttributeSpec attr, std::vector<DenseLayer> hidden, DenseLayer head);

  /// All parameters zero.
  static AttributeClassifier zeros(AttributeSpec attr, std::size_t input_dim,
                                   std::size_t hidden_width, std::size_t hidden_layers = 2);
  /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for every weight and bias.
  static AttributeClassifier random(AttributeSpec attr, std::size_t input_dim,
                                    std::size_t hidden_width, Rng& rng,
                                    std::size_t hidden_layers = 2);

  const AttributeSpec& attr() const noexcept { return attr_; }
  std::size_t input_dim() const noexcept { return hidden_.front().in(); }
  std::size_t hidden_width() const noexcept { return hidden_.front().out(); }
  std::size_t output_dim() const noexcept { return head_.out(); }
  std::size_t hidden_layer_count() const noexcept { return hidden_.size(); }

  std::span<const DenseLayer> hidden() const noexcept { return hidden_; }
  const DenseLayer& head() const noexcept { return head_; }

  /// Adds `shift` to every head bias; logits move by exactly `shift`.
  void shift_head_bias(double shift);

 private:
  friend struct ClassifierTrainer;

  AttributeSpec attr_;
  std::vector<DenseLayer> hidden_;
  DenseLayer head_;
};

/// Pre-activation logits, length num_classes.
Vector forward(const AttributeClassifier& clf, const Vector& z);

/// Sigmoid of the single logit (binary) or softmax over logits (multi-class).
Vector probabilities(const AttributeSpec& attr, const Vector& logits);

/// Binary: 1 iff logit > 0. Multi-class: argmax (lowest index wins ties).
std::size_t predicted_label(const AttributeSpec& attr, const Vector& logits);

/// d(logits)/dz, shape num_classes x input_dim, via the chain rule through
/// every hidden layer.
Matrix input_jacobian(const AttributeClassifier& clf, const Vector& z);

/// Row `class_j` of the input Jacobian: the local control direction for
/// pushing the attribute toward class_j. Binary attributes only accept 0.
Vector gradient_row(const AttributeClassifier& clf, const Vector& z, std::size_t class_j);

struct LabeledLatent {
  Vector z;
  std::size_t label = 0;
};

enum class Optimizer { gradient_descent, adam };

struct TrainConfig {
  std::size_t examples_per_class = 30;
  int epochs = 500;
  double learning_rate = 0.05;
  /// Batches larger than the dataset mean full-batch descent.
  std::size_t batch_size = 1024;
  std::uint64_t seed = 0;
  std::size_t hidden_width = 32;
  std::size_t hidden_layers = 2;
  Optimizer optimizer = Optimizer::gradient_descent;

  void validate() const;
};

struct TrainResult {
  AttributeClassifier classifier;
  double final_loss = 0.0;
  double train_accuracy = 0.0;
};

/// Fits a classifier by minimizing cross-entropy (binary or categorical).
/// Deterministic given cfg.seed. Throws CoverageError when a label has no
/// example, DivergenceError when the loss stops being finite.
TrainResult train(std::span<const LabeledLatent> data, const AttributeSpec& attr,
                  const TrainConfig& cfg);

/// Fraction of examples whose predicted label matches.
double accuracy(const AttributeClassifier& clf, std::span<const LabeledLatent> data);

/// GCLF binary encoding; see README for the layout.
std::vector<std::uint8_t> save(const AttributeClassifier& clf);
/// Throws FormatError (with byte offset) on any malformed input.
AttributeClassifier load(std::span<const std::uint8_t> blob);

void save_file(const AttributeClassifier& clf, const std::string& path);
AttributeClassifier load_file(const std::string& path);

}  // namespace gradctrl
