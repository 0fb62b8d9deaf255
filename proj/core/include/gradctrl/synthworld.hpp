#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gradctrl/classifier.hpp"
#include "gradctrl/numeric.hpp"

namespace gradctrl {

/// Contiguous run of latent channels [begin, end) driven by one shared
/// factor. Each channel is coherence * factor + sqrt(1 - coherence^2) * noise,
/// so channels stay unit-variance Gaussian.
struct ChannelBlock {
  std::string id;
  std::size_t begin = 0;
  std::size_t end = 0;
  double coherence = 0.0;

  std::size_t size() const noexcept { return end - begin; }
};

enum class ScoreForm {
  affine,       ///< bias + w . z[support]
  affine_tanh,  ///< bias + w . phi(z[support]), phi(x) = x + gain * tanh(scale * x)
};

/// Adds weight * (row 0 of the named attribute's weights) . z[its support]
/// to every output of the owning attribute.
struct ConfoundTerm {
  std::string attr;
  double weight = 0.0;
};

struct OracleAttribute {
  std::string id;
  std::size_t num_classes = 1;
  std::vector<std::string> class_names;
  std::vector<std::size_t> support;
  Matrix weights;  ///< num_classes x support.size()
  Vector bias;     ///< num_classes
  ScoreForm form = ScoreForm::affine;
  double tanh_gain = 0.0;
  double tanh_scale = 1.0;
  std::vector<ConfoundTerm> confounds;

  AttributeSpec spec() const { return {id, num_classes, class_names}; }
};

/// Ground-truth latent world: a structured Gaussian prior over R^dim plus
/// analytic attribute scores with planted confounds.
struct WorldSpec {
  std::size_t dim = 0;
  std::uint64_t seed = 0;
  std::vector<ChannelBlock> blocks;
  /// Correlation between block factors (blocks x blocks, unit diagonal).
  Matrix correlation;
  std::vector<OracleAttribute> attributes;

  /// Throws RangeError / LookupError / DimensionError on inconsistency.
  void validate() const;

  const OracleAttribute& attribute(std::string_view id) const;
  std::size_t attribute_index(std::string_view id) const;
  std::vector<std::string> attribute_ids() const;
  /// Union of the attribute's own support and its confounds' supports, sorted.
  std::vector<std::size_t> dependency_channels(std::string_view id) const;
};

/// Shipped default: dim 512, four binary attributes (gender, smile, glasses,
/// age) with confounds gender<-smile and age<-glasses, age tanh-squashed,
/// plus a four-class "color" attribute.
WorldSpec default_world(std::uint64_t seed = 2022);

/// Attribute score(s): length num_classes (1 for binary).
Vector oracle_score(const WorldSpec& world, std::string_view attr_id, const Vector& z);
/// Analytic d(score[class_j])/dz.
Vector oracle_gradient(const WorldSpec& world, std::string_view attr_id, const Vector& z,
                       std::size_t class_j = 0);
/// Binary: 1 iff score > 0. Multi-class: argmax.
std::size_t oracle_label(const WorldSpec& world, std::string_view attr_id, const Vector& z);
/// Signed distance-like logit used for boundary selection: the score itself
/// for binary attributes, top-1 minus top-2 score for multi-class ones.
double boundary_logit(const Vector& scores);

/// One draw from the world's latent prior.
Vector sample_latent(const WorldSpec& world, Rng& rng);

/// Latents with oracle scores and labels for every attribute.
struct Bank {
  std::size_t dim = 0;
  Matrix latents;  ///< n x dim
  std::vector<std::string> attr_ids;
  /// scores[a] is n x num_classes(a).
  std::vector<Matrix> scores;
  /// labels[a][row].
  std::vector<std::vector<std::size_t>> labels;

  std::size_t size() const noexcept { return latents.rows(); }
  Vector latent(std::size_t row) const { return latents.row_vector(row); }
  std::size_t attr_index(std::string_view id) const;
};

/// Rows generated per independently seeded shard.
inline constexpr std::size_t kBankShardRows = 4096;

/// n prior draws labeled by the oracle. Shards are seeded from one draw of
/// `rng`, so the result does not depend on how many threads generate it.
Bank sample_bank(const WorldSpec& world, std::size_t n, Rng& rng, unsigned threads = 1);

/// Scores and labels a set of latents (used when reading a bank from disk).
Bank label_bank(const WorldSpec& world, Matrix latents);

struct BoundarySubset {
  std::vector<std::size_t> rows;  ///< bank rows in bank order
  bool shortfall = false;
};

/// Up to `count` rows whose boundary logit for attr_id lies in (-margin, margin).
BoundarySubset boundary_sample(const Bank& bank, std::string_view attr_id, double margin,
                               std::size_t count);

/// Rejection-samples exactly per_class latents for every label of attr_id.
/// Throws CoverageError when some label is still short after max_draws.
std::vector<LabeledLatent> make_training_set(const WorldSpec& world, std::string_view attr_id,
                                             std::size_t per_class, Rng& rng,
                                             std::size_t max_draws = 200000);

/// Oracle-labeled training set drawn from bank rows in order: the first
/// per_class rows of each label. Throws CoverageError when a label is short.
std::vector<LabeledLatent> training_set_from_bank(const Bank& bank, std::string_view attr_id,
                                                  std::size_t per_class);

// World JSON and GCLB bank files.
std::string world_to_json(const WorldSpec& world);
WorldSpec world_from_json(std::string_view text);
void save_world(const WorldSpec& world, const std::string& path);
WorldSpec load_world(const std::string& path);

std::vector<std::uint8_t> encode_bank_latents(const Matrix& latents);
Matrix decode_bank_latents(std::span<const std::uint8_t> blob);
/// One JSON object per row: {"attr": label, ...} in bank attribute order.
std::string encode_bank_labels(const Bank& bank);
/// Parses the label sidecar; returns labels[row] keyed by attribute order in
/// the first line.
struct LabelTable {
  std::vector<std::string> attr_ids;
  std::vector<std::vector<std::size_t>> rows;
};
LabelTable decode_bank_labels(std::string_view text);

void save_bank(const Bank& bank, const std::string& latents_path, const std::string& labels_path);
/// Reads the GCLB latents and re-labels them with the world oracle.
Bank load_bank(const WorldSpec& world, const std::string& latents_path);

}  // namespace gradctrl
