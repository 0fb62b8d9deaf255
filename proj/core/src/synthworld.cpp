#include "gradctrl/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <thread>

#include "gradctrl/errors.hpp"

namespace gradctrl {

namespace {

/// Lower-triangular Cholesky factor; throws RangeError unless positive definite.
Matrix cholesky(const Matrix& a) {
  const std::size_t n = a.rows();
  Matrix l(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double sum = a(i, j);
      for (std::size_t k = 0; k < j; ++k) sum -= l(i, k) * l(j, k);
      if (i == j) {
        if (sum <= 0.0) throw RangeError("block correlation matrix is not positive definite");
        l(i, i) = std::sqrt(sum);
      } else {
        l(i, j) = sum / l(j, j);
      }
    }
  }
  return l;
}

double phi(const OracleAttribute& attr, double x) {
  if (attr.form == ScoreForm::affine_tanh) return x + attr.tanh_gain * std::tanh(attr.tanh_scale * x);
  return x;
}

double phi_prime(const OracleAttribute& attr, double x) {
  if (attr.form == ScoreForm::affine_tanh) {
    const double t = std::tanh(attr.tanh_scale * x);
    return 1.0 + attr.tanh_gain * attr.tanh_scale * (1.0 - t * t);
  }
  return 1.0;
}

void require_dim(const WorldSpec& world, const Vector& z) {
  if (z.size() != world.dim) {
    throw DimensionError("latent has length " + std::to_string(z.size()) + ", world dim is " +
                         std::to_string(world.dim));
  }
}

/// Block-factor Cholesky, cached per world call site.
Matrix factor_loading(const WorldSpec& world) {
  if (world.blocks.empty()) return {};
  return cholesky(world.correlation);
}

Vector sample_with_loading(const WorldSpec& world, const Matrix& loading, Rng& rng) {
  Vector z = gaussian_sample(rng, world.dim);
  if (world.blocks.empty()) return z;
  Vector u = gaussian_sample(rng, world.blocks.size());
  Vector factors(world.blocks.size());
  for (std::size_t i = 0; i < factors.size(); ++i) {
    for (std::size_t k = 0; k <= i; ++k) factors[i] += loading(i, k) * u[k];
  }
  for (std::size_t b = 0; b < world.blocks.size(); ++b) {
    const ChannelBlock& block = world.blocks[b];
    const double rho = block.coherence;
    const double keep = std::sqrt(1.0 - rho * rho);
    for (std::size_t i = block.begin; i < block.end; ++i) z[i] = rho * factors[b] + keep * z[i];
  }
  return z;
}

void fill_scores(const WorldSpec& world, Bank& bank, std::size_t row_begin, std::size_t row_end) {
  for (std::size_t row = row_begin; row < row_end; ++row) {
    const Vector z = bank.latents.row_vector(row);
    for (std::size_t a = 0; a < world.attributes.size(); ++a) {
      const OracleAttribute& attr = world.attributes[a];
      const Vector s = oracle_score(world, attr.id, z);
      std::copy(s.begin(), s.end(), bank.scores[a].row(row).begin());
      bank.labels[a][row] = predicted_label(attr.spec(), s);
    }
  }
}

Bank empty_bank(const WorldSpec& world, Matrix latents) {
  Bank bank;
  bank.dim = world.dim;
  const std::size_t n = latents.rows();
  bank.latents = std::move(latents);
  for (const OracleAttribute& attr : world.attributes) {
    bank.attr_ids.push_back(attr.id);
    bank.scores.emplace_back(n, attr.num_classes);
    bank.labels.emplace_back(n, 0);
  }
  return bank;
}

}  // namespace

void WorldSpec::validate() const {
  if (dim == 0) throw RangeError("world dim must be positive");
  for (const ChannelBlock& block : blocks) {
    if (block.begin >= block.end || block.end > dim) {
      throw RangeError("block '" + block.id + "' is empty or exceeds the latent dimension");
    }
    if (!(block.coherence >= 0.0 && block.coherence < 1.0)) {
      throw RangeError("block '" + block.id + "' coherence must lie in [0, 1)");
    }
  }
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    for (std::size_t j = i + 1; j < blocks.size(); ++j) {
      if (blocks[i].begin < blocks[j].end && blocks[j].begin < blocks[i].end) {
        throw RangeError("blocks '" + blocks[i].id + "' and '" + blocks[j].id + "' overlap");
      }
    }
  }
  if (correlation.rows() != blocks.size() || correlation.cols() != blocks.size()) {
    throw DimensionError("correlation matrix must be blocks x blocks");
  }
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (correlation(i, i) != 1.0) throw RangeError("correlation diagonal must be 1");
    for (std::size_t j = 0; j < i; ++j) {
      if (correlation(i, j) != correlation(j, i)) throw RangeError("correlation must be symmetric");
    }
  }
  if (!blocks.empty()) cholesky(correlation);

  for (std::size_t a = 0; a < attributes.size(); ++a) {
    const OracleAttribute& attr = attributes[a];
    attr.spec().validate();
    for (std::size_t b = 0; b < a; ++b) {
      if (attributes[b].id == attr.id) throw RangeError("duplicate attribute id '" + attr.id + "'");
    }
    if (attr.support.empty()) throw RangeError("attribute '" + attr.id + "' has empty support");
    for (std::size_t c : attr.support) {
      if (c >= dim) throw RangeError("attribute '" + attr.id + "' support exceeds world dim");
    }
    if (attr.weights.rows() != attr.num_classes || attr.weights.cols() != attr.support.size() ||
        attr.bias.size() != attr.num_classes) {
      throw DimensionError("attribute '" + attr.id + "' weight/bias shape mismatch");
    }
    if (!attr.weights.all_finite() || !attr.bias.all_finite() || !std::isfinite(attr.tanh_gain) ||
        !std::isfinite(attr.tanh_scale)) {
      throw RangeError("attribute '" + attr.id + "' has non-finite parameters");
    }
    for (const ConfoundTerm& term : attr.confounds) {
      if (term.attr == attr.id) throw RangeError("attribute '" + attr.id + "' confounds itself");
      attribute(term.attr);
      if (!std::isfinite(term.weight)) throw RangeError("non-finite confound weight");
    }
  }
}

const OracleAttribute& WorldSpec::attribute(std::string_view id) const {
  return attributes[attribute_index(id)];
}

std::size_t WorldSpec::attribute_index(std::string_view id) const {
  for (std::size_t i = 0; i < attributes.size(); ++i) {
    if (attributes[i].id == id) return i;
  }
  throw LookupError("unknown attribute '" + std::string(id) + "'");
}

std::vector<std::string> WorldSpec::attribute_ids() const {
  std::vector<std::string> ids;
  for (const OracleAttribute& attr : attributes) ids.push_back(attr.id);
  return ids;
}

std::vector<std::size_t> WorldSpec::dependency_channels(std::string_view id) const {
  const OracleAttribute& attr = attribute(id);
  std::vector<std::size_t> channels = attr.support;
  for (const ConfoundTerm& term : attr.confounds) {
    const auto& other = attribute(term.attr).support;
    channels.insert(channels.end(), other.begin(), other.end());
  }
  std::sort(channels.begin(), channels.end());
  channels.erase(std::unique(channels.begin(), channels.end()), channels.end());
  return channels;
}

namespace {

// Default world layout. Each binary attribute owns one coherent block; the
// score is kScoreGain times the block mean.
constexpr std::size_t kDefaultDim = 512;
constexpr std::size_t kBinaryBlock = 80;
constexpr std::size_t kColorBlock = 64;
constexpr double kCoherence = 0.9;
constexpr double kScoreGain = 2.0;
constexpr double kConfoundCorrelation = 0.6;
constexpr double kAgeTanhGain = 1.0;
constexpr double kAgeTanhScale = 1.0;

std::vector<std::size_t> channel_range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(i);
  return out;
}

OracleAttribute block_attribute(const std::string& id, std::size_t begin, std::size_t size) {
  OracleAttribute attr;
  attr.id = id;
  attr.num_classes = 1;
  attr.class_names = {"absent", "present"};
  attr.support = channel_range(begin, begin + size);
  attr.weights = Matrix(1, size, kScoreGain / static_cast<double>(size));
  attr.bias = Vector(1);
  return attr;
}

}  // namespace

WorldSpec default_world(std::uint64_t seed) {
  WorldSpec world;
  world.dim = kDefaultDim;
  world.seed = seed;

  const std::vector<std::string> binary = {"gender", "smile", "glasses", "age"};
  std::size_t cursor = 0;
  for (const std::string& id : binary) {
    world.blocks.push_back({id, cursor, cursor + kBinaryBlock, kCoherence});
    world.attributes.push_back(block_attribute(id, cursor, kBinaryBlock));
    cursor += kBinaryBlock;
  }
  world.attributes[3].form = ScoreForm::affine_tanh;
  world.attributes[3].tanh_gain = kAgeTanhGain;
  world.attributes[3].tanh_scale = kAgeTanhScale;

  // Color: two coherent blocks (a, b); class scores are +a, +b, -a, -b, so
  // argmax partitions the factor plane into four equiprobable quadrants.
  const std::size_t color_a = cursor;
  const std::size_t color_b = cursor + kColorBlock;
  world.blocks.push_back({"color_a", color_a, color_b, kCoherence});
  world.blocks.push_back({"color_b", color_b, color_b + kColorBlock, kCoherence});
  OracleAttribute color;
  color.id = "color";
  color.num_classes = 4;
  color.class_names = {"red", "green", "blue", "white"};
  color.support = channel_range(color_a, color_b + kColorBlock);
  color.weights = Matrix(4, 2 * kColorBlock);
  color.bias = Vector(4);
  const double w = kScoreGain / static_cast<double>(kColorBlock);
  for (std::size_t i = 0; i < kColorBlock; ++i) {
    color.weights(0, i) = w;
    color.weights(1, kColorBlock + i) = w;
    color.weights(2, i) = -w;
    color.weights(3, kColorBlock + i) = -w;
  }
  world.attributes.push_back(std::move(color));

  // Planted confounds: gender/smile and age/glasses factors are correlated,
  // so small training sets entangle them while the oracle scores stay separate.
  world.correlation = Matrix::identity(world.blocks.size());
  world.correlation(0, 1) = world.correlation(1, 0) = kConfoundCorrelation;
  world.correlation(2, 3) = world.correlation(3, 2) = kConfoundCorrelation;
  world.validate();
  return world;
}

Vector oracle_score(const WorldSpec& world, std::string_view attr_id, const Vector& z) {
  require_dim(world, z);
  const OracleAttribute& attr = world.attribute(attr_id);
  Vector out = attr.bias;
  for (std::size_t c = 0; c < attr.num_classes; ++c) {
    auto w = attr.weights.row(c);
    double sum = 0.0;
    for (std::size_t s = 0; s < attr.support.size(); ++s) sum += w[s] * phi(attr, z[attr.support[s]]);
    out[c] += sum;
  }
  for (const ConfoundTerm& term : attr.confounds) {
    const OracleAttribute& other = world.attribute(term.attr);
    auto w = other.weights.row(0);
    double sum = 0.0;
    for (std::size_t s = 0; s < other.support.size(); ++s) sum += w[s] * z[other.support[s]];
    for (double& v : out) v += term.weight * sum;
  }
  return out;
}

Vector oracle_gradient(const WorldSpec& world, std::string_view attr_id, const Vector& z,
                       std::size_t class_j) {
  require_dim(world, z);
  const OracleAttribute& attr = world.attribute(attr_id);
  if (class_j >= attr.num_classes) {
    throw IndexError("class " + std::to_string(class_j) + " out of range for '" + attr.id + "'");
  }
  Vector grad(world.dim);
  auto w = attr.weights.row(class_j);
  for (std::size_t s = 0; s < attr.support.size(); ++s) {
    const std::size_t i = attr.support[s];
    grad[i] += w[s] * phi_prime(attr, z[i]);
  }
  for (const ConfoundTerm& term : attr.confounds) {
    const OracleAttribute& other = world.attribute(term.attr);
    auto ow = other.weights.row(0);
    for (std::size_t s = 0; s < other.support.size(); ++s) grad[other.support[s]] += term.weight * ow[s];
  }
  return grad;
}

std::size_t oracle_label(const WorldSpec& world, std::string_view attr_id, const Vector& z) {
  return predicted_label(world.attribute(attr_id).spec(), oracle_score(world, attr_id, z));
}

double boundary_logit(const Vector& scores) {
  if (scores.empty()) throw EmptyInputError("boundary_logit: no scores");
  if (scores.size() == 1) return scores[0];
  double top = -INFINITY, second = -INFINITY;
  for (double s : scores) {
    if (s > top) {
      second = top;
      top = s;
    } else if (s > second) {
      second = s;
    }
  }
  return top - second;
}

Vector sample_latent(const WorldSpec& world, Rng& rng) {
  return sample_with_loading(world, factor_loading(world), rng);
}

std::size_t Bank::attr_index(std::string_view id) const {
  for (std::size_t i = 0; i < attr_ids.size(); ++i) {
    if (attr_ids[i] == id) return i;
  }
  throw LookupError("bank has no attribute '" + std::string(id) + "'");
}

Bank sample_bank(const WorldSpec& world, std::size_t n, Rng& rng, unsigned threads) {
  if (n == 0) throw RangeError("sample_bank: n must be at least 1");
  world.validate();
  const Matrix loading = factor_loading(world);
  const Rng base(rng.next_u64());
  Bank bank = empty_bank(world, Matrix(n, world.dim));

  const std::size_t shards = (n + kBankShardRows - 1) / kBankShardRows;
  auto run_shard = [&](std::size_t shard) {
    Rng shard_rng = base.split(shard);
    const std::size_t begin = shard * kBankShardRows;
    const std::size_t end = std::min(n, begin + kBankShardRows);
    for (std::size_t row = begin; row < end; ++row) {
      const Vector z = sample_with_loading(world, loading, shard_rng);
      std::copy(z.begin(), z.end(), bank.latents.row(row).begin());
    }
    fill_scores(world, bank, begin, end);
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(threads, shards));
  if (workers == 1) {
    for (std::size_t s = 0; s < shards; ++s) run_shard(s);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t s = w; s < shards; s += workers) run_shard(s);
      });
    }
  }
  return bank;
}

Bank label_bank(const WorldSpec& world, Matrix latents) {
  if (latents.cols() != world.dim) {
    throw DimensionError("bank latents have " + std::to_string(latents.cols()) +
                         " columns, world dim is " + std::to_string(world.dim));
  }
  Bank bank = empty_bank(world, std::move(latents));
  fill_scores(world, bank, 0, bank.size());
  return bank;
}

BoundarySubset boundary_sample(const Bank& bank, std::string_view attr_id, double margin,
                               std::size_t count) {
  if (!(margin > 0.0)) throw RangeError("boundary_sample: margin must be positive");
  const std::size_t a = bank.attr_index(attr_id);
  BoundarySubset subset;
  for (std::size_t row = 0; row < bank.size() && subset.rows.size() < count; ++row) {
    auto s = bank.scores[a].row(row);
    const double logit = boundary_logit(Vector(std::vector<double>(s.begin(), s.end())));
    if (logit > -margin && logit < margin) subset.rows.push_back(row);
  }
  subset.shortfall = subset.rows.size() < count;
  return subset;
}

std::vector<LabeledLatent> make_training_set(const WorldSpec& world, std::string_view attr_id,
                                             std::size_t per_class, Rng& rng,
                                             std::size_t max_draws) {
  if (per_class == 0) throw RangeError("make_training_set: per_class must be at least 1");
  const OracleAttribute& attr = world.attribute(attr_id);
  const AttributeSpec spec = attr.spec();
  const Matrix loading = factor_loading(world);
  std::vector<std::size_t> have(spec.label_count(), 0);
  std::size_t missing = per_class * spec.label_count();
  std::vector<LabeledLatent> out;
  out.reserve(missing);
  for (std::size_t draw = 0; draw < max_draws && missing > 0; ++draw) {
    Vector z = sample_with_loading(world, loading, rng);
    const std::size_t label = predicted_label(spec, oracle_score(world, attr.id, z));
    if (have[label] < per_class) {
      ++have[label];
      --missing;
      out.push_back({std::move(z), label});
    }
  }
  for (std::size_t label = 0; label < have.size(); ++label) {
    if (have[label] < per_class) {
      throw CoverageError("attribute '" + attr.id + "': class '" + spec.class_names[label] +
                          "' reached only " + std::to_string(have[label]) + " of " +
                          std::to_string(per_class) + " examples after " +
                          std::to_string(max_draws) + " draws");
    }
  }
  return out;
}

std::vector<LabeledLatent> training_set_from_bank(const Bank& bank, std::string_view attr_id,
                                                  std::size_t per_class) {
  if (per_class == 0) throw RangeError("training_set_from_bank: per_class must be at least 1");
  const std::size_t a = bank.attr_index(attr_id);
  const std::size_t labels = bank.scores[a].cols() == 1 ? 2 : bank.scores[a].cols();
  std::vector<std::size_t> have(labels, 0);
  std::vector<LabeledLatent> out;
  for (std::size_t row = 0; row < bank.size() && out.size() < per_class * labels; ++row) {
    const std::size_t label = bank.labels[a][row];
    if (have[label] < per_class) {
      ++have[label];
      out.push_back({bank.latent(row), label});
    }
  }
  for (std::size_t label = 0; label < labels; ++label) {
    if (have[label] < per_class) {
      throw CoverageError("attribute '" + std::string(attr_id) + "': bank holds only " +
                          std::to_string(have[label]) + " rows of class " + std::to_string(label) +
                          ", need " + std::to_string(per_class));
    }
  }
  return out;
}

}  // namespace gradctrl
