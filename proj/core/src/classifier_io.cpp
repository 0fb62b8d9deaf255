#include <string>

#include "gradctrl/binary_io.hpp"
#include "gradctrl/classifier.hpp"
#include "gradctrl/errors.hpp"

// GCLF layout (all integers and floats little-endian):
//   "GCLF"            4 bytes
//   version           u16   1 = two hidden layers, 2 = explicit hidden-layer count
//   d, h, d_k         u32 x 3
//   hidden_layers     u32   (version 2 only)
//   id_len            u32, followed by id_len UTF-8 bytes
//   W1, b1, [W2, b2, ...], W_out, b_out   as f64, row-major

namespace gradctrl {

namespace {

constexpr char kMagic[] = "GCLF";
constexpr std::uint16_t kVersionTwoHidden = 1;
constexpr std::uint16_t kVersionLayerCount = 2;
// Upper bounds that keep a corrupt header from requesting absurd allocations.
constexpr std::uint32_t kMaxDim = 1u << 20;
constexpr std::uint32_t kMaxIdLen = 1u << 16;
constexpr std::uint32_t kMaxHiddenLayers = 64;

void put_layer(io::ByteWriter& w, const DenseLayer& layer) {
  w.put_doubles(layer.weights.span());
  w.put_doubles(layer.bias.span());
}

DenseLayer get_layer(io::ByteReader& r, std::size_t out, std::size_t in, const char* what) {
  r.need((out * in + out) * sizeof(double), what);
  DenseLayer layer{Matrix(out, in), Vector(out)};
  r.get_doubles({layer.weights.data(), layer.weights.size()}, what);
  r.get_doubles(layer.bias.span(), what);
  return layer;
}

std::vector<std::string> class_names_for(std::size_t num_classes) {
  if (num_classes == 1) return {"absent", "present"};
  std::vector<std::string> names;
  for (std::size_t i = 0; i < num_classes; ++i) names.push_back("class" + std::to_string(i));
  return names;
}

}  // namespace

std::vector<std::uint8_t> save(const AttributeClassifier& clf) {
  io::ByteWriter w;
  w.put_bytes(std::string_view(kMagic, 4));
  const bool two_hidden = clf.hidden_layer_count() == 2;
  w.put<std::uint16_t>(two_hidden ? kVersionTwoHidden : kVersionLayerCount);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(clf.input_dim()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(clf.hidden_width()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(clf.output_dim()));
  if (!two_hidden) w.put<std::uint32_t>(static_cast<std::uint32_t>(clf.hidden_layer_count()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(clf.attr().id.size()));
  w.put_bytes(clf.attr().id);
  for (const DenseLayer& layer : clf.hidden()) put_layer(w, layer);
  put_layer(w, clf.head());
  return w.take();
}

AttributeClassifier load(std::span<const std::uint8_t> blob) {
  io::ByteReader r(blob);
  const std::string magic = r.get_string(4, "magic");
  if (magic != kMagic) throw FormatError(0, "bad magic bytes: expected 'GCLF'");

  const std::size_t version_at = r.offset();
  const auto version = r.get<std::uint16_t>("version");
  if (version != kVersionTwoHidden && version != kVersionLayerCount) {
    throw FormatError(version_at, "unsupported GCLF version " + std::to_string(version));
  }
  const std::size_t dims_at = r.offset();
  const auto d = r.get<std::uint32_t>("input dim");
  const auto h = r.get<std::uint32_t>("hidden width");
  const auto dk = r.get<std::uint32_t>("class count");
  if (d == 0 || h == 0 || dk == 0 || d > kMaxDim || h > kMaxDim || dk > kMaxDim) {
    throw FormatError(dims_at, "declared dimensions out of range (d=" + std::to_string(d) +
                                   ", h=" + std::to_string(h) + ", d_k=" + std::to_string(dk) + ")");
  }
  std::uint32_t hidden_layers = 2;
  if (version == kVersionLayerCount) {
    const std::size_t at = r.offset();
    hidden_layers = r.get<std::uint32_t>("hidden layer count");
    if (hidden_layers == 0 || hidden_layers > kMaxHiddenLayers) {
      throw FormatError(at, "hidden layer count " + std::to_string(hidden_layers) + " out of range");
    }
  }
  const std::size_t id_at = r.offset();
  const auto id_len = r.get<std::uint32_t>("id length");
  if (id_len == 0 || id_len > kMaxIdLen) {
    throw FormatError(id_at, "attribute id length " + std::to_string(id_len) + " out of range");
  }
  std::string id = r.get_string(id_len, "attribute id");

  const std::size_t params_at = r.offset();
  const std::size_t expected = (static_cast<std::size_t>(h) * d + h) +
                               (hidden_layers - 1) * (static_cast<std::size_t>(h) * h + h) +
                               (static_cast<std::size_t>(dk) * h + dk);
  if (r.remaining() != expected * sizeof(double)) {
    throw FormatError(params_at, "parameter block holds " + std::to_string(r.remaining()) +
                                     " bytes but declared dims need " +
                                     std::to_string(expected * sizeof(double)));
  }

  std::vector<DenseLayer> hidden;
  hidden.push_back(get_layer(r, h, d, "W1/b1"));
  for (std::uint32_t l = 1; l < hidden_layers; ++l) hidden.push_back(get_layer(r, h, h, "hidden layer"));
  DenseLayer head = get_layer(r, dk, h, "W_out/b_out");

  AttributeSpec spec{std::move(id), dk, class_names_for(dk)};
  try {
    return AttributeClassifier(std::move(spec), std::move(hidden), std::move(head));
  } catch (const Error& e) {
    throw FormatError(params_at, std::string("invalid parameters: ") + e.what());
  }
}

void save_file(const AttributeClassifier& clf, const std::string& path) {
  io::write_file(path, save(clf));
}

AttributeClassifier load_file(const std::string& path) { return load(io::read_file(path)); }

}  // namespace gradctrl
