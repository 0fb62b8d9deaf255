#include <sstream>
#include <string>

#include <json.hpp>

#include "gradctrl/binary_io.hpp"
#include "gradctrl/errors.hpp"
#include "gradctrl/synthworld.hpp"

namespace gradctrl {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr char kBankMagic[] = "GCLB";
constexpr std::uint16_t kBankVersion = 1;

const char* form_name(ScoreForm form) {
  return form == ScoreForm::affine_tanh ? "affine_tanh" : "affine";
}

ScoreForm parse_form(const std::string& name) {
  if (name == "affine") return ScoreForm::affine;
  if (name == "affine_tanh") return ScoreForm::affine_tanh;
  throw FormatError(0, "unknown score form '" + name + "'");
}

ordered_json matrix_json(const Matrix& m) {
  ordered_json rows = ordered_json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return rows;
}

Matrix matrix_from_json(const ordered_json& rows, std::size_t expected_cols_hint) {
  const std::size_t n = rows.size();
  const std::size_t cols = n == 0 ? expected_cols_hint : rows.at(0).size();
  std::vector<double> data;
  for (const auto& row : rows) {
    if (row.size() != cols) throw FormatError(0, "ragged matrix in world file");
    for (const auto& v : row) data.push_back(v.get<double>());
  }
  return Matrix(n, cols, std::move(data));
}

}  // namespace

std::string world_to_json(const WorldSpec& world) {
  ordered_json doc;
  doc["dim"] = world.dim;
  doc["seed"] = world.seed;
  doc["blocks"] = ordered_json::array();
  for (const ChannelBlock& b : world.blocks) {
    doc["blocks"].push_back(
        {{"id", b.id}, {"begin", b.begin}, {"end", b.end}, {"coherence", b.coherence}});
  }
  doc["correlation"] = matrix_json(world.correlation);
  doc["attributes"] = ordered_json::array();
  for (const OracleAttribute& a : world.attributes) {
    ordered_json attr;
    attr["id"] = a.id;
    attr["num_classes"] = a.num_classes;
    attr["class_names"] = a.class_names;
    attr["support"] = a.support;
    attr["weights"] = matrix_json(a.weights);
    attr["bias"] = a.bias.values();
    attr["form"] = form_name(a.form);
    attr["tanh_gain"] = a.tanh_gain;
    attr["tanh_scale"] = a.tanh_scale;
    attr["confounds"] = ordered_json::array();
    for (const ConfoundTerm& t : a.confounds) {
      attr["confounds"].push_back({{"attr", t.attr}, {"weight", t.weight}});
    }
    doc["attributes"].push_back(std::move(attr));
  }
  return doc.dump(2) + "\n";
}

WorldSpec world_from_json(std::string_view text) {
  ordered_json doc;
  try {
    doc = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(e.byte, std::string("world file is not valid JSON: ") + e.what());
  }
  WorldSpec world;
  try {
    world.dim = doc.at("dim").get<std::size_t>();
    world.seed = doc.at("seed").get<std::uint64_t>();
    for (const auto& b : doc.at("blocks")) {
      world.blocks.push_back({b.at("id").get<std::string>(), b.at("begin").get<std::size_t>(),
                              b.at("end").get<std::size_t>(), b.at("coherence").get<double>()});
    }
    world.correlation = matrix_from_json(doc.at("correlation"), 0);
    for (const auto& j : doc.at("attributes")) {
      OracleAttribute a;
      a.id = j.at("id").get<std::string>();
      a.num_classes = j.at("num_classes").get<std::size_t>();
      a.class_names = j.at("class_names").get<std::vector<std::string>>();
      a.support = j.at("support").get<std::vector<std::size_t>>();
      a.weights = matrix_from_json(j.at("weights"), a.support.size());
      a.bias = Vector(j.at("bias").get<std::vector<double>>());
      a.form = parse_form(j.at("form").get<std::string>());
      a.tanh_gain = j.value("tanh_gain", 0.0);
      a.tanh_scale = j.value("tanh_scale", 1.0);
      if (j.contains("confounds")) {
        for (const auto& t : j.at("confounds")) {
          a.confounds.push_back({t.at("attr").get<std::string>(), t.at("weight").get<double>()});
        }
      }
      world.attributes.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(0, std::string("malformed world file: ") + e.what());
  }
  world.validate();
  return world;
}

void save_world(const WorldSpec& world, const std::string& path) {
  io::write_text_file(path, world_to_json(world));
}

WorldSpec load_world(const std::string& path) { return world_from_json(io::read_text_file(path)); }

std::vector<std::uint8_t> encode_bank_latents(const Matrix& latents) {
  io::ByteWriter w;
  w.bytes().reserve(18 + latents.size() * sizeof(double));
  w.put_bytes(std::string_view(kBankMagic, 4));
  w.put<std::uint16_t>(kBankVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(latents.cols()));
  w.put<std::uint64_t>(static_cast<std::uint64_t>(latents.rows()));
  w.put_doubles(latents.span());
  return w.take();
}

Matrix decode_bank_latents(std::span<const std::uint8_t> blob) {
  io::ByteReader r(blob);
  const std::string magic = r.get_string(4, "magic");
  if (magic != kBankMagic) {
    std::ostringstream shown;
    for (unsigned char c : magic) {
      if (c >= 32 && c < 127) shown << c;
      else shown << "\\x" << std::hex << static_cast<int>(c) << std::dec;
    }
    throw FormatError(0, "bad magic bytes '" + shown.str() + "': expected 'GCLB'");
  }
  const std::size_t version_at = r.offset();
  const auto version = r.get<std::uint16_t>("version");
  if (version != kBankVersion) {
    throw FormatError(version_at, "unsupported GCLB version " + std::to_string(version));
  }
  const std::size_t dims_at = r.offset();
  const auto d = r.get<std::uint32_t>("dim");
  const auto n = r.get<std::uint64_t>("row count");
  if (d == 0 || n == 0) throw FormatError(dims_at, "bank dims must be positive");
  if (r.remaining() / sizeof(double) / d < n || r.remaining() != n * d * sizeof(double)) {
    throw FormatError(r.offset(), "latent block holds " + std::to_string(r.remaining()) +
                                      " bytes but header declares " + std::to_string(n) + " x " +
                                      std::to_string(d) + " f64");
  }
  Matrix latents(static_cast<std::size_t>(n), d);
  r.get_doubles({latents.data(), latents.size()}, "latents");
  return latents;
}

std::string encode_bank_labels(const Bank& bank) {
  std::string out;
  for (std::size_t row = 0; row < bank.size(); ++row) {
    ordered_json line = ordered_json::object();
    for (std::size_t a = 0; a < bank.attr_ids.size(); ++a) line[bank.attr_ids[a]] = bank.labels[a][row];
    out += line.dump();
    out += '\n';
  }
  return out;
}

LabelTable decode_bank_labels(std::string_view text) {
  LabelTable table;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    const std::string_view line = text.substr(pos, eol - pos);
    const std::size_t line_at = pos;
    pos = eol + 1;
    if (line.empty()) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(line_at + e.byte, "label line " + std::to_string(line_no) + " is not JSON");
    }
    if (line_no == 0) {
      for (auto it = j.begin(); it != j.end(); ++it) table.attr_ids.push_back(it.key());
    }
    std::vector<std::size_t> row;
    for (const std::string& id : table.attr_ids) {
      if (!j.contains(id)) {
        throw FormatError(line_at, "label line " + std::to_string(line_no) + " lacks '" + id + "'");
      }
      row.push_back(j.at(id).get<std::size_t>());
    }
    table.rows.push_back(std::move(row));
    ++line_no;
  }
  return table;
}

void save_bank(const Bank& bank, const std::string& latents_path, const std::string& labels_path) {
  io::write_file(latents_path, encode_bank_latents(bank.latents));
  io::write_text_file(labels_path, encode_bank_labels(bank));
}

Bank load_bank(const WorldSpec& world, const std::string& latents_path) {
  return label_bank(world, decode_bank_latents(io::read_file(latents_path)));
}

}  // namespace gradctrl
