#include <string>

#include <json.hpp>

#include "gradctrl/control.hpp"
#include "gradctrl/errors.hpp"

namespace gradctrl {

using ordered_json = nlohmann::ordered_json;

std::string trajectory_to_jsonl(const Trajectory& trajectory) {
  std::string out;
  for (std::size_t i = 0; i < trajectory.steps.size(); ++i) {
    const TrajectoryStep& s = trajectory.steps[i];
    ordered_json line;
    line["step"] = i;
    line["z"] = s.z.values();
    ordered_json logits = ordered_json::object();
    for (const auto& [attr, values] : s.logits) logits[attr] = values.values();
    line["logits"] = std::move(logits);
    out += line.dump();
    out += '\n';
  }
  ordered_json tail;
  tail["stop_reason"] = std::string(to_string(trajectory.stop_reason));
  tail["target"] = trajectory.target_attr;
  tail["target_class"] = trajectory.target_class;
  out += tail.dump();
  out += '\n';
  return out;
}

Trajectory trajectory_from_jsonl(std::string_view text) {
  Trajectory traj;
  bool finished = false;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    const std::string_view line = text.substr(pos, eol - pos);
    const std::size_t line_at = pos;
    pos = eol + 1;
    if (line.empty()) continue;
    if (finished) throw FormatError(line_at, "trajectory has lines after the stop_reason line");
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(line_at + e.byte, "trajectory line is not valid JSON");
    }
    try {
      if (j.contains("stop_reason")) {
        traj.stop_reason = parse_stop_reason(j.at("stop_reason").get<std::string>());
        traj.target_attr = j.value("target", std::string());
        traj.target_class = j.value("target_class", std::size_t{0});
        finished = true;
        continue;
      }
      if (j.at("step").get<std::size_t>() != traj.steps.size()) {
        throw FormatError(line_at, "trajectory steps are not consecutive");
      }
      TrajectoryStep s;
      s.z = Vector(j.at("z").get<std::vector<double>>());
      for (auto it = j.at("logits").begin(); it != j.at("logits").end(); ++it) {
        s.logits.emplace(it.key(), Vector(it.value().get<std::vector<double>>()));
      }
      traj.steps.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(line_at, std::string("malformed trajectory line: ") + e.what());
    }
  }
  if (!finished) throw FormatError(text.size(), "trajectory lacks a stop_reason line");
  if (traj.steps.empty()) throw FormatError(0, "trajectory has no steps");
  return traj;
}

}  // namespace gradctrl
