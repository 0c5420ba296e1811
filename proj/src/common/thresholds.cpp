#include "ipx/thresholds.hpp"

#include "ipx/error.hpp"
#include "ipx/image.hpp"

namespace ipx {

double ThresholdTable::threshold_for(double far) const {
  if (thresholds.empty()) throw Error(ErrorCode::MissingThresholdTable, "threshold table is empty");
  if (!(far >= 0.0 && far <= 1.0)) throw Error(ErrorCode::InvalidArgument, "FAR must be in [0, 1]");
  auto it = thresholds.upper_bound(far);
  if (it == thresholds.begin()) {
    throw Error(ErrorCode::InvalidArgument, "FAR " + std::to_string(far) + " is below every tabulated rate");
  }
  return std::prev(it)->second;
}

nlohmann::json to_json(const ThresholdTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [far, thr] : t.thresholds) rows.push_back({{"far", far}, {"threshold", thr}});
  return {{"format", "ipx-thresholds"}, {"version", 1}, {"stack", t.stack}, {"provenance", t.provenance},
          {"thresholds", rows}};
}

ThresholdTable threshold_table_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "ipx-thresholds") {
      throw Error(ErrorCode::UnsupportedFormat, "not a threshold table");
    }
    if (j.at("version").get<int>() != 1) throw Error(ErrorCode::VersionMismatch, "threshold table version");
    ThresholdTable t;
    t.stack = j.at("stack").get<std::string>();
    t.provenance = j.value("provenance", "");
    for (const auto& row : j.at("thresholds")) t.thresholds[row.at("far").get<double>()] = row.at("threshold").get<double>();
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptData, std::string("threshold table json: ") + e.what());
  }
}

ThresholdTable load_threshold_table(const std::string& path) {
  auto bytes = read_file_bytes(path);
  auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::CorruptData, "threshold table is not valid json: " + path);
  return threshold_table_from_json(j);
}

}  // namespace ipx
