#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "common.hpp"

// Heater telemetry: synthetic generation, CSV ingestion, windowing into
// behavioural patterns and the normalized train/test split.

namespace twinforge::telemetry {

using nlohmann::json;

constexpr int kReadingsPerCycle = 170;
constexpr int kWindowRows = 34;
constexpr int kFeatureCount = 5;
constexpr int kWindowsPerCycle = kReadingsPerCycle / kWindowRows;
constexpr double kSampleSpacingSeconds = 18.0;

inline const std::array<std::string, kFeatureCount>& feature_names() {
  static const std::array<std::string, kFeatureCount> names = {
      "voltage_measured", "current_measured", "temperature_measured", "current_charge",
      "capacity"};
  return names;
}

struct SensorReading {
  double timestamp = 0.0;
  double voltage_measured = 0.0;
  double current_measured = 0.0;
  double temperature_measured = 0.0;
  double current_charge = 0.0;
  double capacity = 0.0;
};

struct Cycle {
  int dt_id = 0;
  int cycle_id = 0;
  std::vector<SensorReading> readings;
};

struct RawPattern {
  int dt_id = 0;
  Matrix values;  // kWindowRows x kFeatureCount, unnormalized
};

struct BehaviouralPattern {
  int dt_id = 0;
  Matrix values;  // kWindowRows x kFeatureCount, in [0,1]
};

struct NormalizationStats {
  std::array<double, kFeatureCount> feature_min{};
  std::array<double, kFeatureCount> feature_max{};

  Matrix normalize(const Matrix& raw) const {
    if (raw.cols() != kFeatureCount) throw DimensionError("pattern must have 5 feature columns");
    Matrix out(raw.rows(), raw.cols());
    for (int f = 0; f < kFeatureCount; ++f) {
      const double range = feature_max[f] - feature_min[f];
      for (Eigen::Index i = 0; i < raw.rows(); ++i)
        out(i, f) = std::clamp((raw(i, f) - feature_min[f]) / range, 0.0, 1.0);
    }
    return out;
  }
};

struct DatasetSplit {
  std::vector<BehaviouralPattern> train, test;
  NormalizationStats stats;
  std::uint64_t split_seed = 0;
};

// ---------------------------------------------------------------------------
// Synthetic generation. Each device twin id fixes its own first-order
// thermal response, voltage sag, current level and per-cycle capacity fade;
// each cycle adds seeded parameter jitter and measurement noise.

inline Cycle generate_cycle(int dt_id, int cycle_index, std::uint64_t root_seed) {
  if (dt_id < 0) throw ArgumentError("dt_id must be non-negative");
  if (cycle_index < 0) throw ArgumentError("cycle_index must be non-negative");
  std::mt19937_64 rng(mix_seed(root_seed, static_cast<std::uint64_t>(dt_id),
                               static_cast<std::uint64_t>(cycle_index)));
  std::normal_distribution<double> gauss(0.0, 1.0);

  const double d = static_cast<double>(dt_id);
  const double ambient = 21.0;
  const double t_inf = 42.0 + 7.0 * d + 0.4 * gauss(rng);
  const double tau_t = (18.0 + 9.0 * d) * (1.0 + 0.03 * gauss(rng));
  const double v0 = 4.1 - 0.05 * d + 0.01 * gauss(rng);
  const double sag = (0.8 + 0.45 * d) * 1e-3;
  const double i0 = 1.4 + 0.18 * d + 0.02 * gauss(rng);
  const double i_noise = 0.008 * (1.0 + 0.7 * d);
  const double ic0 = (0.9 + 0.12 * d) * (1.0 + 0.02 * gauss(rng));
  const double tau_c = 40.0 + 6.0 * d;
  const double fade = (0.5 + 0.35 * d) * 1e-3;
  const double capacity =
      (2.0 + 0.25 * d) * (1.0 - fade * static_cast<double>(cycle_index)) * (1.0 + 0.004 * gauss(rng));

  Cycle cycle;
  cycle.dt_id = dt_id;
  cycle.cycle_id = cycle_index;
  cycle.readings.reserve(kReadingsPerCycle);
  for (int k = 0; k < kReadingsPerCycle; ++k) {
    const double t = static_cast<double>(k);
    SensorReading r;
    r.timestamp = t * kSampleSpacingSeconds;
    r.temperature_measured =
        ambient + (t_inf - ambient) * (1.0 - std::exp(-t / tau_t)) + 0.15 * gauss(rng);
    r.voltage_measured = v0 - sag * t + 0.004 * gauss(rng);
    r.current_measured = i0 + i_noise * gauss(rng);
    r.current_charge = ic0 * std::exp(-t / tau_c) + 0.002 * gauss(rng);
    r.capacity = capacity;
    cycle.readings.push_back(r);
  }
  return cycle;
}

inline std::vector<Cycle> generate_synthetic(int dt_count, int cycles_per_dt,
                                             std::uint64_t seed) {
  if (dt_count < 2) throw ArgumentError("need at least two device twins");
  if (cycles_per_dt < 1) throw ArgumentError("need at least one cycle per device twin");
  std::vector<Cycle> out;
  out.reserve(static_cast<std::size_t>(dt_count) * cycles_per_dt);
  for (int d = 0; d < dt_count; ++d)
    for (int c = 0; c < cycles_per_dt; ++c) out.push_back(generate_cycle(d, c, seed));
  return out;
}

// ---------------------------------------------------------------------------
// Windowing: each cycle yields five non-overlapping 34-row patterns.

inline std::vector<RawPattern> window_cycles(const std::vector<Cycle>& cycles) {
  std::vector<RawPattern> out;
  out.reserve(cycles.size() * kWindowsPerCycle);
  for (const auto& cycle : cycles) {
    if (static_cast<int>(cycle.readings.size()) != kReadingsPerCycle)
      throw ValidationError("cycle (dt " + std::to_string(cycle.dt_id) + ", cycle " +
                            std::to_string(cycle.cycle_id) + ") has " +
                            std::to_string(cycle.readings.size()) + " readings; expected " +
                            std::to_string(kReadingsPerCycle));
    for (int w = 0; w < kWindowsPerCycle; ++w) {
      RawPattern p;
      p.dt_id = cycle.dt_id;
      p.values.resize(kWindowRows, kFeatureCount);
      for (int i = 0; i < kWindowRows; ++i) {
        const SensorReading& r = cycle.readings[static_cast<std::size_t>(w * kWindowRows + i)];
        p.values(i, 0) = r.voltage_measured;
        p.values(i, 1) = r.current_measured;
        p.values(i, 2) = r.temperature_measured;
        p.values(i, 3) = r.current_charge;
        p.values(i, 4) = r.capacity;
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stratified split and train-fitted min-max normalization.

inline DatasetSplit normalize_and_split(const std::vector<RawPattern>& patterns,
                                        double train_fraction, std::uint64_t seed) {
  if (patterns.empty()) throw ArgumentError("no patterns to split");
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ArgumentError("train_fraction must lie strictly between 0 and 1");

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < patterns.size(); ++i) by_class[patterns[i].dt_id].push_back(i);

  std::vector<std::size_t> train_idx, test_idx;
  for (auto& [dt, idx] : by_class) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(dt), 0x5b17));
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_train = static_cast<std::size_t>(
        std::llround(train_fraction * static_cast<double>(idx.size())));
    for (std::size_t k = 0; k < idx.size(); ++k)
      (k < n_train ? train_idx : test_idx).push_back(idx[k]);
  }

  DatasetSplit split;
  split.split_seed = seed;
  for (int f = 0; f < kFeatureCount; ++f) {
    split.stats.feature_min[f] = std::numeric_limits<double>::infinity();
    split.stats.feature_max[f] = -std::numeric_limits<double>::infinity();
  }
  for (std::size_t i : train_idx) {
    const Matrix& v = patterns[i].values;
    for (int f = 0; f < kFeatureCount; ++f) {
      split.stats.feature_min[f] = std::min(split.stats.feature_min[f], v.col(f).minCoeff());
      split.stats.feature_max[f] = std::max(split.stats.feature_max[f], v.col(f).maxCoeff());
    }
  }
  for (int f = 0; f < kFeatureCount; ++f)
    if (!(split.stats.feature_max[f] - split.stats.feature_min[f] > 1e-12))
      throw NormalizationError("feature " + feature_names()[f] +
                               " has zero range in the training split");

  split.train.reserve(train_idx.size());
  split.test.reserve(test_idx.size());
  for (std::size_t i : train_idx)
    split.train.push_back({patterns[i].dt_id, split.stats.normalize(patterns[i].values)});
  for (std::size_t i : test_idx)
    split.test.push_back({patterns[i].dt_id, split.stats.normalize(patterns[i].values)});
  return split;
}

// ---------------------------------------------------------------------------
// Dataset directory: train.bin / test.bin hold the flattened patterns,
// stats.json holds normalization bounds, labels and the split seed.

namespace detail {

inline void write_patterns(const std::filesystem::path& path,
                           const std::vector<BehaviouralPattern>& patterns) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ArgumentError("cannot open " + path.string() + " for writing");
  io::write_magic(os, "TWDT");
  io::write_u32(os, 1);
  io::write_u32(os, static_cast<std::uint32_t>(patterns.size()));
  io::write_u32(os, 0);
  for (const auto& p : patterns)
    for (int i = 0; i < kWindowRows; ++i)
      for (int f = 0; f < kFeatureCount; ++f) io::write_f64(os, p.values(i, f));
}

inline std::vector<Matrix> read_patterns(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArgumentError("cannot open " + path.string());
  io::expect_magic(is, "TWDT", path.string());
  const std::uint32_t version = io::read_u32(is);
  if (version != 1) throw FormatError(path.string() + ": unsupported version");
  const std::uint32_t count = io::read_u32(is);
  io::read_u32(is);  // reserved
  std::vector<Matrix> out;
  out.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    Matrix v(kWindowRows, kFeatureCount);
    for (int i = 0; i < kWindowRows; ++i)
      for (int f = 0; f < kFeatureCount; ++f) v(i, f) = io::read_f64(is);
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace detail

inline void save_dataset(const std::filesystem::path& dir, const DatasetSplit& split) {
  std::filesystem::create_directories(dir);
  detail::write_patterns(dir / "train.bin", split.train);
  detail::write_patterns(dir / "test.bin", split.test);
  json stats;
  stats["feature_names"] = feature_names();
  stats["feature_min"] = split.stats.feature_min;
  stats["feature_max"] = split.stats.feature_max;
  stats["split_seed"] = split.split_seed;
  auto labels = [](const std::vector<BehaviouralPattern>& ps) {
    std::vector<int> out;
    out.reserve(ps.size());
    for (const auto& p : ps) out.push_back(p.dt_id);
    return out;
  };
  stats["train_labels"] = labels(split.train);
  stats["test_labels"] = labels(split.test);
  std::ofstream os(dir / "stats.json");
  if (!os) throw ArgumentError("cannot open " + (dir / "stats.json").string() + " for writing");
  os << stats.dump(2) << "\n";
}

inline DatasetSplit load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "stats.json");
  if (!is) throw ArgumentError("cannot open " + (dir / "stats.json").string());
  json stats = json::parse(is, nullptr, true);
  DatasetSplit split;
  try {
    split.stats.feature_min = stats.at("feature_min").get<std::array<double, kFeatureCount>>();
    split.stats.feature_max = stats.at("feature_max").get<std::array<double, kFeatureCount>>();
    split.split_seed = stats.at("split_seed").get<std::uint64_t>();
    const auto train_labels = stats.at("train_labels").get<std::vector<int>>();
    const auto test_labels = stats.at("test_labels").get<std::vector<int>>();
    auto train_values = detail::read_patterns(dir / "train.bin");
    auto test_values = detail::read_patterns(dir / "test.bin");
    if (train_labels.size() != train_values.size() || test_labels.size() != test_values.size())
      throw FormatError("label count does not match record count in " + dir.string());
    for (std::size_t i = 0; i < train_values.size(); ++i)
      split.train.push_back({train_labels[i], std::move(train_values[i])});
    for (std::size_t i = 0; i < test_values.size(); ++i)
      split.test.push_back({test_labels[i], std::move(test_values[i])});
  } catch (const json::exception& e) {
    throw FormatError("stats.json: " + std::string(e.what()));
  }
  return split;
}

// ---------------------------------------------------------------------------
// CSV schema:
// dt_id,cycle_id,timestamp,voltage_measured,current_measured,temperature_measured,
// current_charge,voltage_charge,capacity

inline const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols = {
      "dt_id",          "cycle_id",       "timestamp",
      "voltage_measured", "current_measured", "temperature_measured",
      "current_charge", "voltage_charge", "capacity"};
  return cols;
}

inline void write_csv(const std::filesystem::path& path, const std::vector<Cycle>& cycles) {
  std::ofstream os(path);
  if (!os) throw ArgumentError("cannot open " + path.string() + " for writing");
  for (std::size_t i = 0; i < csv_columns().size(); ++i)
    os << (i ? "," : "") << csv_columns()[i];
  os << "\n";
  os.precision(12);
  for (const auto& c : cycles)
    for (const auto& r : c.readings)
      os << c.dt_id << ',' << c.cycle_id << ',' << r.timestamp << ',' << r.voltage_measured << ','
         << r.current_measured << ',' << r.temperature_measured << ',' << r.current_charge << ','
         << r.voltage_measured << ',' << r.capacity << "\n";
}

struct IngestResult {
  std::vector<Cycle> cycles;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, std::size_t line_no, const std::string& column) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw ValidationError("line " + std::to_string(line_no) + ": field " + column +
                          " is not numeric");
  }
  if (pos != s.size())
    throw ValidationError("line " + std::to_string(line_no) + ": field " + column +
                          " is not numeric");
  return v;
}

inline int parse_int(const std::string& s, std::size_t line_no, const std::string& column) {
  std::size_t pos = 0;
  long v = 0;
  try {
    v = std::stol(s, &pos);
  } catch (const std::exception&) {
    throw ValidationError("line " + std::to_string(line_no) + ": field " + column +
                          " is not an integer");
  }
  if (pos != s.size())
    throw ValidationError("line " + std::to_string(line_no) + ": field " + column +
                          " is not an integer");
  return static_cast<int>(v);
}

}  // namespace detail

inline IngestResult ingest_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ArgumentError("cannot open " + path.string());

  std::string line;
  if (!std::getline(is, line)) throw SchemaError("empty file: " + path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = detail::split_fields(line);

  std::map<std::string, std::size_t> col_index;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (col_index.count(header[i])) throw SchemaError("duplicate column " + header[i]);
    col_index[header[i]] = i;
  }
  for (const auto& required : csv_columns())
    if (!col_index.count(required)) throw SchemaError("missing column " + required);
  for (const auto& name : header)
    if (std::find(csv_columns().begin(), csv_columns().end(), name) == csv_columns().end())
      throw SchemaError("unknown column " + name);

  std::map<std::pair<int, int>, Cycle> grouped;
  std::size_t vc_mismatches = 0;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = detail::split_fields(line);
    if (fields.size() != header.size())
      throw SchemaError("line " + std::to_string(line_no) + " has " +
                        std::to_string(fields.size()) + " fields; expected " +
                        std::to_string(header.size()));
    auto at = [&](const std::string& col) -> const std::string& {
      return fields[col_index.at(col)];
    };
    const int dt = detail::parse_int(at("dt_id"), line_no, "dt_id");
    const int cyc = detail::parse_int(at("cycle_id"), line_no, "cycle_id");
    SensorReading r;
    r.timestamp = detail::parse_double(at("timestamp"), line_no, "timestamp");
    r.voltage_measured = detail::parse_double(at("voltage_measured"), line_no, "voltage_measured");
    r.current_measured = detail::parse_double(at("current_measured"), line_no, "current_measured");
    r.temperature_measured =
        detail::parse_double(at("temperature_measured"), line_no, "temperature_measured");
    r.current_charge = detail::parse_double(at("current_charge"), line_no, "current_charge");
    r.capacity = detail::parse_double(at("capacity"), line_no, "capacity");
    const double vc = detail::parse_double(at("voltage_charge"), line_no, "voltage_charge");
    if (std::abs(vc - r.voltage_measured) > 1e-9) ++vc_mismatches;

    auto& cycle = grouped[{dt, cyc}];
    cycle.dt_id = dt;
    cycle.cycle_id = cyc;
    cycle.readings.push_back(r);
  }

  IngestResult result;
  result.warnings.push_back("voltage_charge column discarded (redundant with voltage_measured)");
  if (vc_mismatches > 0)
    result.warnings.push_back("voltage_charge differed from voltage_measured on " +
                              std::to_string(vc_mismatches) + " rows");

  for (auto& [key, cycle] : grouped) {
    if (static_cast<int>(cycle.readings.size()) != kReadingsPerCycle)
      throw ValidationError("cycle (dt " + std::to_string(key.first) + ", cycle " +
                            std::to_string(key.second) + ") has " +
                            std::to_string(cycle.readings.size()) + " readings; expected " +
                            std::to_string(kReadingsPerCycle));
    for (std::size_t i = 1; i < cycle.readings.size(); ++i)
      if (!(cycle.readings[i].timestamp > cycle.readings[i - 1].timestamp))
        throw ValidationError("cycle (dt " + std::to_string(key.first) + ", cycle " +
                              std::to_string(key.second) +
                              "): timestamps not strictly increasing at row " + std::to_string(i));
    result.cycles.push_back(std::move(cycle));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Pattern JSON (used for cached patterns handed to the verifier).

inline json pattern_to_json(const BehaviouralPattern& p) {
  json j;
  j["dt_id"] = p.dt_id;
  json rows = json::array();
  for (int i = 0; i < kWindowRows; ++i) {
    json row = json::array();
    for (int f = 0; f < kFeatureCount; ++f) row.push_back(p.values(i, f));
    rows.push_back(std::move(row));
  }
  j["values"] = std::move(rows);
  return j;
}

inline BehaviouralPattern pattern_from_json(const json& j) {
  BehaviouralPattern p;
  try {
    p.dt_id = j.at("dt_id").get<int>();
    const auto& rows = j.at("values");
    if (!rows.is_array() || rows.size() != kWindowRows)
      throw ValidationError("pattern must have 34 rows");
    p.values.resize(kWindowRows, kFeatureCount);
    for (int i = 0; i < kWindowRows; ++i) {
      if (!rows[i].is_array() || rows[i].size() != kFeatureCount)
        throw ValidationError("pattern row " + std::to_string(i) + " must have 5 values");
      for (int f = 0; f < kFeatureCount; ++f) {
        const double v = rows[i][f].get<double>();
        if (!(v >= -1e-9 && v <= 1.0 + 1e-9))
          throw ValidationError("pattern value out of [0,1] at row " + std::to_string(i));
        p.values(i, f) = std::clamp(v, 0.0, 1.0);
      }
    }
  } catch (const json::exception& e) {
    throw SchemaError("pattern json: " + std::string(e.what()));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Live pattern source: draws fresh cycles with the per-device parametrization
// but independent noise, normalized with the training statistics. Sources are
// named "dt:<id>".

inline int parse_dt_source(const std::string& source) {
  if (source.rfind("dt:", 0) != 0)
    throw ArgumentError("data source must look like dt:<id>, got " + source);
  try {
    std::size_t pos = 0;
    const int id = std::stoi(source.substr(3), &pos);
    if (pos != source.size() - 3 || id < 0) throw std::invalid_argument("");
    return id;
  } catch (const std::exception&) {
    throw ArgumentError("data source must look like dt:<id>, got " + source);
  }
}

class PatternStream {
 public:
  PatternStream(NormalizationStats stats, int cycles_per_dt, std::uint64_t seed)
      : stats_(stats), cycles_per_dt_(cycles_per_dt), seed_(seed) {
    if (cycles_per_dt < 1) throw ArgumentError("cycles_per_dt must be positive");
  }

  BehaviouralPattern pull(const std::string& source, std::uint64_t tick) const {
    const int dt = parse_dt_source(source);
    std::mt19937_64 rng(mix_seed(seed_, 0xf00dULL + static_cast<std::uint64_t>(dt), tick));
    std::uniform_int_distribution<int> pick_cycle(0, cycles_per_dt_ - 1);
    std::uniform_int_distribution<int> pick_window(0, kWindowsPerCycle - 1);
    const int cycle_index = pick_cycle(rng);
    const int window = pick_window(rng);
    const std::uint64_t live_seed = mix_seed(seed_, 0x11feULL + static_cast<std::uint64_t>(dt), tick);
    Cycle cycle = generate_cycle(dt, cycle_index, live_seed);
    auto raws = window_cycles({cycle});
    return {dt, stats_.normalize(raws[static_cast<std::size_t>(window)].values)};
  }

 private:
  NormalizationStats stats_;
  int cycles_per_dt_;
  std::uint64_t seed_;
};

}  // namespace twinforge::telemetry
