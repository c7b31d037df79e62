#include "octoflow/config.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace octoflow::config {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

enum class Type { kReal, kInt, kString, kIntList };

struct SchemaEntry {
  const char* key;
  Type type;
  const char* default_value;
  const char* allowed;  // for kString: comma-separated values, else nullptr
};

// Every tunable in one place: generation, boundary conditions, physics,
// octree, model, and training.
const SchemaEntry kSchema[] = {
    {"root_radius_min_mm", Type::kReal, "1.62", nullptr},
    {"root_radius_max_mm", Type::kReal, "1.98", nullptr},
    {"bif_angle_min_deg", Type::kReal, "35", nullptr},
    {"bif_angle_max_deg", Type::kReal, "135", nullptr},
    {"n_generations_min", Type::kInt, "3", nullptr},
    {"n_generations_max", Type::kInt, "5", nullptr},
    {"radius_decay_exponent", Type::kReal, "3", nullptr},
    {"extension_factor", Type::kReal, "5", nullptr},
    {"segment_length_over_radius", Type::kReal, "8", nullptr},
    {"target_spacing_mm", Type::kReal, "0.45", nullptr},
    {"mean_flow_mls", Type::kReal, "4.4", nullptr},
    {"cycle_ms", Type::kReal, "885", nullptr},
    {"age", Type::kString, "young", "young,elderly"},
    {"t_s_ms", Type::kReal, "-1", nullptr},  // -1: auto, one full cycle
    {"t_l_ms", Type::kReal, "250", nullptr},
    {"q_ca_max_mls", Type::kReal, "2.5", nullptr},
    {"mixing_factor", Type::kReal, "0.3", nullptr},
    {"split_exponent", Type::kReal, "3", nullptr},
    {"n_cycles", Type::kInt, "2", nullptr},
    {"waveform_samples", Type::kInt, "256", nullptr},
    {"kinematic_viscosity_m2s", Type::kReal, "3.2e-06", nullptr},
    {"density_kgm3", Type::kReal, "1060", nullptr},
    {"octree_max_depth", Type::kInt, "10", nullptr},
    {"finest_pitch_mm", Type::kReal, "0.15", nullptr},
    {"latent_dim", Type::kInt, "32", nullptr},
    {"unet_channels", Type::kIntList, "32,64,128,256", nullptr},
    {"head_hidden", Type::kInt, "128", nullptr},
    {"trunk_width", Type::kInt, "64", nullptr},
    {"lrelu_slope", Type::kReal, "0.01", nullptr},
    {"bc_input_len", Type::kInt, "256", nullptr},
    {"velocity_scale_mps", Type::kReal, "1", nullptr},
    {"lr", Type::kReal, "0.001", nullptr},
    {"batch_time_points", Type::kInt, "10", nullptr},
    {"batch_spatial_points", Type::kInt, "4096", nullptr},
    {"max_epochs", Type::kInt, "40", nullptr},
    {"augment", Type::kString, "on", "on,off"},
    {"seed", Type::kInt, "0", nullptr},
};

const SchemaEntry* find_entry(const std::string& key) {
  for (const SchemaEntry& e : kSchema)
    if (key == e.key) return &e;
  return nullptr;
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Shortest decimal form that parses back to the same double.
std::string canonical_real(double v) {
  char buf[64];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  return buf;
}

double parse_real(const std::string& key, const std::string& value) {
  char* end = nullptr;
  double v = std::strtod(value.c_str(), &end);
  if (end == value.c_str() || *end != '\0')
    fail("config: key '" + key + "' expects a real number, got '" + value + "'");
  return v;
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
  char* end = nullptr;
  long long v = std::strtoll(value.c_str(), &end, 10);
  if (end == value.c_str() || *end != '\0')
    fail("config: key '" + key + "' expects an integer, got '" + value + "'");
  return static_cast<std::int64_t>(v);
}

std::string canonicalize(const SchemaEntry& entry, const std::string& raw) {
  switch (entry.type) {
    case Type::kReal:
      return canonical_real(parse_real(entry.key, raw));
    case Type::kInt:
      return std::to_string(parse_int(entry.key, raw));
    case Type::kString: {
      std::string allowed = entry.allowed;
      std::istringstream as(allowed);
      std::string option;
      while (std::getline(as, option, ','))
        if (raw == option) return raw;
      fail("config: key '" + std::string(entry.key) + "' must be one of {" + allowed +
           "}, got '" + raw + "'");
    }
    case Type::kIntList: {
      if (raw.empty()) fail("config: key '" + std::string(entry.key) + "' needs values");
      std::istringstream ls(raw);
      std::string item;
      std::string out;
      while (std::getline(ls, item, ',')) {
        if (!out.empty()) out += ",";
        out += std::to_string(parse_int(entry.key, trim(item)));
      }
      return out;
    }
  }
  fail("config: unreachable");
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig cfg;
  for (const SchemaEntry& e : kSchema) cfg.values_[e.key] = e.default_value;
  return cfg;
}

RunConfig RunConfig::from_string(const std::string& text) {
  RunConfig cfg = defaults();
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      fail("config: line " + std::to_string(line_no) + " is not 'key = value': '" + line +
           "'");
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail("cannot open config: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return from_string(os.str());
}

std::string RunConfig::to_string() const {
  std::string out;
  for (const auto& [key, value] : values_) out += key + " = " + value + "\n";
  return out;
}

void RunConfig::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail("cannot open for writing: " + path);
  f << to_string();
  if (!f) fail("write failed: " + path);
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const SchemaEntry* entry = find_entry(key);
  if (!entry) fail("config: unknown key '" + key + "'");
  values_[key] = canonicalize(*entry, value);
}

void RunConfig::set_real(const std::string& key, double value) {
  set(key, canonical_real(value));
}

void RunConfig::set_integer(const std::string& key, std::int64_t value) {
  set(key, std::to_string(value));
}

double RunConfig::real(const std::string& key) const {
  const SchemaEntry* entry = find_entry(key);
  if (!entry || entry->type != Type::kReal) fail("config: '" + key + "' is not a real key");
  return parse_real(key, values_.at(key));
}

std::int64_t RunConfig::integer(const std::string& key) const {
  const SchemaEntry* entry = find_entry(key);
  if (!entry || entry->type != Type::kInt)
    fail("config: '" + key + "' is not an integer key");
  return parse_int(key, values_.at(key));
}

const std::string& RunConfig::str(const std::string& key) const {
  const SchemaEntry* entry = find_entry(key);
  if (!entry || entry->type != Type::kString)
    fail("config: '" + key + "' is not a string key");
  return values_.at(key);
}

std::vector<std::int64_t> RunConfig::int_list(const std::string& key) const {
  const SchemaEntry* entry = find_entry(key);
  if (!entry || entry->type != Type::kIntList)
    fail("config: '" + key + "' is not an integer-list key");
  std::vector<std::int64_t> out;
  std::istringstream ls(values_.at(key));
  std::string item;
  while (std::getline(ls, item, ',')) out.push_back(parse_int(key, item));
  return out;
}

}  // namespace octoflow::config
