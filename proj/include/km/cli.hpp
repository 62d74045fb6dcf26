#pragma once

// CLI support: run manifests (every artifact directory records the command
// and resolved configuration that produced it) and JSON config-file binding
// for CLI11 options with flag > config file > built-in default precedence.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "km/common.hpp"
#include "km/serialize.hpp"

#ifndef KM_GIT_DESCRIBE
#define KM_GIT_DESCRIBE "unknown"
#endif

namespace km {

// Applies one JSON config section to the options of one subcommand: any
// option the user did not pass on the command line takes the config value.
class ConfigBinder {
 public:
  template <typename T>
  void bind(CLI::Option* opt, T& var) {
    entries_.push_back({opt, [&var](const nlohmann::json& v) { var = v.get<T>(); }});
  }

  void apply(const nlohmann::json& section) const {
    for (const Entry& e : entries_) {
      const std::string key = key_of(e.opt);
      if (e.opt->count() > 0 || !section.contains(key)) continue;
      try {
        e.set(section.at(key));
      } catch (const nlohmann::json::exception& ex) {
        fail("config: bad value for '" + key + "': " + ex.what());
      }
    }
  }

  // Every bound option's final value, for the run manifest.
  nlohmann::json resolved() const {
    nlohmann::json out = nlohmann::json::object();
    for (const Entry& e : entries_) out[key_of(e.opt)] = e.opt->as<std::string>();
    return out;
  }

  void reject_unknown_keys(const nlohmann::json& section) const {
    for (const auto& [key, _] : section.items()) {
      bool known = false;
      for (const Entry& e : entries_) known = known || key_of(e.opt) == key;
      if (!known) fail("config: unknown key '" + key + "'");
    }
  }

 private:
  struct Entry {
    CLI::Option* opt;
    std::function<void(const nlohmann::json&)> set;
  };

  static std::string key_of(CLI::Option* opt) {
    require(!opt->get_lnames().empty(), "config: option has no long name");
    return opt->get_lnames()[0];
  }

  std::vector<Entry> entries_;
};

inline nlohmann::json load_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail("config: cannot read " + path.string());
  nlohmann::json j = nlohmann::json::parse(in, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) fail("config: " + path.string() + " is not valid json");
  if (!j.is_object()) fail("config: top level must be an object of subcommand sections");
  return j;
}

struct RunManifest {
  std::string command;
  nlohmann::json config;  // resolved key -> value map
  uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  double wall_clock_seconds = 0.0;
};

inline void write_run_manifest(const fs::path& dir, const RunManifest& m) {
  fs::create_directories(dir);
  nlohmann::json j;
  j["command"] = m.command;
  j["config"] = m.config;
  j["seed"] = m.seed;
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  j["wall_clock_seconds"] = m.wall_clock_seconds;
  j["build"] = KM_GIT_DESCRIBE;
  const std::time_t now = std::time(nullptr);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  j["finished_at"] = stamp;
  std::ofstream out(dir / "run.json", std::ios::trunc);
  if (!out) fail("manifest: cannot write " + (dir / "run.json").string());
  out << j.dump(2) << "\n";
}

class WallClock {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace km
