#pragma once

#include <chrono>
#include <cstdint>
#include <string>

#include <json.hpp>

namespace equidesc::cli {

inline constexpr const char* kToolVersion = "0.1.0";

/// Hex SHA-256 of a file's bytes.
std::string sha256_file(const std::string& path);

/// Provenance record written next to every output. Everything except
/// "wall_clock" is a pure function of the flags and input bytes.
class RunManifest {
 public:
  RunManifest(std::string command, std::uint64_t seed);

  nlohmann::ordered_json& config() { return config_; }
  void add_input(const std::string& path);
  void add_output(const std::string& path);
  void set_result(nlohmann::ordered_json result) { result_ = std::move(result); }

  void write(const std::string& path) const;

 private:
  std::string command_;
  std::uint64_t seed_;
  nlohmann::ordered_json config_ = nlohmann::ordered_json::object();
  nlohmann::ordered_json inputs_ = nlohmann::ordered_json::object();
  nlohmann::ordered_json outputs_ = nlohmann::ordered_json::object();
  nlohmann::ordered_json result_;
  std::chrono::system_clock::time_point started_;
  std::chrono::steady_clock::time_point timer_;
};

}  // namespace equidesc::cli
