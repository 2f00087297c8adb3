#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

namespace pldcp::cli {

/// Everything needed to rerun an invocation: written as run.json next to the
/// command's other artifacts.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  nlohmann::json config = nlohmann::json::object();
  std::string dataset_checksum;
  std::string version;
  std::string started_at;   // UTC, ISO 8601
  std::string finished_at;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

/// Environment variable naming the default output root.
inline constexpr const char* kOutputRootEnv = "PLDCP_OUTPUT_ROOT";

/// Exit codes: 0 success, 1 runtime failure (or gradcheck above tolerance),
/// 2 usage error. Failures end with one JSON line on `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace pldcp::cli
