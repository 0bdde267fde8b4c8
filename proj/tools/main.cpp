#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <typeinfo>

#include <CLI11.hpp>
#include <json.hpp>

#include "commands.hpp"
#include "equidesc/core.hpp"
#include "manifest.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

int ReportError(const char* kind, const std::string& type, const std::string& message, int code) {
  nlohmann::ordered_json j;
  j["error"] = {{"kind", kind}, {"type", type}, {"message", message}, {"exit_code", code}};
  std::cerr << j.dump() << std::endl;
  return code;
}

std::string TypeName(const std::exception& e) {
  if (dynamic_cast<const equidesc::InvalidArgument*>(&e)) return "InvalidArgument";
  if (dynamic_cast<const equidesc::Error*>(&e)) return "Error";
  if (dynamic_cast<const equidesc::cli::UsageError*>(&e)) return "UsageError";
  return "std::exception";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rotation-equivariant local point cloud descriptors", "equidesc"};
  app.set_version_flag("--version", std::string(equidesc::cli::kToolVersion));
  app.require_subcommand(1);
  const auto commands = equidesc::cli::register_commands(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return ReportError("validation", "ParseError", e.what(), kExitUsage);
  }

  for (const auto& cmd : commands) {
    if (!cmd->app->parsed()) continue;
    try {
      cmd->validate();
    } catch (const std::exception& e) {
      return ReportError("validation", TypeName(e), e.what(), kExitUsage);
    }
    try {
      cmd->run();
    } catch (const equidesc::cli::UsageError& e) {
      return ReportError("validation", TypeName(e), e.what(), kExitUsage);
    } catch (const std::exception& e) {
      return ReportError("runtime", TypeName(e), e.what(), kExitRuntime);
    }
    return kExitOk;
  }
  return ReportError("validation", "UsageError", "no subcommand given", kExitUsage);
}
