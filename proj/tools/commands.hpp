#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include <CLI11.hpp>

namespace equidesc::cli {

/// Bad flag values; reported with exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A registered subcommand. `validate` runs first and only checks flags;
/// anything thrown from it is a usage error. `run` does the work.
struct Command {
  CLI::App* app = nullptr;
  std::function<void()> validate;
  std::function<void()> run;
};

/// Registers every subcommand on `app`. Option storage lives in the
/// returned objects, so they must outlive parsing and execution.
std::vector<std::shared_ptr<Command>> register_commands(CLI::App& app);

}  // namespace equidesc::cli
