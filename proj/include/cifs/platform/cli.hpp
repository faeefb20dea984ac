#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace cifs::platform {

/// Exit codes of the command-line front end.
enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitNumerical = 2 };

/// Subcommands train, attack, eval, diagnose and sweep-beta. `args` includes
/// the program name. Usage errors print help to `err` and return kExitConfig.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cifs::platform
