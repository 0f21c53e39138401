#pragma once

#include <iosfwd>

namespace s3vos {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitCheckFailed = 1, kExitUsage = 2 };

/// Entry point of the `s3vos` tool (subcommands generate, train, infer,
/// eval, gradcheck). Messages go to `out` / `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace s3vos
