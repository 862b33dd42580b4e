#pragma once

#include <iosfwd>

namespace metakkl::cli {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kNumerical = 3 };

/// Entry point of the `metakkl` tool: subcommands generate, train, eval and
/// adapt. Returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace metakkl::cli
