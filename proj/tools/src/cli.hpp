#pragma once

namespace modeseg::cli {

enum ExitCode : int { kSuccess = 0, kRuntimeFailure = 1, kUsageError = 2 };

/// Entry point of the `modeseg` tool. Never throws; returns an ExitCode.
int run_cli(int argc, char** argv);

}  // namespace modeseg::cli
