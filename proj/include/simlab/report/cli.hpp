#pragma once

namespace simlab::cli {

/// Entry point of the `simlab` binary. Returns the process exit code:
/// 0 on success, nonzero on any error.
int run(int argc, char** argv);

}  // namespace simlab::cli
