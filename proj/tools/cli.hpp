#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace gcalab::cli {

enum ExitCode { kOk = 0, kRunFailure = 1, kConfigError = 2 };

/// Entry point of the `gcalab` tool; argv[0] is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Output root used when --out is not given: $GCALAB_OUT, else "gcalab_out".
std::string default_output_root();

}  // namespace gcalab::cli
