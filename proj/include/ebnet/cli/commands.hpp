#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ebnet::cli {

enum ExitCode : int { ok = 0, failure = 1, usage = 2, infeasible = 3, data_error = 4 };

/// Entry point of the `ebnet` tool; never throws.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Convenience for tests: run({"cost", "--arch", ...}).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Maps the library's exception types onto exit codes.
int exit_code_for(const std::exception& e);

}  // namespace ebnet::cli
