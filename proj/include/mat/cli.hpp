#pragma once

#include "mat/real.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace mat {
inline namespace MAT_REAL_NS {

// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // validation error, failed audit, bad input
inline constexpr int kExitUsage = 2;    // unknown command or malformed arguments

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace MAT_REAL_NS
}  // namespace mat
