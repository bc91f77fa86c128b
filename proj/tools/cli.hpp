#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace wavedepth::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitDomain = 1;
inline constexpr int kExitUsage = 2;

// Runs one command line. `args` excludes the program name. Returns the
// process exit status: 0 success, 1 domain error, 2 usage error.
int run(const std::vector<std::string>& args, std::ostream& out,
        std::ostream& err);

// Known subcommands, in help order.
const std::vector<std::string>& subcommands();

// Closest known subcommand to `word`, or empty when nothing is close.
std::string suggest_subcommand(const std::string& word);

}  // namespace wavedepth::cli
