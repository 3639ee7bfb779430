#pragma once

#include <iostream>

namespace convmr::cli {

// Exit codes
inline constexpr int exit_ok = 0;
inline constexpr int exit_usage = 1;
inline constexpr int exit_data = 2;
inline constexpr int exit_numeric = 3;

// Entry point of the `convmr` tool. CSV results go to `out` (or --out
// files); the resolved configuration header and diagnostics go to `err`.
int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr);

}  // namespace convmr::cli
