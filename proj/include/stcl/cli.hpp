#pragma once

// Command-line front end: phantom, train, eval, ablate, sweep, trace and
// gradcheck subcommands over the experiment module.
//
// Exit codes: 0 ok, 1 gradient check failed (or unexpected error), 2 invalid
// arguments or config, 3 I/O or data error, 4 refusing to overwrite without
// --force, 5 training hit a non-finite loss.

#include <iosfwd>

namespace stcl::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitInvalid = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitExists = 4;
inline constexpr int kExitNonFinite = 5;

// Output directories default to $STCL_OUTPUT_ROOT/<subcommand> (or
// ./stcl_out/<subcommand>) when --out is omitted.
inline constexpr const char* kOutputRootEnv = "STCL_OUTPUT_ROOT";

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace stcl::cli
