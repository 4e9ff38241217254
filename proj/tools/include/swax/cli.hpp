#pragma once

namespace swax {

/// Entry point of the `swaxlab` command: train, eval and sweep subcommands.
/// Returns 0 on success, 1 on invalid input, 2 on runtime failure.
int run_cli(int argc, const char* const* argv);

}  // namespace swax
