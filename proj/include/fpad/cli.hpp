#pragma once

namespace fpad {

// Exit codes: 0 success, 2 config, 3 I/O, 4 infeasible split/sampling,
// 5 numeric failure, 6 gradcheck failure.
int run_cli(int argc, const char* const* argv);

}  // namespace fpad
