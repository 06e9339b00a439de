#pragma once

#include <string>
#include <vector>

namespace mixmask {

// Routes a command line to the matching subcommand. Returns the process exit
// code: 0 success, 1 usage error, 2 runtime error.
int dispatch(const std::vector<std::string>& args);
int dispatch(int argc, const char* const* argv);

}  // namespace mixmask
