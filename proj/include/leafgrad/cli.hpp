#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace leafgrad::cli {

// Exit codes: 0 success, 1 runtime failure, 2 bad command line.
int run(int argc, char** argv);

// Same as above with explicit arguments (without the program name) and
// output streams.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace leafgrad::cli
