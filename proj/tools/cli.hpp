// Command-line entry point, callable in-process for tests.
#ifndef NOF1_TOOLS_CLI_HPP
#define NOF1_TOOLS_CLI_HPP

#include <string>
#include <vector>

namespace nof1cli {

// Runs one command; args exclude the program name. Returns the process
// exit code: 0 ok, 2 validation error, 3 numerical failure, 4 failed
// verification gate.
int run(const std::vector<std::string>& args);

}  // namespace nof1cli

#endif  // NOF1_TOOLS_CLI_HPP
