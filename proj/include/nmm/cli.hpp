#pragma once

// Command-line entry points. Subcommands:
//   build-vocab  frequency-capped vocabulary + corpus statistics
//   train        joint SGD training with checkpoints and a CSV log
//   eval         perplexity of a checkpoint on a corpus
//   interp       linear interpolation of several checkpoints
//   params       parameter counting and growth, no checkpoint needed
//
// Exit codes: 0 success, 1 usage/config error, 2 runtime/numeric failure.

#include <string>
#include <vector>

namespace nmm::cli {

int run(std::vector<std::string> args);
int run(int argc, const char* const* argv);

}  // namespace nmm::cli
