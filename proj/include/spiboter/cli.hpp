#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace spiboter::cli {

/// Runs one subcommand. `args` excludes the program name.
/// Returns 0 on success, 2 on usage errors, 1 on any other failure.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace spiboter::cli
