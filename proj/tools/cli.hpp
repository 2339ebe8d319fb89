#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sparse_engine::cli {

enum ExitCode : int
{
  exit_ok = 0,
  exit_io = 2,       // unreadable/unwritable file, malformed input, bad flags
  exit_mismatch = 3, // inputs that do not fit together
  exit_internal = 4,
};

/// Runs one command. Reports go to `out`, logs and errors to `err`.
int run( const std::vector<std::string>& args, std::ostream& out, std::ostream& err );

} // namespace sparse_engine::cli
