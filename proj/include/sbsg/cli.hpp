#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sbsg {

// Runs the `sbsg` command line. args[0] is the program name. Returns 0 on
// success, 1 on usage or configuration errors, 2 on runtime failures.
int run_cli(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err);

}  // namespace sbsg
