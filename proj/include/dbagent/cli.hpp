#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dbagent::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitBackend = 3;

/// Entry point of the dbagent tool. Never throws; maps failures to exit
/// codes (1 usage, 2 data, 3 backend).
int run_command(int argc, char** argv);

/// Same, with args excluding the program name and explicit streams.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dbagent::cli
