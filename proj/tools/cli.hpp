#pragma once

// The `vecinfer` command line. Exit codes: 0 success, 1 usage, 2 validation
// or tolerance failure, 3 I/O or corrupted input.

#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

namespace vecinfer::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kValidation = 2, kIo = 3 };

/// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

inline constexpr int kBenchSchemaVersion = 1;

/// Invariants every BenchReport must satisfy beyond the JSON schema shape:
/// a schema_version, and an oracle error on every run. Returns the problems found.
std::vector<std::string> bench_report_problems(const nlohmann::json& report);

}  // namespace vecinfer::cli
