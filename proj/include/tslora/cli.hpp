#pragma once

namespace tslora {

// Entry point behind the tslora binary. Returns the process exit code:
// 0 success, 1 runtime/data error, 2 configuration error.
int run_cli(int argc, const char* const* argv);

inline constexpr const char* kToolVersion = "tslora 0.1.0";

}  // namespace tslora
