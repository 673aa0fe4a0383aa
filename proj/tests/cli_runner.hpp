#pragma once

// Runs the slm executable and captures stdout.

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <string>

namespace slm::testing {

struct CliRun {
  int exit_code = -1;
  std::string out;
};

inline CliRun run_cli(const std::string& args) {
  const std::string cmd = std::string(SLM_CLI_PATH) + " " + args + " 2>/dev/null";
  CliRun r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe) != nullptr) r.out += buf.data();
  const int status = ::pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

}  // namespace slm::testing
