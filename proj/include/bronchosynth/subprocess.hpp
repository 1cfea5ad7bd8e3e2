#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

namespace bsynth {

struct CommandResult {
  int exit_code = -1;
  std::string output;  // combined stdout and stderr
};

// Runs `command arg1 arg2 ...` through /bin/sh. `command` is a shell
// fragment (it may carry its own flags); arguments are single-quoted.
CommandResult run_command(const std::string& command, const std::vector<std::string>& args);

std::string shell_quote(const std::string& arg);

// Calls fn(i) for i in [0, count) on at most `workers` threads. Exceptions
// escaping fn are rethrown (first by index) after all workers join.
void parallel_for(std::size_t count, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace bsynth
