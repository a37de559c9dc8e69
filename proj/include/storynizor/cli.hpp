#pragma once

#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "storynizor/prompt.hpp"

namespace storynizor {

// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;    // bad flags, config or input files
inline constexpr int kExitRuntime = 2;  // failure while doing the work

// Raised for problems the caller can fix by changing the invocation.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Prompts file: one frame per line, blank lines and lines starting with '#'
// ignored. Character descriptions are wrapped in square brackets:
//   [red circle hero] running in forest
// The brackets are removed from the prompt text; each bracketed run becomes a
// character whose span is located in the cleaned text.
StoryPrompt parse_prompts(const std::string& text);
StoryPrompt load_prompts_file(const std::string& path);

// Entry point behind the storynizor binary. Never throws.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace storynizor
