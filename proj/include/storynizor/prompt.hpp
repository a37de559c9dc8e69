#pragma once

#include <string>
#include <vector>

#include "storynizor/tokenizer.hpp"

namespace storynizor {

// Inclusive token-index range into the tokenized full_text of a frame prompt.
struct TokenSpan {
    int first = 0;
    int last = 0;
    int length() const { return last - first + 1; }
    bool operator==(const TokenSpan&) const = default;
};

struct CharacterRef {
    std::string description;
    std::string action;
    TokenSpan span;
};

struct FramePrompt {
    std::string full_text;
    std::vector<CharacterRef> characters;
};

struct StoryPrompt {
    std::vector<FramePrompt> frames;

    int frame_count() const { return static_cast<int>(frames.size()); }
    // Throws std::invalid_argument naming the first violated invariant.
    void validate(const Vocabulary& vocab = Vocabulary::builtin()) const;
};

// Locates `description` as a contiguous token run inside `full_text`
// (first occurrence) and returns its span.
TokenSpan locate_span(const std::string& full_text, const std::string& description,
                      const Vocabulary& vocab = Vocabulary::builtin());

// Builds a frame prompt whose character spans are found by locate_span.
FramePrompt make_frame_prompt(const std::string& full_text, const std::vector<std::string>& descriptions,
                              const std::vector<std::string>& actions = {},
                              const Vocabulary& vocab = Vocabulary::builtin());

// Fixed-length model input: [BOS] tokens [EOS] [PAD]... The token at prompt
// index i sits at position i + 1.
std::vector<int> encode_for_model(const std::string& full_text, int length,
                                  const Vocabulary& vocab = Vocabulary::builtin());
std::vector<int> null_prompt_ids(int length);
inline TokenSpan model_span(const TokenSpan& s) { return {s.first + 1, s.last + 1}; }

}  // namespace storynizor
