#include "storynizor/prompt.hpp"

#include <algorithm>
#include <stdexcept>

namespace storynizor {

void StoryPrompt::validate(const Vocabulary& vocab) const {
    if (frames.empty()) throw std::invalid_argument("story prompt needs at least one frame");
    for (size_t n = 0; n < frames.size(); ++n) {
        const auto& f = frames[n];
        const auto ids = tokenize(f.full_text, vocab);
        const int len = static_cast<int>(ids.size());
        std::vector<TokenSpan> spans;
        for (const auto& c : f.characters) {
            if (c.span.first < 0 || c.span.last >= len || c.span.length() < 1)
                throw std::invalid_argument("frame " + std::to_string(n) + ": character span [" +
                                            std::to_string(c.span.first) + ", " + std::to_string(c.span.last) +
                                            "] outside " + std::to_string(len) + " tokens");
            for (const auto& s : spans)
                if (c.span.first <= s.last && s.first <= c.span.last)
                    throw std::invalid_argument("frame " + std::to_string(n) + ": overlapping character spans");
            spans.push_back(c.span);
        }
    }
}

TokenSpan locate_span(const std::string& full_text, const std::string& description, const Vocabulary& vocab) {
    const auto words = split_words(full_text);
    const auto needle = split_words(description);
    if (needle.empty()) throw std::invalid_argument("empty character description");
    auto it = std::search(words.begin(), words.end(), needle.begin(), needle.end());
    if (it == words.end())
        throw std::invalid_argument("description '" + description + "' not found in '" + full_text + "'");
    (void)vocab;
    const int first = static_cast<int>(it - words.begin());
    return {first, first + static_cast<int>(needle.size()) - 1};
}

FramePrompt make_frame_prompt(const std::string& full_text, const std::vector<std::string>& descriptions,
                              const std::vector<std::string>& actions, const Vocabulary& vocab) {
    FramePrompt f{full_text, {}};
    for (size_t i = 0; i < descriptions.size(); ++i)
        f.characters.push_back(
            {descriptions[i], i < actions.size() ? actions[i] : std::string(), locate_span(full_text, descriptions[i], vocab)});
    return f;
}

std::vector<int> encode_for_model(const std::string& full_text, int length, const Vocabulary& vocab) {
    const auto ids = tokenize(full_text, vocab);
    if (static_cast<int>(ids.size()) + 2 > length)
        throw std::invalid_argument("prompt of " + std::to_string(ids.size()) + " tokens exceeds context length " +
                                    std::to_string(length));
    std::vector<int> out(static_cast<size_t>(length), Vocabulary::kPad);
    out[0] = Vocabulary::kBos;
    std::copy(ids.begin(), ids.end(), out.begin() + 1);
    out[ids.size() + 1] = Vocabulary::kEos;
    return out;
}

std::vector<int> null_prompt_ids(int length) {
    std::vector<int> out(static_cast<size_t>(length), Vocabulary::kPad);
    out[0] = Vocabulary::kBos;
    out[1] = Vocabulary::kEos;
    return out;
}

}  // namespace storynizor
