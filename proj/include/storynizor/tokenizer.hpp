#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace storynizor {

// Word-level vocabulary: one token per line, line index is the id.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kBos = 2;
    static constexpr int kEos = 3;

    // The versioned table shipped in assets/vocab_v1.txt, compiled in.
    static const Vocabulary& builtin();
    static Vocabulary from_text(std::string_view text, std::string version);
    static Vocabulary load(const std::string& path);

    int id(std::string_view token) const;
    const std::string& token(int id) const { return tokens_.at(static_cast<size_t>(id)); }
    int size() const { return static_cast<int>(tokens_.size()); }
    const std::string& version() const { return version_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    std::string version_;
};

// Lowercased words and single punctuation marks, whitespace dropped.
std::vector<std::string> split_words(std::string_view text);

// Pure and deterministic; unknown words map to Vocabulary::kUnk.
// Throws std::invalid_argument when the text is empty after normalization.
std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab = Vocabulary::builtin());

}  // namespace storynizor
