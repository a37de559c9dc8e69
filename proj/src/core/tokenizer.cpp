#include "storynizor/tokenizer.hpp"

#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "storynizor/vocab_data.hpp"

namespace storynizor {

const Vocabulary& Vocabulary::builtin() {
    static const Vocabulary vocab = from_text(detail::kBuiltinVocab, detail::kBuiltinVocabVersion);
    return vocab;
}

Vocabulary Vocabulary::from_text(std::string_view text, std::string version) {
    Vocabulary v;
    v.version_ = std::move(version);
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (v.index_.count(line)) throw std::runtime_error("duplicate vocabulary token: " + line);
        v.index_.emplace(line, static_cast<int>(v.tokens_.size()));
        v.tokens_.push_back(line);
    }
    if (v.tokens_.size() < 4 || v.tokens_[kPad] != "[PAD]" || v.tokens_[kUnk] != "[UNK]" ||
        v.tokens_[kBos] != "[BOS]" || v.tokens_[kEos] != "[EOS]")
        throw std::runtime_error("vocabulary must start with [PAD] [UNK] [BOS] [EOS]");
    return v;
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocabulary file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str(), path);
}

int Vocabulary::id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
}

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) words.push_back(std::move(current));
        current.clear();
    };
    for (char raw : text) {
        const auto c = static_cast<unsigned char>(raw);
        if (std::isspace(c)) {
            flush();
        } else if (std::ispunct(c) && c != '-' && c != '_') {
            flush();
            words.emplace_back(1, static_cast<char>(c));
        } else {
            current.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return words;
}

std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab) {
    const auto words = split_words(text);
    if (words.empty()) throw std::invalid_argument("tokenize: empty text");
    std::vector<int> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(vocab.id(w));
    return ids;
}

}  // namespace storynizor
