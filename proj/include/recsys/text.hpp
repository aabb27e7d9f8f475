#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "recsys/error.hpp"

namespace recsys {

using TokenId = std::int32_t;

inline bool is_token_char(char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9');
}

// Any character outside [A-Za-z0-9] acts as whitespace; tokens are lowercased.
inline std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (is_token_char(c)) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

// Aspects stay structured: one "key:value" string becomes one token, with the
// same character filter applied on each side of the first ':'.
inline std::string aspect_token(const std::string& raw) {
    std::string key, value;
    const auto pos = raw.find(':');
    auto filtered = [](const std::string& s) {
        std::string f;
        for (char c : s) {
            if (is_token_char(c)) f.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
        return f;
    };
    if (pos == std::string::npos) return filtered(raw);
    key = filtered(raw.substr(0, pos));
    value = filtered(raw.substr(pos + 1));
    if (key.empty() && value.empty()) return std::string();
    return key + ":" + value;
}

class Vocabulary {
public:
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kOov = 1;
    static constexpr const char* kPadToken = "<pad>";
    static constexpr const char* kOovToken = "<oov>";

    Vocabulary() {
        add(kPadToken);
        add(kOovToken);
    }

    TokenId lookup(const std::string& token) const {
        auto it = ids_.find(token);
        return it == ids_.end() ? kOov : it->second;
    }

    const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    std::size_t size() const { return tokens_.size(); }

    void add(const std::string& token) {
        ids_.emplace(token, static_cast<TokenId>(tokens_.size()));
        tokens_.push_back(token);
    }

    const std::vector<std::string>& tokens() const { return tokens_; }

private:
    std::unordered_map<std::string, TokenId> ids_;
    std::vector<std::string> tokens_;
};

// Tokens ranked by (frequency desc, token asc), truncated to max_size - 2,
// PAD/OOV prepended.
inline Vocabulary build_vocab(const std::vector<std::string>& token_stream, std::size_t max_size,
                              std::size_t min_frequency) {
    if (max_size < 2) throw ConfigError("build_vocab: max_size must be >= 2");
    std::unordered_map<std::string, std::size_t> freq;
    for (const auto& t : token_stream) ++freq[t];

    std::vector<std::pair<std::string, std::size_t>> ranked;
    ranked.reserve(freq.size());
    for (auto& kv : freq) {
        if (kv.second >= min_frequency) ranked.emplace_back(kv.first, kv.second);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (ranked.size() > max_size - 2) ranked.resize(max_size - 2);

    Vocabulary vocab;
    for (auto& kv : ranked) vocab.add(kv.first);
    return vocab;
}

inline std::vector<TokenId> encode(const Vocabulary& vocab, const std::vector<std::string>& tokens) {
    std::vector<TokenId> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(vocab.lookup(t));
    return ids;
}

inline std::vector<std::string> decode(const Vocabulary& vocab, const std::vector<TokenId>& ids) {
    std::vector<std::string> tokens;
    tokens.reserve(ids.size());
    for (TokenId id : ids) tokens.push_back(vocab.token(id));
    return tokens;
}

inline void save_vocab(const Vocabulary& vocab, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("save_vocab: cannot open " + path);
    out << "# vocabulary: token on line i (after comments) has id i; lines 1-2 are PAD and OOV\n";
    for (const auto& t : vocab.tokens()) out << t << "\n";
    if (!out) throw DataError("save_vocab: write failed for " + path);
}

inline Vocabulary load_vocab(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("load_vocab: cannot open " + path);
    Vocabulary vocab;
    std::string line;
    std::size_t token_index = 0;
    std::size_t line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty() && line[0] == '#') continue;
        if (token_index == 0) {
            if (line != Vocabulary::kPadToken) throw ParseError("load_vocab: expected PAD token", line_number);
        } else if (token_index == 1) {
            if (line != Vocabulary::kOovToken) throw ParseError("load_vocab: expected OOV token", line_number);
        } else {
            if (line.empty()) throw ParseError("load_vocab: empty token", line_number);
            vocab.add(line);
        }
        ++token_index;
    }
    if (token_index < 2) throw DataError("load_vocab: missing PAD/OOV header tokens in " + path);
    return vocab;
}

}  // namespace recsys
