#pragma once

// Word-level tokenizer over the closed ontology lexicon. BOS/EOS framing,
// punctuation stripped, no subwords.

#include <map>
#include <string>
#include <vector>

#include "nast/common.hpp"
#include "nast/ontology.hpp"

namespace nast {

struct TokenSequence {
    std::vector<int> ids;  // BOS first, EOS last
    int length() const { return static_cast<int>(ids.size()); }
    int eos_position() const { return length() - 1; }
};

class Tokenizer {
public:
    static constexpr int kBos = 0;
    static constexpr int kEos = 1;

    explicit Tokenizer(const Ontology& ont, int max_seq_len = 32) : max_seq_len_(max_seq_len) {
        id_to_word_ = {"<bos>", "<eos>"};
        for (const auto& w : ont.lexicon()) {
            word_to_id_[w] = static_cast<int>(id_to_word_.size());
            id_to_word_.push_back(w);
        }
    }

    int vocab_size() const { return static_cast<int>(id_to_word_.size()); }
    int max_seq_len() const { return max_seq_len_; }

    TokenSequence tokenize(const std::string& caption) const {
        auto words = split_words(caption);
        if (words.empty()) throw DataError("tokenize: empty caption");
        TokenSequence seq;
        seq.ids.push_back(kBos);
        for (const auto& w : words) {
            auto it = word_to_id_.find(w);
            if (it == word_to_id_.end()) throw DataError("tokenize: unknown word '" + w + "'");
            seq.ids.push_back(it->second);
        }
        seq.ids.push_back(kEos);
        if (seq.length() > max_seq_len_)
            throw DataError("tokenize: caption exceeds max sequence length: " + caption);
        return seq;
    }

    const std::string& word(int id) const {
        require(id >= 0 && id < vocab_size(), "token id out of range");
        return id_to_word_[static_cast<size_t>(id)];
    }

private:
    std::map<std::string, int> word_to_id_;
    std::vector<std::string> id_to_word_;
    int max_seq_len_;
};

}  // namespace nast
