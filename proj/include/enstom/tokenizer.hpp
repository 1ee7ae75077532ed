#pragma once

#include <string>
#include <string_view>

#include "enstom/model.hpp"

namespace enstom {

// Trivial whitespace tokenizer over the synthetic fixture vocabulary.
// Reserved ids: 0 = "<eos>", 1 = "A", 2 = "B"; id k >= 3 renders as "w<k>".
// Unknown words hash deterministically into the non-reserved range, so any
// demo text round-trips into valid token ids.
class Tokenizer {
 public:
  explicit Tokenizer(int vocab_size);

  int vocab_size() const { return vocab_; }
  int token_of(std::string_view word) const;
  std::string word_of(int id) const;

  TokenSequence encode(std::string_view text) const;
  std::string decode(const TokenSequence& tokens) const;

 private:
  int vocab_;
};

}  // namespace enstom
