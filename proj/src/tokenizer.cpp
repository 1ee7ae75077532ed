#include "enstom/tokenizer.hpp"

#include <charconv>
#include <stdexcept>

#include "enstom/common.hpp"

namespace enstom {

Tokenizer::Tokenizer(int vocab_size) : vocab_(vocab_size) {
  if (vocab_ < 4) throw std::invalid_argument("tokenizer vocab must be >= 4");
}

int Tokenizer::token_of(std::string_view word) const {
  if (word == "<eos>") return kEosToken;
  if (word == "A") return 1;
  if (word == "B") return 2;
  if (word.size() >= 2 && word[0] == 'w') {
    int id = 0;
    auto [p, ec] = std::from_chars(word.data() + 1, word.data() + word.size(), id);
    if (ec == std::errc() && p == word.data() + word.size() && id >= 3 && id < vocab_)
      return id;
  }
  return 3 + int(fnv1a64(word) % std::uint64_t(vocab_ - 3));
}

std::string Tokenizer::word_of(int id) const {
  if (id < 0 || id >= vocab_) throw std::invalid_argument("token id out of range");
  if (id == kEosToken) return "<eos>";
  if (id == 1) return "A";
  if (id == 2) return "B";
  return "w" + std::to_string(id);
}

TokenSequence Tokenizer::encode(std::string_view text) const {
  TokenSequence out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) out.push_back(token_of(text.substr(start, i - start)));
  }
  return out;
}

std::string Tokenizer::decode(const TokenSequence& tokens) const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += word_of(tokens[i]);
  }
  return out;
}

}  // namespace enstom
