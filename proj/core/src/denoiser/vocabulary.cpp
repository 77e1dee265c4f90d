#include "o2mag/denoiser/vocabulary.hpp"

#include <sstream>
#include <stdexcept>

namespace o2mag::denoiser {

Vocabulary::Vocabulary()
    : Vocabulary({"<pad>", "<null>", "a", "photo", "of", "with", "grid", "stripes", "speckle", "hole", "scratch",
                  "color-patch", "clean", "intact", "no"}) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], i).second) throw std::invalid_argument("duplicate token '" + tokens_[i] + "'");
  }
  for (const char* required : {"<pad>", "<null>", "a", "photo", "of", "with"}) {
    if (!contains(required)) throw std::invalid_argument(std::string("vocabulary lacks template token '") + required + "'");
  }
}

std::size_t Vocabulary::id(const std::string& tok) const {
  auto it = index_.find(tok);
  if (it == index_.end()) throw std::invalid_argument("unknown token '" + tok + "'");
  return it->second;
}

TokenIds Vocabulary::tokenize(const std::string& text) const {
  TokenIds ids;
  std::istringstream in(text);
  std::string w;
  while (in >> w) ids.push_back(id(w));
  return ids;
}

TokenIds Vocabulary::pad(TokenIds ids) const {
  if (ids.size() > kPromptLength) {
    throw std::invalid_argument("prompt of " + std::to_string(ids.size()) + " tokens exceeds length " +
                                std::to_string(kPromptLength));
  }
  ids.resize(kPromptLength, id("<pad>"));
  return ids;
}

TokenIds Vocabulary::anomaly_prompt(const std::string& cls, const std::string& anomaly) const {
  return pad({id("a"), id("photo"), id("of"), id("a"), id(cls), id("with"), id("a"), id(anomaly)});
}

TokenIds Vocabulary::normal_prompt(const std::string& cls, const std::string& adjective) const {
  TokenIds ids{id("a"), id("photo"), id("of"), id("a")};
  if (!adjective.empty()) ids.push_back(id(adjective));
  ids.push_back(id(cls));
  return pad(std::move(ids));
}

TokenIds Vocabulary::null_prompt() const { return TokenIds(kPromptLength, id("<null>")); }

TokenIds Vocabulary::phrase_prompt(const std::vector<std::string>& phrases) const {
  if (phrases.empty()) return null_prompt();
  TokenIds ids;
  for (const auto& p : phrases) {
    for (auto i : tokenize(p)) ids.push_back(i);
  }
  return pad(std::move(ids));
}

}  // namespace o2mag::denoiser
