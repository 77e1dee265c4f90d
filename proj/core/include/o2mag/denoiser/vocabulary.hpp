#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

namespace o2mag::denoiser {

using TokenIds = std::vector<std::size_t>;

/// Fixed token list. Prompts use the template
///   "a photo of a [cls] with a [anomaly]"
/// which is always kPromptLength tokens with the anomaly word last.
class Vocabulary {
 public:
  static constexpr std::size_t kPromptLength = 8;
  static constexpr std::size_t kAnomalyIndex = 7;

  Vocabulary();
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  bool contains(const std::string& tok) const { return index_.count(tok) != 0; }
  std::size_t id(const std::string& tok) const;

  /// Whitespace tokenization; every word must be in the vocabulary.
  TokenIds tokenize(const std::string& text) const;

  TokenIds anomaly_prompt(const std::string& cls, const std::string& anomaly) const;
  /// "a photo of a [cls]" padded; `adjective` (e.g. "clean") is inserted before the class if given.
  TokenIds normal_prompt(const std::string& cls, const std::string& adjective = "") const;
  TokenIds null_prompt() const;
  /// Phrases joined and padded to the prompt length; an empty list gives the null prompt.
  TokenIds phrase_prompt(const std::vector<std::string>& phrases) const;

 private:
  TokenIds pad(TokenIds ids) const;

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace o2mag::denoiser
