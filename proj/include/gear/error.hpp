#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gear {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or arguments; detected before any work starts.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A corpus file could not be read; `line()` is 1-based, 0 when not line-specific.
class CorpusError : public Error {
 public:
  CorpusError(const std::string& what, std::size_t line = 0)
      : Error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// An LLM response did not contain a usable candidate list.
class ParseFailure : public Error {
 public:
  using Error::Error;
};

/// Network-level failure talking to a model endpoint.
class TransportError : public Error {
 public:
  explicit TransportError(const std::string& what, bool retryable = true)
      : Error(what), retryable_(retryable) {}
  bool retryable() const noexcept { return retryable_; }

 private:
  bool retryable_;
};

/// Candidate generation failed for one definition after all retries.
class GenerationError : public Error {
 public:
  GenerationError(std::string definition, const std::string& cause)
      : Error("generation failed for definition \"" + definition + "\": " + cause),
        definition_(std::move(definition)) {}
  const std::string& definition() const noexcept { return definition_; }

 private:
  std::string definition_;
};

/// Embedding failed; carries the texts of the failed batch.
class EmbeddingError : public Error {
 public:
  EmbeddingError(const std::string& what, std::vector<std::string> texts = {})
      : Error(what), texts_(std::move(texts)) {}
  const std::vector<std::string>& texts() const noexcept { return texts_; }

 private:
  std::vector<std::string> texts_;
};

/// On-disk cache failed a shape or checksum check.
class CorruptCacheError : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

/// None of a query's gold terms is present in the index vocabulary.
class MissingGold : public Error {
 public:
  using Error::Error;
};

/// A metric was requested over an empty result set.
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

}  // namespace gear
