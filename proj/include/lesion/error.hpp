#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace lesion {

/// A required upstream artifact is missing or stale. The CLI maps this to
/// exit code 2.
class PreconditionError : public std::runtime_error {
public:
  PreconditionError(const std::string& stage, const std::string& what)
      : std::runtime_error(what), stage_(stage) {}

  /// Name of the command that produces the missing artifact.
  const std::string& stage() const noexcept { return stage_; }

private:
  std::string stage_;
};

/// One or more records failed a per-record check; carries their ids.
class RecordError : public std::runtime_error {
public:
  RecordError(const std::string& what, std::vector<std::string> ids)
      : std::runtime_error(what + ": " + join(ids)), ids_(std::move(ids)) {}

  const std::vector<std::string>& ids() const noexcept { return ids_; }

private:
  static std::string join(const std::vector<std::string>& ids) {
    std::string out;
    for (const auto& id : ids) {
      if (!out.empty()) out += ", ";
      out += id;
    }
    return out;
  }
  std::vector<std::string> ids_;
};

}  // namespace lesion
