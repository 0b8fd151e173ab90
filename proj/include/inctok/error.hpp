#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace inctok {

// Every failure the library reports carries one of these codes so callers
// (and the CLI exit-code mapping) can react without parsing messages.
enum class Errc {
  invalid_taxonomy,
  ambiguous_anchor,
  span_resolution,
  config,
  contract,
  schedule,
  init,
  balance_infeasible,
  checkpoint,
  provenance,
  undefined_distribution,
  numeric,
  io,
  partial_result,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::invalid_taxonomy: return "invalid_taxonomy";
    case Errc::ambiguous_anchor: return "ambiguous_anchor";
    case Errc::span_resolution: return "span_resolution";
    case Errc::config: return "config";
    case Errc::contract: return "contract";
    case Errc::schedule: return "schedule";
    case Errc::init: return "init";
    case Errc::balance_infeasible: return "balance_infeasible";
    case Errc::checkpoint: return "checkpoint";
    case Errc::provenance: return "provenance";
    case Errc::undefined_distribution: return "undefined_distribution";
    case Errc::numeric: return "numeric";
    case Errc::io: return "io";
    case Errc::partial_result: return "partial_result";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& msg)
      : std::runtime_error(std::string(errc_name(code)) + ": " + msg), code_(code) {}

  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool cond, Errc code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

}  // namespace inctok
