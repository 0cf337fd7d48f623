#pragma once

#include <stdexcept>
#include <string>

namespace dflow {

enum class ErrorCode {
  InvalidAlphabet,
  InvalidSchedule,
  InvalidDistribution,
  InvalidDenoiser,
  Capacity,
  UnreachableState,
  TimeDomain,
  NotAvailable,
  TrainingDiverged,
  IncompleteSample,
  IncompatibleConfig,
  ModeError,
  BadInput,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace dflow
