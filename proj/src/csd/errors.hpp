#pragma once

#include <stdexcept>
#include <string>

namespace csd {

// Mirrors csd_status in the C API; the numeric values are part of the ABI.
enum class ErrorCode : int {
  ContractViolation = 1,
  DegenerateDistribution = 2,
  Config = 3,
  Io = 4,
  Training = 5,
  Construction = 6,
  RemoteUnavailable = 7,
  Protocol = 8,
  Equivalence = 9,
  Internal = 10,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

#define CSD_DEFINE_ERROR(Name, Code)                                          \
  class Name : public Error {                                                 \
   public:                                                                    \
    explicit Name(const std::string& what) : Error(ErrorCode::Code, what) {} \
  };

CSD_DEFINE_ERROR(ContractViolation, ContractViolation)
CSD_DEFINE_ERROR(DegenerateDistribution, DegenerateDistribution)
CSD_DEFINE_ERROR(ConfigError, Config)
CSD_DEFINE_ERROR(IoError, Io)
CSD_DEFINE_ERROR(TrainingError, Training)
CSD_DEFINE_ERROR(ConstructionError, Construction)
CSD_DEFINE_ERROR(RemoteUnavailable, RemoteUnavailable)
CSD_DEFINE_ERROR(ProtocolError, Protocol)
CSD_DEFINE_ERROR(EquivalenceError, Equivalence)

#undef CSD_DEFINE_ERROR

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractViolation(what);
}

}  // namespace csd
