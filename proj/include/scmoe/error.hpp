// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace scmoe {

enum class Errc {
  kInvalidArgument,
  kEmptySupport,
  kUnboundedDivergence,
  kDegenerateGates,
  kContextOverflow,
  kTokenOutOfRange,
  kBadMagic,
  kVersionMismatch,
  kTruncatedPayload,
  kShapeMismatch,
  kIo,
  kParse,
  kNoVotableAnswers,
};

std::string_view errc_name(Errc code);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  [[nodiscard]] Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

// Process exit status for the command-line tool: 3 for I/O, 4 for everything
// numeric or model related. Usage errors (2) never reach an Error.
int exit_code_for(Errc code);

}  // namespace scmoe
