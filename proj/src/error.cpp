// SPDX-License-Identifier: Apache-2.0
#include "scmoe/error.hpp"

namespace scmoe {

std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::kInvalidArgument: return "invalid argument";
    case Errc::kEmptySupport: return "empty support";
    case Errc::kUnboundedDivergence: return "unbounded divergence";
    case Errc::kDegenerateGates: return "degenerate gates";
    case Errc::kContextOverflow: return "context overflow";
    case Errc::kTokenOutOfRange: return "token out of range";
    case Errc::kBadMagic: return "bad magic";
    case Errc::kVersionMismatch: return "version mismatch";
    case Errc::kTruncatedPayload: return "truncated payload";
    case Errc::kShapeMismatch: return "shape mismatch";
    case Errc::kIo: return "i/o error";
    case Errc::kParse: return "parse error";
    case Errc::kNoVotableAnswers: return "no votable answers";
  }
  return "unknown";
}

int exit_code_for(Errc code) {
  switch (code) {
    case Errc::kIo:
    case Errc::kParse:
    case Errc::kBadMagic:
    case Errc::kVersionMismatch:
    case Errc::kTruncatedPayload:
    case Errc::kShapeMismatch:
      return 3;
    default:
      return 4;
  }
}

}  // namespace scmoe
