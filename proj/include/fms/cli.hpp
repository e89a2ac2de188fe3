#pragma once

#include <iosfwd>

namespace fms {

/// Command-line entry point: gen-template, run, train, ablate, bench, viz.
/// Returns 0 on success, 1 on a usage error and 2 on a runtime failure;
/// diagnostics go to `err`. FMS_SEED, when set, overrides --seed and the
/// configured seed.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace fms
