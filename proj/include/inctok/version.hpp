#pragma once

namespace inctok {

inline constexpr const char* kToolVersion = "0.1.0";

// Bumped whenever the on-disk layout of checkpoints or weight containers
// changes incompatibly.
inline constexpr int kContainerFormatVersion = 1;

}  // namespace inctok
