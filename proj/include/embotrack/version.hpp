#pragma once

namespace embotrack {

inline constexpr const char* kVersion = "0.1.0";

// Bumped whenever the on-disk layout of datasets or checkpoints changes.
inline constexpr int kDatasetFormatVersion = 1;
inline constexpr int kCheckpointFormatVersion = 1;

}  // namespace embotrack
