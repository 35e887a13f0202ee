#pragma once

#include <cstdint>
#include <vector>

namespace twinseq {

// Per-frame integer class ids.
using LabelSequence = std::vector<std::uint32_t>;

}  // namespace twinseq
