#pragma once

#include <cstdint>
#include <vector>

namespace ropeforge {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

}  // namespace ropeforge
