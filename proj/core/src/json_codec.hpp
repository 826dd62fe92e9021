#pragma once

// nlohmann/json conversions shared by the serializers. Not installed.

#include <json.hpp>

#include "ropeforge/factor_io.hpp"

namespace ropeforge::rope {

nlohmann::json to_json(const FactorFile& file);
FactorFile factor_file_from(const nlohmann::json& j);

}  // namespace ropeforge::rope
