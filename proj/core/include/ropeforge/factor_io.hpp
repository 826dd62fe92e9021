#pragma once

#include <filesystem>
#include <string>

#include "ropeforge/rope.hpp"

namespace ropeforge::rope {

// On-disk factor file: the rotary geometry plus one RescaleFactors.
struct FactorFile {
    RotaryConfig rotary;
    RescaleFactors factors;
};

// {"head_dim","base","original_len","target_len","start_token","factors"}
std::string to_json_string(const FactorFile& file);
FactorFile factor_file_from_json(const std::string& text);

void write_factor_file(const std::filesystem::path& path, const FactorFile& file);
FactorFile read_factor_file(const std::filesystem::path& path);

}  // namespace ropeforge::rope
