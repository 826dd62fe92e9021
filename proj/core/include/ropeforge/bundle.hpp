#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ropeforge/rope.hpp"

namespace ropeforge::pipeline {

struct BundleEntry {
    std::int64_t max_len = 0;
    rope::RescaleFactors factors;
};

// Rescale factors keyed by sequence-length range; a sequence uses the entry
// with the smallest max_len that covers it, else the default.
struct FactorBundle {
    rope::RotaryConfig rotary;
    std::vector<BundleEntry> entries;  // ascending max_len
    rope::RescaleFactors default_factors;

    // Throws ConfigError unless max_len is strictly increasing and every
    // entry's target_len covers its max_len.
    void validate() const;
    std::size_t size() const { return entries.size() + 1; }
};

const rope::RescaleFactors& select_factors(const FactorBundle& bundle, std::int64_t seq_len);

// A bundle holding only a default entry.
FactorBundle single_factor_bundle(const rope::RotaryConfig& rotary, const rope::RescaleFactors& rf);

std::string bundle_to_json(const FactorBundle& bundle);
FactorBundle bundle_from_json(const std::string& text);
void write_bundle(const std::filesystem::path& path, const FactorBundle& bundle);
FactorBundle read_bundle(const std::filesystem::path& path);

}  // namespace ropeforge::pipeline
