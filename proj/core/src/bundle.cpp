#include "ropeforge/bundle.hpp"

#include "byte_io.hpp"
#include "json_codec.hpp"
#include "ropeforge/error.hpp"

namespace ropeforge::pipeline {

void FactorBundle::validate() const {
    rotary.validate();
    std::int64_t prev = 0;
    for (const auto& e : entries) {
        if (e.max_len <= prev) throw ConfigError("bundle max_len values must be positive and strictly increasing");
        if (e.factors.target_len < e.max_len) {
            throw ConfigError("bundle entry for max_len " + std::to_string(e.max_len) + " has target_len " +
                              std::to_string(e.factors.target_len));
        }
        prev = e.max_len;
    }
}

const rope::RescaleFactors& select_factors(const FactorBundle& bundle, std::int64_t seq_len) {
    for (const auto& e : bundle.entries) {
        if (seq_len <= e.max_len) return e.factors;
    }
    return bundle.default_factors;
}

FactorBundle single_factor_bundle(const rope::RotaryConfig& rotary, const rope::RescaleFactors& rf) {
    return {rotary, {}, rf};
}

std::string bundle_to_json(const FactorBundle& bundle) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : bundle.entries) {
        entries.push_back({{"max_len", e.max_len}, {"rope", rope::to_json({bundle.rotary, e.factors})}});
    }
    nlohmann::json j = {
        {"entries", entries},
        {"default", rope::to_json({bundle.rotary, bundle.default_factors})},
    };
    return j.dump(2) + "\n";
}

FactorBundle bundle_from_json(const std::string& text) {
    try {
        const auto j = nlohmann::json::parse(text);
        FactorBundle b;
        const auto def = rope::factor_file_from(j.at("default"));
        b.rotary = def.rotary;
        b.default_factors = def.factors;
        for (const auto& e : j.at("entries")) {
            const auto f = rope::factor_file_from(e.at("rope"));
            if (!(f.rotary == b.rotary)) throw DataError("bundle entries disagree on the rotary configuration");
            b.entries.push_back({e.at("max_len").get<std::int64_t>(), f.factors});
        }
        b.validate();
        return b;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed factor bundle: ") + e.what());
    }
}

void write_bundle(const std::filesystem::path& path, const FactorBundle& bundle) {
    io::write_file(path.string(), bundle_to_json(bundle));
}

FactorBundle read_bundle(const std::filesystem::path& path) { return bundle_from_json(io::read_file(path.string())); }

}  // namespace ropeforge::pipeline
