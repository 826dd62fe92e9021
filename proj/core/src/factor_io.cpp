#include "ropeforge/factor_io.hpp"

#include <fstream>
#include <sstream>

#include "json_codec.hpp"
#include "ropeforge/error.hpp"

namespace ropeforge::rope {

nlohmann::json to_json(const FactorFile& file) {
    nlohmann::json j;
    j["head_dim"] = file.rotary.head_dim;
    j["base"] = file.rotary.base;
    j["original_len"] = file.rotary.original_len;
    j["target_len"] = file.factors.target_len;
    j["start_token"] = file.factors.start_token;
    j["factors"] = file.factors.factors;
    return j;
}

FactorFile factor_file_from(const nlohmann::json& j) {
    try {
        FactorFile f;
        f.rotary.head_dim = j.at("head_dim").get<int>();
        f.rotary.base = j.at("base").get<double>();
        f.rotary.original_len = j.at("original_len").get<int>();
        f.rotary.validate();
        f.factors = RescaleFactors::make(j.at("factors").get<std::vector<double>>(),
                                         j.at("start_token").get<std::int64_t>(),
                                         j.at("target_len").get<std::int64_t>(),
                                         f.rotary.original_len);
        if (f.factors.factors.size() != static_cast<std::size_t>(f.rotary.pairs())) {
            throw ShapeError("factor file has " + std::to_string(f.factors.factors.size()) +
                             " factors for head_dim " + std::to_string(f.rotary.head_dim));
        }
        return f;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed factor file: ") + e.what());
    }
}

std::string to_json_string(const FactorFile& file) { return to_json(file).dump(2) + "\n"; }

FactorFile factor_file_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("factor file is not valid JSON: ") + e.what());
    }
    return factor_file_from(j);
}

void write_factor_file(const std::filesystem::path& path, const FactorFile& file) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_json_string(file);
    if (!out) throw IoError("write failed for " + path.string());
}

FactorFile read_factor_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read factor file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return factor_file_from_json(ss.str());
}

}  // namespace ropeforge::rope
