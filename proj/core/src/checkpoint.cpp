#include "ropeforge/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "byte_io.hpp"
#include "json_codec.hpp"
#include "ropeforge/error.hpp"

namespace ropeforge {

namespace io {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path);
}

}  // namespace io

namespace model {

namespace {

constexpr std::string_view kMagic = "TFCK";

nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},         {"d_model", c.d_model},
            {"n_heads", c.n_heads},           {"head_dim", c.head_dim},
            {"vocab_size", c.vocab_size},     {"trained_len", c.trained_len},
            {"ffn_mult", c.ffn_mult},         {"tied_embeddings", c.tied_embeddings},
            {"rope_base", c.rotary.base}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.head_dim = j.at("head_dim").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.trained_len = j.at("trained_len").get<int>();
    c.ffn_mult = j.at("ffn_mult").get<int>();
    c.tied_embeddings = j.at("tied_embeddings").get<bool>();
    c.rotary = {c.head_dim, j.at("rope_base").get<double>(), c.trained_len};
    c.validate();
    return c;
}

}  // namespace

std::string encode_checkpoint(const ModelCheckpoint& ckpt) {
    ckpt.validate();
    nlohmann::json header;
    header["config"] = config_to_json(ckpt.config);
    header["train_steps"] = ckpt.train_steps;
    header["rng_seed"] = ckpt.rng_seed;
    header["rescale_used"] = ckpt.rescale_used
                                 ? rope::to_json(rope::FactorFile{ckpt.config.rotary, *ckpt.rescale_used})
                                 : nlohmann::json(nullptr);
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& t : ckpt.params.tensors) {
        tensors.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
    }
    header["tensors"] = std::move(tensors);
    const std::string text = header.dump();

    std::string out;
    out.reserve(text.size() + 16 + ckpt.params.total_size() * 4);
    out.append(kMagic);
    io::put_le<std::uint32_t>(out, kCheckpointVersion);
    io::put_le<std::uint64_t>(out, text.size());
    out.append(text);
    for (const auto& t : ckpt.params.tensors) {
        for (float v : t.data) io::put_f32(out, v);
    }
    return out;
}

ModelCheckpoint decode_checkpoint(const std::string& bytes) {
    io::Reader in(bytes);
    if (in.take(4) != kMagic) throw IoError("not a checkpoint file (bad magic)");
    const auto version = in.get_le<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto header_len = in.get_le<std::uint64_t>();
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(in.take(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("corrupt checkpoint header: ") + e.what());
    }
    ModelCheckpoint ckpt;
    try {
        ckpt.config = config_from_json(header.at("config"));
        ckpt.train_steps = header.at("train_steps").get<std::int64_t>();
        ckpt.rng_seed = header.at("rng_seed").get<std::uint64_t>();
        if (!header.at("rescale_used").is_null()) {
            ckpt.rescale_used = rope::factor_file_from(header.at("rescale_used")).factors;
        }
        for (const auto& t : header.at("tensors")) {
            Tensor<float> tensor{t.at("name").get<std::string>(), t.at("rows").get<int>(), t.at("cols").get<int>(), {}};
            tensor.data.resize(static_cast<std::size_t>(tensor.rows) * tensor.cols);
            ckpt.params.tensors.push_back(std::move(tensor));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("corrupt checkpoint header: ") + e.what());
    }
    for (auto& t : ckpt.params.tensors) {
        for (float& v : t.data) v = in.get_f32();
    }
    if (!in.done()) throw IoError("trailing bytes after checkpoint tensors");
    ckpt.validate();
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ckpt) {
    io::write_file(path.string(), encode_checkpoint(ckpt));
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(io::read_file(path.string()));
}

}  // namespace model
}  // namespace ropeforge
