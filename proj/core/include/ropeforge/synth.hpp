#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ropeforge::corpus {

// Deterministic English-like sample corpus. Each document introduces its own
// invented names, places and numeric codes and keeps referring back to them,
// so a model that can see further back predicts better.
struct SynthOptions {
    std::size_t total_bytes = 6'000'000;
    std::size_t min_doc_bytes = 20'000;
    std::size_t max_doc_bytes = 80'000;
    std::uint64_t seed = 1;
};

struct SynthDocument {
    std::string name;
    std::string text;
};

std::vector<SynthDocument> synthesize_corpus(const SynthOptions& opts);

// Writes one .txt file per document into dir (created if needed) and returns
// the written paths in order.
std::vector<std::filesystem::path> write_synth_corpus(const std::filesystem::path& dir, const SynthOptions& opts);

}  // namespace ropeforge::corpus
