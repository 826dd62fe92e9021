#pragma once

#include <cstdint>
#include <filesystem>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ropeforge/types.hpp"

namespace ropeforge::corpus {

// Byte-level vocabulary: ids 0..255 are raw bytes, then two framing tokens.
inline constexpr Token kBos = 256;
inline constexpr Token kEos = 257;
inline constexpr int kVocabSize = 258;

TokenSeq encode(std::string_view bytes);
// Framing tokens are dropped; throws VocabError on ids outside the vocabulary.
std::string decode(std::span<const Token> tokens);

enum class Split : std::uint8_t { train, val, test };
const char* to_string(Split s);

struct Document {
    std::string name;
    TokenSeq tokens;  // unframed byte tokens
    Split split = Split::train;
};

struct SplitRatios {
    double train = 0.9;
    double val = 0.05;
    double test = 0.05;
};

struct Corpus {
    std::vector<Document> documents;

    std::vector<const Document*> in_split(Split s) const;
    std::size_t total_tokens() const;
};

// One document per file. Paths are sorted before the seeded shuffle so the
// split depends only on file contents, names and seed.
Corpus ingest(std::vector<std::filesystem::path> paths, SplitRatios ratios, std::uint64_t seed);

// Regular files directly inside dir (non-recursive).
std::vector<std::filesystem::path> list_text_files(const std::filesystem::path& dir);

// Builds a corpus from already tokenized documents with the same split rule.
Corpus from_documents(std::vector<Document> docs, SplitRatios ratios, std::uint64_t seed);

// Fixed-length training chunks: BOS, seq_len-2 consecutive document tokens,
// EOS. Documents are cut into consecutive segments; a tail shorter than
// seq_len-2 is dropped.
class ChunkRange {
public:
    struct Ref {
        std::size_t doc;
        std::size_t offset;
    };

    class iterator {
    public:
        using iterator_category = std::input_iterator_tag;
        using value_type = TokenSeq;
        using difference_type = std::ptrdiff_t;

        iterator(const ChunkRange* range, std::size_t index) : range_(range), index_(index) {}
        TokenSeq operator*() const { return range_->materialize(index_); }
        iterator& operator++() {
            ++index_;
            return *this;
        }
        bool operator==(const iterator& o) const { return index_ == o.index_; }

    private:
        const ChunkRange* range_;
        std::size_t index_;
    };

    ChunkRange(const Corpus& corpus, Split split, int seq_len);

    std::size_t size() const { return refs_.size(); }
    int seq_len() const { return seq_len_; }
    TokenSeq materialize(std::size_t index) const;
    // Writes chunk `index` into out (size seq_len).
    void materialize_into(std::size_t index, std::span<Token> out) const;

    iterator begin() const { return {this, 0}; }
    iterator end() const { return {this, refs_.size()}; }

private:
    const Corpus* corpus_;
    int seq_len_;
    std::vector<Ref> refs_;
};

ChunkRange chunks(const Corpus& corpus, Split split, int seq_len);

// Evaluation documents are BOS followed by the document bytes; a document
// qualifies when that framed length is at least min_len. Sampling is uniform
// without replacement and deterministic in seed.
std::vector<TokenSeq> sample_eval_docs(const Corpus& corpus, Split split, int k, std::int64_t min_len,
                                       std::uint64_t seed);

// Tokenized cache: "TKCH" | u32 version | per document (u64 length, u16 ids).
inline constexpr std::uint32_t kCacheVersion = 1;
std::string encode_cache(const std::vector<TokenSeq>& docs);
std::vector<TokenSeq> decode_cache(const std::string& bytes);
void write_cache(const std::filesystem::path& path, const Corpus& corpus);
std::vector<TokenSeq> read_cache(const std::filesystem::path& path);

}  // namespace ropeforge::corpus
