#include "ropeforge/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "byte_io.hpp"
#include "random.hpp"
#include "ropeforge/error.hpp"

namespace ropeforge::corpus {

TokenSeq encode(std::string_view bytes) {
    TokenSeq out(bytes.size());
    std::transform(bytes.begin(), bytes.end(), out.begin(),
                   [](char c) { return static_cast<Token>(static_cast<unsigned char>(c)); });
    return out;
}

std::string decode(std::span<const Token> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (Token t : tokens) {
        if (t == kBos || t == kEos) continue;
        if (t < 0 || t > 255) throw VocabError("token " + std::to_string(t) + " is not a byte");
        out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
}

const char* to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

std::vector<const Document*> Corpus::in_split(Split s) const {
    std::vector<const Document*> out;
    for (const auto& d : documents) {
        if (d.split == s) out.push_back(&d);
    }
    return out;
}

std::size_t Corpus::total_tokens() const {
    std::size_t n = 0;
    for (const auto& d : documents) n += d.tokens.size();
    return n;
}

Corpus from_documents(std::vector<Document> docs, SplitRatios ratios, std::uint64_t seed) {
    if (docs.empty()) throw DataError("no documents to ingest");
    if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 || ratios.train + ratios.val + ratios.test <= 0) {
        throw InputError("split ratios must be non-negative and not all zero");
    }
    const double total = ratios.train + ratios.val + ratios.test;
    rnd::Engine g(rnd::derive(seed, {0x5117}));
    rnd::shuffle(docs.begin(), docs.end(), g);
    const auto n = docs.size();
    const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.train / total));
    const auto n_val = std::min(n - std::min(n, n_train),
                                static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.val / total)));
    for (std::size_t i = 0; i < n; ++i) {
        docs[i].split = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
    }
    return Corpus{std::move(docs)};
}

std::vector<std::filesystem::path> list_text_files(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw DataError("corpus directory not found: " + dir.string());
    std::vector<std::filesystem::path> out;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file()) out.push_back(entry.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

Corpus ingest(std::vector<std::filesystem::path> paths, SplitRatios ratios, std::uint64_t seed) {
    if (paths.empty()) throw DataError("empty input set: no corpus files given");
    std::sort(paths.begin(), paths.end());
    std::vector<Document> docs;
    docs.reserve(paths.size());
    for (const auto& p : paths) {
        const std::string bytes = io::read_file(p.string());
        if (bytes.empty()) throw DataError("corpus file is empty: " + p.string());
        docs.push_back({p.filename().string(), encode(bytes), Split::train});
    }
    return from_documents(std::move(docs), ratios, seed);
}

ChunkRange::ChunkRange(const Corpus& corpus, Split split, int seq_len) : corpus_(&corpus), seq_len_(seq_len) {
    if (seq_len < 2) throw InputError("chunk length must be >= 2");
    const auto body = static_cast<std::size_t>(seq_len - 2);
    for (std::size_t d = 0; d < corpus.documents.size(); ++d) {
        const auto& doc = corpus.documents[d];
        if (doc.split != split) continue;
        if (body == 0) {
            refs_.push_back({d, 0});
            continue;
        }
        for (std::size_t off = 0; off + body <= doc.tokens.size(); off += body) refs_.push_back({d, off});
    }
}

void ChunkRange::materialize_into(std::size_t index, std::span<Token> out) const {
    const Ref& r = refs_.at(index);
    const auto& toks = corpus_->documents[r.doc].tokens;
    const auto body = static_cast<std::size_t>(seq_len_ - 2);
    out[0] = kBos;
    std::copy_n(toks.begin() + static_cast<std::ptrdiff_t>(r.offset), body, out.begin() + 1);
    out[body + 1] = kEos;
}

TokenSeq ChunkRange::materialize(std::size_t index) const {
    TokenSeq out(static_cast<std::size_t>(seq_len_));
    materialize_into(index, out);
    return out;
}

ChunkRange chunks(const Corpus& corpus, Split split, int seq_len) { return ChunkRange(corpus, split, seq_len); }

std::vector<TokenSeq> sample_eval_docs(const Corpus& corpus, Split split, int k, std::int64_t min_len,
                                       std::uint64_t seed) {
    if (k < 0) throw InputError("k must be non-negative");
    std::vector<TokenSeq> out;
    if (k == 0) return out;
    std::vector<const Document*> pool;
    for (const auto* d : corpus.in_split(split)) {
        if (static_cast<std::int64_t>(d->tokens.size()) + 1 >= min_len) pool.push_back(d);
    }
    if (pool.size() < static_cast<std::size_t>(k)) {
        throw DataError("need " + std::to_string(k) + " " + to_string(split) + " documents of length >= " +
                        std::to_string(min_len) + ", found " + std::to_string(pool.size()) + " (short by " +
                        std::to_string(static_cast<std::size_t>(k) - pool.size()) + ")");
    }
    rnd::Engine g(rnd::derive(seed, {0xE7A1, static_cast<std::uint64_t>(min_len)}));
    // Partial Fisher-Yates: the first k slots become the sample.
    for (std::size_t i = 0; i < static_cast<std::size_t>(k); ++i) {
        const auto j = i + rnd::below(g, pool.size() - i);
        std::swap(pool[i], pool[j]);
    }
    for (std::size_t i = 0; i < static_cast<std::size_t>(k); ++i) {
        TokenSeq seq;
        seq.reserve(pool[i]->tokens.size() + 1);
        seq.push_back(kBos);
        seq.insert(seq.end(), pool[i]->tokens.begin(), pool[i]->tokens.end());
        out.push_back(std::move(seq));
    }
    return out;
}

std::string encode_cache(const std::vector<TokenSeq>& docs) {
    std::string out = "TKCH";
    io::put_le<std::uint32_t>(out, kCacheVersion);
    for (const auto& d : docs) {
        io::put_le<std::uint64_t>(out, d.size());
        for (Token t : d) {
            if (t < 0 || t >= kVocabSize) throw VocabError("token out of range in cache encode");
            io::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(t));
        }
    }
    return out;
}

std::vector<TokenSeq> decode_cache(const std::string& bytes) {
    io::Reader in(bytes);
    if (in.take(4) != "TKCH") throw IoError("not a token cache (bad magic)");
    const auto version = in.get_le<std::uint32_t>();
    if (version != kCacheVersion) throw IoError("unsupported token cache version " + std::to_string(version));
    std::vector<TokenSeq> docs;
    while (!in.done()) {
        const auto len = in.get_le<std::uint64_t>();
        if (len > in.remaining() / 2) throw IoError("token cache truncated");
        TokenSeq d(static_cast<std::size_t>(len));
        for (auto& t : d) {
            t = static_cast<Token>(in.get_le<std::uint16_t>());
            if (t >= kVocabSize) throw VocabError("token cache holds id " + std::to_string(t));
        }
        docs.push_back(std::move(d));
    }
    return docs;
}

void write_cache(const std::filesystem::path& path, const Corpus& corpus) {
    std::vector<TokenSeq> docs;
    docs.reserve(corpus.documents.size());
    for (const auto& d : corpus.documents) docs.push_back(d.tokens);
    io::write_file(path.string(), encode_cache(docs));
}

std::vector<TokenSeq> read_cache(const std::filesystem::path& path) { return decode_cache(io::read_file(path.string())); }

}  // namespace ropeforge::corpus
