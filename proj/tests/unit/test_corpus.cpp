#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "../support/temp_dir.hpp"
#include "ropeforge/corpus.hpp"
#include "ropeforge/error.hpp"
#include "ropeforge/synth.hpp"

namespace {

using namespace ropeforge;
using namespace ropeforge::corpus;
using ropeforge::testing::spit;
using ropeforge::testing::TempDir;

TEST(ByteVocab, EncodeDecodeRoundTrip) {
    std::string all;
    for (int b = 0; b < 256; ++b) all.push_back(static_cast<char>(b));
    const auto toks = encode(all);
    ASSERT_EQ(toks.size(), 256u);
    for (int b = 0; b < 256; ++b) EXPECT_EQ(toks[static_cast<std::size_t>(b)], b);
    EXPECT_EQ(decode(toks), all);
}

TEST(ByteVocab, DecodeDropsFramingAndRejectsUnknown) {
    const TokenSeq t{kBos, 'h', 'i', kEos};
    EXPECT_EQ(decode(t), "hi");
    const TokenSeq bad{'a', 999};
    EXPECT_THROW(decode(bad), VocabError);
}

std::vector<Document> numbered_docs(int n, std::size_t len) {
    std::vector<Document> docs;
    for (int i = 0; i < n; ++i) {
        docs.push_back({"doc" + std::to_string(i), TokenSeq(len, static_cast<Token>(i % 256)), Split::train});
    }
    return docs;
}

TEST(Split, DeterministicAndProportional) {
    const auto a = from_documents(numbered_docs(100, 10), {0.8, 0.1, 0.1}, 7);
    const auto b = from_documents(numbered_docs(100, 10), {0.8, 0.1, 0.1}, 7);
    EXPECT_EQ(a.in_split(Split::train).size(), 80u);
    EXPECT_EQ(a.in_split(Split::val).size(), 10u);
    EXPECT_EQ(a.in_split(Split::test).size(), 10u);
    for (std::size_t i = 0; i < a.documents.size(); ++i) {
        EXPECT_EQ(a.documents[i].name, b.documents[i].name);
        EXPECT_EQ(a.documents[i].split, b.documents[i].split);
    }
    const auto c = from_documents(numbered_docs(100, 10), {0.8, 0.1, 0.1}, 8);
    std::set<std::string> test_a, test_c;
    for (const auto* d : a.in_split(Split::test)) test_a.insert(d->name);
    for (const auto* d : c.in_split(Split::test)) test_c.insert(d->name);
    EXPECT_NE(test_a, test_c);
}

TEST(Split, RejectsEmptyAndBadRatios) {
    EXPECT_THROW(from_documents({}, {}, 1), DataError);
    EXPECT_THROW(from_documents(numbered_docs(3, 4), {0, 0, 0}, 1), InputError);
    EXPECT_THROW(from_documents(numbered_docs(3, 4), {-1, 1, 1}, 1), InputError);
}

TEST(Ingest, ReadsFilesIndependentOfListingOrder) {
    TempDir dir;
    for (int i = 0; i < 12; ++i) spit(dir / ("f" + std::to_string(i) + ".txt"), std::string(40 + i, 'a' + i % 26));
    auto paths = list_text_files(dir.path());
    ASSERT_EQ(paths.size(), 12u);
    const auto a = ingest(paths, {}, 3);
    std::reverse(paths.begin(), paths.end());
    const auto b = ingest(paths, {}, 3);
    for (std::size_t i = 0; i < a.documents.size(); ++i) {
        EXPECT_EQ(a.documents[i].name, b.documents[i].name);
        EXPECT_EQ(a.documents[i].split, b.documents[i].split);
    }
    EXPECT_EQ(a.total_tokens(), static_cast<std::size_t>(12 * 40 + 66));
}

TEST(Ingest, Errors) {
    TempDir dir;
    EXPECT_THROW(ingest({}, {}, 1), DataError);
    spit(dir / "empty.txt", "");
    EXPECT_THROW(ingest({dir / "empty.txt"}, {}, 1), DataError);
    EXPECT_THROW(list_text_files(dir / "nope"), DataError);
}

TEST(Chunks, FramedConsecutiveSegments) {
    std::vector<Document> docs{{"a", {}, Split::train}, {"b", {}, Split::train}};
    for (int i = 0; i < 25; ++i) docs[0].tokens.push_back(i);
    for (int i = 0; i < 5; ++i) docs[1].tokens.push_back(100 + i);
    Corpus c{docs};
    const auto range = chunks(c, Split::train, 8);
    // Body of 6 tokens: document a gives 4 chunks (24 tokens, tail of 1 dropped), b gives none.
    ASSERT_EQ(range.size(), 4u);
    std::size_t k = 0;
    for (const auto& chunk : range) {
        ASSERT_EQ(chunk.size(), 8u);
        EXPECT_EQ(chunk.front(), kBos);
        EXPECT_EQ(chunk.back(), kEos);
        for (int j = 0; j < 6; ++j) EXPECT_EQ(chunk[static_cast<std::size_t>(j + 1)], static_cast<Token>(6 * k + j));
        ++k;
    }
    EXPECT_EQ(k, 4u);
    EXPECT_THROW(chunks(c, Split::train, 1), InputError);
}

TEST(EvalDocs, SampleRespectsLengthAndSeed) {
    auto docs = numbered_docs(40, 10);
    for (std::size_t i = 0; i < docs.size(); ++i) docs[i].tokens.resize(10 + 10 * i);
    const auto c = from_documents(docs, {0, 0, 1}, 1);
    const auto a = sample_eval_docs(c, Split::test, 5, 200, 9);
    const auto b = sample_eval_docs(c, Split::test, 5, 200, 9);
    ASSERT_EQ(a.size(), 5u);
    EXPECT_EQ(a, b);
    std::set<TokenSeq> distinct(a.begin(), a.end());
    EXPECT_EQ(distinct.size(), 5u);
    for (const auto& d : a) {
        EXPECT_GE(d.size(), 200u);
        EXPECT_EQ(d.front(), kBos);
    }
    EXPECT_THROW(sample_eval_docs(c, Split::test, 30, 200, 9), DataError);
    EXPECT_THROW(sample_eval_docs(c, Split::val, 1, 2, 9), DataError);
}

TEST(Synth, DeterministicAndSized) {
    SynthOptions opts;
    opts.total_bytes = 200'000;
    opts.min_doc_bytes = 5'000;
    opts.max_doc_bytes = 20'000;
    const auto a = synthesize_corpus(opts);
    const auto b = synthesize_corpus(opts);
    ASSERT_EQ(a.size(), b.size());
    std::size_t total = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].text, b[i].text);
        EXPECT_GE(a[i].text.size(), opts.min_doc_bytes);
        total += a[i].text.size();
        for (unsigned char ch : a[i].text) EXPECT_LT(ch, 128u);
    }
    EXPECT_GE(total, opts.total_bytes);
    opts.seed = 2;
    EXPECT_NE(synthesize_corpus(opts)[0].text, a[0].text);
    opts.min_doc_bytes = 0;
    EXPECT_THROW(synthesize_corpus(opts), InputError);
}

TEST(Synth, WritesIngestibleFiles) {
    TempDir dir;
    SynthOptions opts;
    opts.total_bytes = 50'000;
    opts.min_doc_bytes = 5'000;
    opts.max_doc_bytes = 6'000;
    const auto paths = write_synth_corpus(dir / "c", opts);
    const auto c = ingest(list_text_files(dir / "c"), {}, 1);
    EXPECT_EQ(c.documents.size(), paths.size());
    EXPECT_GE(c.total_tokens(), 50'000u);
}

}  // namespace
