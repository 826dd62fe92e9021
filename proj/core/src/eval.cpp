#include "ropeforge/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "random.hpp"
#include "ropeforge/error.hpp"
#include "ropeforge/parallel.hpp"

namespace ropeforge::eval {

namespace {

constexpr std::string_view kPreamble =
    "There is an important info hidden inside a lot of irrelevant text. Find it and memorize them. "
    "I will quiz you about the important information there.";
constexpr std::string_view kFiller =
    "The grass is green. The sky is blue. The sun is yellow. Here we go. There and back again.";
constexpr std::string_view kQuestion = "What is the pass key? The pass key is";

// Each filler repeat is followed by one space, so the document length depends
// only on x + y.
constexpr std::int64_t kFillerBlock = static_cast<std::int64_t>(kFiller.size()) + 1;

void append_filler(std::string& out, int repeats) {
    for (int i = 0; i < repeats; ++i) {
        out += kFiller;
        out += ' ';
    }
}

std::vector<std::int64_t> sorted_unique(std::vector<std::int64_t> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
}

std::string fixed(double x, int precision) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << x;
    return os.str();
}

}  // namespace

double WindowScore::perplexity() const {
    if (scored_tokens == 0) throw InputError("no tokens were scored");
    return std::exp(total_nll / static_cast<double>(scored_tokens));
}

std::int64_t default_stride(std::int64_t context_len) { return std::max<std::int64_t>(1, context_len / 16); }

WindowScore sliding_window_nll(const model::ModelCheckpoint& ckpt, std::span<const Token> doc,
                               std::int64_t context_len, const rope::RescaleFactors* rf, std::int64_t stride) {
    if (stride < 1) throw InputError("stride must be >= 1");
    if (context_len < 2) throw InputError("context length must be >= 2");
    const auto len = static_cast<std::int64_t>(doc.size());
    if (len < context_len) {
        throw LengthError("document of " + std::to_string(len) + " tokens is shorter than context length " +
                          std::to_string(context_len));
    }
    std::vector<std::int64_t> starts;
    for (std::int64_t b = 0; b + context_len <= len; b += stride) starts.push_back(b);
    if (starts.back() + context_len < len) starts.push_back(len - context_len);

    WindowScore score;
    std::int64_t next_target = 1;
    for (std::int64_t b : starts) {
        const auto window = doc.subspan(static_cast<std::size_t>(b), static_cast<std::size_t>(context_len));
        const auto nll = model::token_nll(ckpt, window, rf);
        for (std::int64_t j = 0; j + 1 < context_len; ++j) {
            const std::int64_t target = b + j + 1;
            if (target < next_target) continue;
            score.total_nll += nll[static_cast<std::size_t>(j)];
            ++score.scored_tokens;
        }
        next_target = std::max(next_target, b + context_len);
        ++score.windows;
    }
    return score;
}

double sliding_window_ppl(const model::ModelCheckpoint& ckpt, std::span<const Token> doc, std::int64_t context_len,
                          const rope::RescaleFactors* rf, std::int64_t stride) {
    return sliding_window_nll(ckpt, doc, context_len, rf, stride).perplexity();
}

PplReport ppl_sweep(const model::ModelCheckpoint& ckpt, const corpus::Corpus& corpus,
                    std::vector<std::int64_t> context_lens, const pipeline::FactorBundle& bundle, int k_docs,
                    std::uint64_t seed, const SweepOptions& opts) {
    if (k_docs < 1) throw InputError("ppl sweep needs k_docs >= 1");
    PplReport report;
    for (std::int64_t len : sorted_unique(std::move(context_lens))) {
        const rope::RescaleFactors& rf = select_factors(bundle, len);
        std::vector<TokenSeq> docs;
        try {
            docs = corpus::sample_eval_docs(corpus, opts.split, k_docs, len,
                                            rnd::derive(seed, {static_cast<std::uint64_t>(len)}));
        } catch (const DataError& e) {
            throw DataError("context length " + std::to_string(len) + ": " + e.what());
        }
        const std::int64_t stride = opts.stride.value_or(default_stride(len));
        std::vector<WindowScore> scores(docs.size());
        parallel_for(docs.size(), opts.threads, [&](std::size_t i) {
            std::span<const Token> doc(docs[i]);
            if (opts.truncate_docs) doc = doc.first(static_cast<std::size_t>(len));
            scores[i] = sliding_window_nll(ckpt, doc, len, &rf, stride);
        });
        double nll = 0.0;
        std::int64_t scored = 0;
        for (const auto& s : scores) {
            nll += s.total_nll;
            scored += s.scored_tokens;
        }
        report.rows.push_back({len, std::exp(nll / static_cast<double>(scored)), static_cast<int>(docs.size()), scored});
    }
    return report;
}

PasskeyDoc make_passkey_doc(int x, int y, const std::string& key) {
    if (key.size() != 5 || !std::all_of(key.begin(), key.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        throw InputError("pass key must be exactly 5 digits, got '" + key + "'");
    }
    if (x < 0 || y < 0) throw InputError("filler repeat counts must be >= 0");
    std::string text(kPreamble);
    text += '\n';
    append_filler(text, x);
    text += '\n';
    const auto key_offset = static_cast<std::int64_t>(text.size());
    text += "The pass key is " + key + ". Remember it. " + key + " is the pass key.\n";
    append_filler(text, y);
    text += '\n';
    text += kQuestion;

    PasskeyDoc doc;
    doc.tokens.reserve(text.size() + 1);
    doc.tokens.push_back(corpus::kBos);
    const auto body = corpus::encode(text);
    doc.tokens.insert(doc.tokens.end(), body.begin(), body.end());
    doc.key_position = 1 + key_offset;
    return doc;
}

int max_filler_repeats(std::int64_t max_tokens) {
    const auto base = static_cast<std::int64_t>(make_passkey_doc(0, 0, "00000").tokens.size());
    if (base > max_tokens) return -1;
    return static_cast<int>((max_tokens - base) / kFillerBlock);
}

std::string extract_digits(std::string_view bytes) {
    std::size_t i = 0;
    while (i < bytes.size()) {
        if (bytes[i] < '0' || bytes[i] > '9') {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < bytes.size() && bytes[j] >= '0' && bytes[j] <= '9') ++j;
        if (j - i >= 5) return std::string(bytes.substr(i, j - i));
        i = j;
    }
    return {};
}

Generator model_generator(const model::ModelCheckpoint& ckpt, const pipeline::FactorBundle& bundle) {
    return [&ckpt, &bundle](std::span<const Token> prompt, int max_new, std::int64_t context_len) {
        const rope::RescaleFactors& rf = select_factors(bundle, context_len);
        TokenSeq out = model::generate_greedy(ckpt, prompt, &rf, max_new);
        return TokenSeq(out.begin() + static_cast<std::ptrdiff_t>(prompt.size()), out.end());
    };
}

PasskeyTrial plan_passkey_trial(std::int64_t context_len, std::uint64_t stream_seed, PasskeyDoc* doc) {
    rnd::Engine g(stream_seed);
    PasskeyTrial t;
    t.context_len = context_len;
    t.key = std::to_string(10000 + rnd::below(g, 90000));
    const int repeats = max_filler_repeats(context_len - kPasskeyMaxNew);
    if (repeats < 0) {
        t.diagnostic = "context length " + std::to_string(context_len) + " cannot hold the passkey template";
        return t;
    }
    const int x = static_cast<int>(rnd::below(g, static_cast<std::uint64_t>(repeats) + 1));
    PasskeyDoc d = make_passkey_doc(x, repeats - x, t.key);
    t.key_position = d.key_position;
    t.prompt_len = static_cast<std::int64_t>(d.tokens.size());
    if (doc) *doc = std::move(d);
    return t;
}

PasskeyReport passkey_eval(const Generator& generate, std::vector<std::int64_t> context_lens, int iterations,
                           std::uint64_t seed) {
    if (iterations < 1) throw InputError("passkey evaluation needs iterations >= 1");
    PasskeyReport report;
    for (std::int64_t len : sorted_unique(std::move(context_lens))) {
        int successes = 0;
        for (int it = 0; it < iterations; ++it) {
            PasskeyDoc doc;
            PasskeyTrial t = plan_passkey_trial(
                len, rnd::derive(seed, {static_cast<std::uint64_t>(len), static_cast<std::uint64_t>(it)}), &doc);
            if (t.diagnostic.empty()) {
                try {
                    const TokenSeq out = generate(doc.tokens, kPasskeyMaxNew, len);
                    std::string bytes;
                    for (Token tok : out) {
                        if (tok >= 0 && tok < 256) bytes.push_back(static_cast<char>(tok));
                    }
                    t.retrieved = extract_digits(bytes);
                    t.success = t.retrieved == t.key;
                } catch (const std::exception& e) {
                    t.diagnostic = e.what();
                }
            }
            successes += t.success;
            report.trials.push_back(std::move(t));
        }
        report.rows.push_back({len, static_cast<double>(successes) / iterations, iterations});
    }
    return report;
}

void write_ppl_csv(const std::filesystem::path& path, const PplReport& report) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "context_len,perplexity,docs,scored_tokens\n" << std::setprecision(17);
    for (const auto& r : report.rows) {
        out << r.context_len << ',' << r.perplexity << ',' << r.docs << ',' << r.scored_tokens << '\n';
    }
}

void write_passkey_csv(const std::filesystem::path& path, const PasskeyReport& report) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "context_len,accuracy,iterations\n" << std::setprecision(17);
    for (const auto& r : report.rows) out << r.context_len << ',' << r.accuracy << ',' << r.iterations << '\n';
}

namespace {

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path, std::string_view header) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != header) throw DataError("unexpected header in " + path.string());
    std::vector<std::vector<std::string>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::istringstream ls(line);
        std::string f;
        while (std::getline(ls, f, ',')) fields.push_back(f);
        rows.push_back(std::move(fields));
    }
    return rows;
}

}  // namespace

PplReport read_ppl_csv(const std::filesystem::path& path) {
    PplReport report;
    for (const auto& f : read_csv(path, "context_len,perplexity,docs,scored_tokens")) {
        if (f.size() != 4) throw DataError("malformed row in " + path.string());
        report.rows.push_back({std::stoll(f[0]), std::stod(f[1]), std::stoi(f[2]), std::stoll(f[3])});
    }
    return report;
}

PasskeyReport read_passkey_csv(const std::filesystem::path& path) {
    PasskeyReport report;
    for (const auto& f : read_csv(path, "context_len,accuracy,iterations")) {
        if (f.size() != 3) throw DataError("malformed row in " + path.string());
        report.rows.push_back({std::stoll(f[0]), std::stod(f[1]), std::stoi(f[2])});
    }
    return report;
}

std::string format_ppl_table(const PplReport& report) {
    std::ostringstream os;
    os << std::setw(12) << "context_len" << std::setw(14) << "perplexity" << std::setw(7) << "docs" << std::setw(15)
       << "scored_tokens" << '\n';
    for (const auto& r : report.rows) {
        os << std::setw(12) << r.context_len << std::setw(14) << fixed(r.perplexity, 4) << std::setw(7) << r.docs
           << std::setw(15) << r.scored_tokens << '\n';
    }
    return os.str();
}

std::string format_passkey_table(const PasskeyReport& report) {
    std::ostringstream os;
    os << std::setw(12) << "context_len" << std::setw(10) << "accuracy" << std::setw(12) << "iterations" << '\n';
    for (const auto& r : report.rows) {
        os << std::setw(12) << r.context_len << std::setw(10) << fixed(r.accuracy, 2) << std::setw(12) << r.iterations
           << '\n';
    }
    return os.str();
}

}  // namespace ropeforge::eval
