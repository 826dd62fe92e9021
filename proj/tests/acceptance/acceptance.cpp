#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "../support/passkey_mocks.hpp"
#include "../support/planted.hpp"
#include "../support/temp_dir.hpp"
#include "ropeforge/checkpoint.hpp"
#include "ropeforge/cli.hpp"
#include "ropeforge/factor_io.hpp"
#include "ropeforge/pipeline.hpp"

namespace {

namespace fs = std::filesystem;
using namespace ropeforge;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(double x, int precision = 4) {
    std::ostringstream os;
    os << std::setprecision(precision) << x;
    return os.str();
}

void note(const std::string& s) { std::cerr << "  " << s << std::endl; }

// --- 1 -----------------------------------------------------------------------

Verdict rope_suite() {
    const auto t0 = Clock::now();
    std::mt19937_64 g(2024);
    const int dims[] = {4, 8, 32, 64};
    int failures = 0;
    double worst_norm = 0.0, worst_base = 0.0;
    for (int c = 0; c < 1000; ++c) {
        const int d = dims[c % 4];
        const double base = std::uniform_real_distribution<double>(100.0, 1e6)(g);
        const int L = 1 << std::uniform_int_distribution<int>(4, 12)(g);
        const rope::RotaryConfig cfg{d, base, L};
        const double s = std::uniform_real_distribution<double>(1.0, 64.0)(g);
        const std::int64_t n = std::uniform_int_distribution<std::int64_t>(0, 64LL * L)(g);

        // Identity factors reproduce plain RoPE bit for bit.
        const auto id = rope::identity_factors(cfg, 64LL * L + 1);
        if (rope::rescaled_angles(cfg, id, n) != rope::rope_angles(cfg, n)) ++failures;

        // Threshold branch: below the start token the original angles are used verbatim.
        auto rf = rope::yarn_factors(cfg, s);
        rf.start_token = std::uniform_int_distribution<std::int64_t>(0, 256)(g);
        rf.target_len = 64LL * L + 1;
        const auto ang = rope::rescaled_angles(cfg, rf, n);
        const auto plain = rope::rope_angles(cfg, n);
        for (int i = 0; i < cfg.pairs(); ++i) {
            const double want = n < rf.start_token ? plain[static_cast<std::size_t>(i)]
                                                   : static_cast<double>(n) * cfg.frequency(i) / rf.factors[static_cast<std::size_t>(i)];
            if (ang[static_cast<std::size_t>(i)] != want) ++failures;
        }

        // Per-pair norms survive rotation.
        std::vector<double> v(static_cast<std::size_t>(d));
        for (auto& x : v) x = std::normal_distribution<double>(0.0, 3.0)(g);
        const auto out = rope::apply_rope(cfg, &rf, v, n);
        for (int i = 0; i < cfg.pairs(); ++i) {
            const double a = std::hypot(v[2 * i], v[2 * i + 1]);
            const double b = std::hypot(out[2 * i], out[2 * i + 1]);
            worst_norm = std::max(worst_norm, std::abs(a - b));
        }

        // NTK factors equal a change of base to base * s^(d / (d - 2)).
        const auto ntk = rope::ntk_factors(cfg, s);
        const rope::RotaryConfig changed{d, base * std::pow(s, static_cast<double>(d) / (d - 2)), L};
        for (int i = 0; i < cfg.pairs(); ++i) {
            const double a = cfg.frequency(i) / ntk.factors[static_cast<std::size_t>(i)];
            const double b = changed.frequency(i);
            worst_base = std::max(worst_base, std::abs(a - b) / std::abs(b));
        }
    }
    const double secs = seconds_since(t0);
    const bool pass = failures == 0 && worst_norm <= 1e-9 && worst_base <= 1e-12 && secs < 10.0;
    return {pass, "1000 cases, exact mismatches " + std::to_string(failures) + ", max norm drift " + fmt(worst_norm) +
                      ", max base-change rel err " + fmt(worst_base) + ", " + fmt(secs, 3) + " s"};
}

// --- 2 -----------------------------------------------------------------------

Verdict generators() {
    int bad = 0;
    for (int d : {4, 8, 32, 64}) {
        for (double s : {1.0, 2.0, 4.0, 8.0, 16.0, 128.0}) {
            const rope::RotaryConfig cfg{d, 10000.0, 4096};
            const auto pi = rope::pi_factors(cfg, s);
            for (double f : pi.factors) bad += f != s;
            const auto ntk = rope::ntk_factors(cfg, s);
            bad += ntk.factors.front() != 1.0;
            bad += ntk.factors.back() != s;
            for (std::size_t i = 1; i < ntk.factors.size(); ++i) bad += !(ntk.factors[i] >= ntk.factors[i - 1]);
            if (s > 1.0) {
                for (std::size_t i = 1; i + 1 < ntk.factors.size(); ++i) {
                    bad += !(ntk.factors[i] > ntk.factors[i - 1]);
                }
            }
            // Each pair falls in the branch its wavelength ratio selects.
            const auto yarn = rope::yarn_factors(cfg, s);
            for (int i = 0; i < cfg.pairs(); ++i) {
                const double ratio = cfg.original_len / (2.0 * 3.14159265358979323846 / cfg.frequency(i));
                const double f = yarn.factors[static_cast<std::size_t>(i)];
                if (ratio >= 32.0) bad += f != 1.0;
                else if (ratio <= 1.0) bad += f != s;
                else bad += !(f >= 1.0 && f <= s);
            }
            bad += yarn.factors.front() != 1.0;
            for (const auto* rf : {&pi, &ntk, &yarn}) bad += rope::validate_factors(*rf, true, cfg.pairs()).has_value();
        }
    }
    // gamma = 0.5 at s = 4: one pair (d = 2) whose ratio L / (2 pi) sits on the ramp midpoint.
    const rope::RotaryConfig one{2, 10000.0, 128};
    const double r = one.original_len / (2.0 * 3.14159265358979323846);
    const double half = rope::yarn_factors(one, 4.0, r - 8.0, r + 8.0).factors[0];
    const bool half_ok = std::abs(half - 1.6) <= 1e-12;
    return {bad == 0 && half_ok, "mismatches " + std::to_string(bad) + ", YaRN gamma=0.5 value " + fmt(half, 17)};
}

// --- 3 -----------------------------------------------------------------------

Verdict gradient_check() {
    const auto t0 = Clock::now();
    const auto cfg = model::ModelConfig::desk();
    const auto params = model::init_model(cfg, 77).params.cast<double>();
    std::mt19937_64 g(78);
    TokenSeq toks(48);
    for (auto& t : toks) t = static_cast<Token>(g() % 256);
    const auto rf = rope::RescaleFactors::make(rope::yarn_factors(cfg.rotary, 2.0).factors, 16, 256, cfg.trained_len);
    const auto analytic = model::loss_and_grads(cfg, params, toks, &rf);
    const double h = 1e-4;
    const int samples = 24;
    double worst = 0.0;
    for (int s = 0; s < samples; ++s) {
        const auto ti = g() % params.tensors.size();
        const auto ei = g() % params.tensors[ti].data.size();
        auto plus = params;
        auto minus = params;
        plus.tensors[ti].data[ei] += h;
        minus.tensors[ti].data[ei] -= h;
        const double fd =
            (model::sequence_loss(cfg, plus, toks, &rf) - model::sequence_loss(cfg, minus, toks, &rf)) / (2 * h);
        const double an = analytic.grads.tensors[ti].data[ei];
        const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
        if (rel > worst) note("grad " + params.tensors[ti].name + "[" + std::to_string(ei) + "] analytic " + fmt(an, 8) +
                              " fd " + fmt(fd, 8) + " rel " + fmt(rel));
        worst = std::max(worst, rel);
    }
    const double secs = seconds_since(t0);
    return {worst < 1e-3 && secs < 60.0, std::to_string(samples) + " parameters of the desk model, max rel err " +
                                             fmt(worst) + ", " + fmt(secs, 3) + " s"};
}

// --- 4 -----------------------------------------------------------------------

Verdict planted_search() {
    const auto t0 = Clock::now();
    int recovered = 0;
    bool monotone = true;
    std::int64_t evaluated = 0, inadmissible = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        auto sc = search::SearchConfig::desk();
        sc.max_iterations = 40;
        sc.seed = seed;
        const auto out = testing::run_planted({8, 10000.0, 128}, 2.0, sc);
        monotone = monotone && out.history_monotone;
        evaluated += out.evaluated;
        inadmissible += out.inadmissible;
        recovered += out.worst_steps <= 2.0 + 1e-9;
    }
    const double secs = seconds_since(t0);
    const bool pass = monotone && inadmissible == 0 && recovered >= 9 && secs < 120.0;
    return {pass, "recovered " + std::to_string(recovered) + "/10 seeds, history monotone " +
                      (monotone ? "yes" : "no") + ", inadmissible " + std::to_string(inadmissible) + "/" +
                      std::to_string(evaluated) + ", " + fmt(secs, 3) + " s"};
}

// --- 6 -----------------------------------------------------------------------

double brute_force_nll(const model::ModelCheckpoint& ckpt, const TokenSeq& doc, std::int64_t L, std::int64_t stride) {
    const auto n = static_cast<std::int64_t>(doc.size());
    std::vector<std::int64_t> starts;
    for (std::int64_t b = 0; b + L <= n; b += stride) starts.push_back(b);
    if (starts.back() + L < n) starts.push_back(n - L);
    double total = 0.0;
    for (std::int64_t t = 1; t < n; ++t) {
        const auto b = *std::find_if(starts.begin(), starts.end(), [&](std::int64_t s) { return s < t && t < s + L; });
        const auto logits =
            model::forward(ckpt, std::span(doc).subspan(static_cast<std::size_t>(b), static_cast<std::size_t>(L)));
        const auto row = logits.row(static_cast<int>(t - b - 1));
        long double sum = 0;
        for (float v : row) sum += std::exp(static_cast<long double>(v));
        total += static_cast<double>(std::log(sum) - row[static_cast<std::size_t>(doc[static_cast<std::size_t>(t)])]);
    }
    return total;
}

Verdict sliding_window() {
    const auto t0 = Clock::now();
    const auto ckpt = model::init_model(model::ModelConfig::desk(), 5);
    std::mt19937_64 g(6);
    double worst = 0.0;
    int count_bad = 0;
    for (int k = 0; k < 10; ++k) {
        TokenSeq doc(16);
        for (auto& t : doc) t = static_cast<Token>(g() % 256);
        const auto got = eval::sliding_window_nll(ckpt, doc, 8, nullptr, 2);
        count_bad += got.scored_tokens != 15;
        worst = std::max(worst, std::abs(got.total_nll - brute_force_nll(ckpt, doc, 8, 2)));
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-9 && count_bad == 0 && secs < 5.0,
            "10 documents, max |NLL diff| " + fmt(worst) + ", " + fmt(secs, 3) + " s"};
}

// --- 10 ----------------------------------------------------------------------

Verdict passkey_harness() {
    const auto t0 = Clock::now();
    const std::vector<std::int64_t> lens{512, 2048, 16384};
    const auto echo = eval::passkey_eval(testing::echo_generator(), lens, 20, 7);
    const auto letters = eval::passkey_eval(testing::letters_generator(), lens, 20, 7);
    bool ok = true;
    for (const auto& r : echo.rows) ok = ok && r.accuracy == 1.0;
    for (const auto& r : letters.rows) ok = ok && r.accuracy == 0.0;
    const auto bins = testing::placement_deciles(4096, 1000, 99);
    const int smallest = *std::min_element(bins.begin(), bins.end());
    const double secs = seconds_since(t0);
    return {ok && smallest >= 50 && secs < 30.0, std::string("echo 1.0 / non-digit 0.0 ") + (ok ? "ok" : "violated") +
                                                     ", smallest decile " + std::to_string(smallest) +
                                                     "/1000, " + fmt(secs, 3) + " s"};
}

// --- pipeline ------------------------------------------------------------------

// Forwards text to stderr and timestamps each stage marker line.
class StageClock : public std::stringbuf {
public:
    std::map<std::string, double> started;
    std::vector<std::string> order;
    Clock::time_point t0 = Clock::now();

protected:
    int sync() override {
        std::string text = str();
        str("");
        std::istringstream lines(text);
        std::string line;
        while (std::getline(lines, line)) {
            std::cerr << line << std::endl;
            if (line.size() > 2 && line[0] == '[' && line.find("] running") != std::string::npos) {
                const std::string name = line.substr(1, line.find(']') - 1);
                started[name] = seconds_since(t0);
                order.push_back(name);
            }
        }
        return 0;
    }
};

struct PipelineRun {
    int exit_code = -1;
    double seconds = 0.0;
    std::map<std::string, double> stage_seconds;
};

PipelineRun run_pipeline(const fs::path& run_dir) {
    StageClock clock;
    std::ostream err(&clock);
    std::ostringstream out;
    const std::string dir = run_dir.string();
    const char* argv[] = {"ropeforge", "--preset", "desk", "--run-dir", dir.c_str(), "pipeline"};
    PipelineRun run;
    run.exit_code = cli::run(6, argv, out, err);
    err.flush();
    run.seconds = seconds_since(clock.t0);
    std::cerr << out.str();
    for (std::size_t i = 0; i < clock.order.size(); ++i) {
        const double end = i + 1 < clock.order.size() ? clock.started[clock.order[i + 1]] : run.seconds;
        run.stage_seconds[clock.order[i]] = end - clock.started[clock.order[i]];
    }
    return run;
}

void save_timings(const fs::path& p, const PipelineRun& run) {
    std::ofstream o(p);
    o << std::setprecision(17) << "total " << run.seconds << "\n";
    for (const auto& [k, v] : run.stage_seconds) o << k << " " << v << "\n";
}

PipelineRun load_timings(const fs::path& p) {
    PipelineRun run;
    run.exit_code = 0;
    std::ifstream in(p);
    std::string k;
    double v;
    while (in >> k >> v) {
        if (k == "total") run.seconds = v;
        else run.stage_seconds[k] = v;
    }
    return run;
}

const eval::PplRow* row_at(const eval::PplReport& r, std::int64_t len) {
    for (const auto& row : r.rows) {
        if (row.context_len == len) return &row;
    }
    return nullptr;
}

Verdict pipeline_verdict(const PipelineRun& run, const pipeline::PipelineConfig& cfg) {
    const pipeline::RunLayout layout{cfg.run_dir};
    if (run.exit_code != 0) return {false, "pipeline exited with " + std::to_string(run.exit_code)};
    const auto bundle = pipeline::read_bundle(layout.bundle());
    const auto base = eval::read_ppl_csv(layout.reports() / "ppl_base.csv");
    const auto ext = eval::read_ppl_csv(layout.reports() / "ppl_bundle.csv");
    const std::int64_t L = cfg.model.trained_len, full = cfg.targets.final_len;
    const auto *b_full = row_at(base, full), *b_L = row_at(base, L), *e_full = row_at(ext, full);
    if (!b_full || !b_L || !e_full) return {false, "perplexity reports lack length " + std::to_string(full)};
    const double blowup = b_full->perplexity / b_L->perplexity;
    const bool pass = bundle.size() >= 3 && std::isfinite(e_full->perplexity) && blowup >= 5.0 && run.seconds < 3 * 3600.0;
    return {pass, "bundle entries " + std::to_string(bundle.size()) + ", extended ppl@" + std::to_string(full) + " " +
                      fmt(e_full->perplexity) + ", base ppl@" + std::to_string(full) + " / ppl@" + std::to_string(L) +
                      " = " + fmt(b_full->perplexity) + " / " + fmt(b_L->perplexity) + " = " + fmt(blowup) + "x, " +
                      fmt(run.seconds / 60.0, 4) + " min"};
}

Verdict recovery_verdict(const pipeline::PipelineConfig& cfg) {
    const pipeline::RunLayout layout{cfg.run_dir};
    std::ifstream in(layout.reports() / "recovery.csv");
    std::string line;
    std::getline(in, line);
    std::string detail;
    bool found = false, pass = false;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string a, b, c;
        std::getline(ls, a, ',');
        std::getline(ls, b, ',');
        std::getline(ls, c, ',');
        const double rec = std::stod(b), fin = std::stod(c);
        detail += "L=" + a + ": recovery " + fmt(rec) + " vs full-target " + fmt(fin) + "; ";
        if (std::stoll(a) == cfg.model.trained_len) {
            found = true;
            pass = rec <= fin;
        }
    }
    if (!found) return {false, "no recovery row at the trained length"};
    return {pass, detail};
}

Verdict best_vs_seeds(const fs::path& logs) {
    int runs = 0, bad = 0;
    std::string worst;
    for (const auto& e : fs::directory_iterator(logs)) {
        if (e.path().extension() != ".csv") continue;
        fs::path side = e.path();
        side.replace_extension(".json");
        const auto history = search::read_history(e.path());
        const auto sidecar = search::read_sidecar(side);
        double seed_min = std::numeric_limits<double>::infinity();
        for (const auto& [name, ppl] : sidecar.seed_ppl) seed_min = std::min(seed_min, ppl);
        const double best = history.back().best_ppl;
        ++runs;
        if (!(best <= seed_min) || !(sidecar.best_ppl <= seed_min) || best != sidecar.best_ppl) {
            ++bad;
            worst += e.path().stem().string() + " ";
        }
        note(e.path().stem().string() + ": best " + fmt(best, 6) + ", best seed " + fmt(seed_min, 6));
    }
    return {runs > 0 && bad == 0, std::to_string(runs) + " search runs checked, violations " + std::to_string(bad) +
                                      (bad ? " (" + worst + ")" : "")};
}

Verdict finding_one(const pipeline::PipelineConfig& cfg, const PipelineRun& run) {
    const auto t0 = Clock::now();
    const pipeline::RunLayout layout{cfg.run_dir};
    const auto base = model::load_checkpoint(layout.base_ckpt());
    const auto corpus = pipeline::load_corpus(cfg);
    const auto bytes = corpus.total_tokens();
    const rope::RotaryConfig& rot = cfg.model.rotary;
    std::string detail = "corpus " + fmt(static_cast<double>(bytes) / 1e6, 3) + " MB; ";
    bool pass = bytes >= 5'000'000;
    for (std::int64_t len : {2 * rot.original_len, 4 * rot.original_len}) {
        auto sc = cfg.search;
        sc.seed = 700 + static_cast<std::uint64_t>(len);
        sc.threads = cfg.threads;
        const auto found = pipeline::search_factors(base, corpus, len, sc, cfg.search_docs, {}, note);
        const std::string name = "finding1_" + std::to_string(len);
        pipeline::save_search(layout, name, layout.dir / (name + ".factors.json"), found);
        const auto pi = rope::pi_factors(rot, static_cast<double>(len) / rot.original_len);
        // Every held-out document long enough, scored end to end in disjoint windows.
        int docs = 0;
        for (const auto* d : corpus.in_split(corpus::Split::test)) docs += static_cast<std::int64_t>(d->tokens.size()) >= len;
        eval::SweepOptions opts;
        opts.threads = cfg.threads;
        opts.truncate_docs = false;
        opts.stride = len;
        auto ppl = [&](const rope::RescaleFactors& rf) {
            return eval::ppl_sweep(base, corpus, {len}, pipeline::single_factor_bundle(rot, rf), docs, 901, opts).rows[0];
        };
        const auto searched = ppl(found.result.best.genome);
        const auto linear = ppl(pi);
        pass = pass && searched.perplexity <= linear.perplexity;
        detail += std::to_string(len) + ": searched " + fmt(searched.perplexity) + " vs PI " + fmt(linear.perplexity) +
                  " (margin " + fmt(100.0 * (linear.perplexity - searched.perplexity) / linear.perplexity, 3) + "%, " +
                  std::to_string(docs) + " docs, " + std::to_string(searched.scored_tokens) + " tokens); ";
    }
    const double base_secs = run.stage_seconds.count("base") ? run.stage_seconds.at("base") : NAN;
    const double secs = base_secs + seconds_since(t0);
    pass = pass && secs < 3600.0;
    detail += "train + searches " + fmt(secs / 60.0, 4) + " min";
    return {pass, detail};
}

Verdict round_trips(const pipeline::PipelineConfig& cfg) {
    const pipeline::RunLayout layout{cfg.run_dir};
    testing::TempDir tmp;
    int bad = 0;
    auto same = [&](const fs::path& a, const fs::path& b) { bad += testing::slurp(a) != testing::slurp(b); };

    rope::write_factor_file(tmp / "a.json", rope::read_factor_file(layout.stage2()));
    rope::write_factor_file(tmp / "b.json", rope::read_factor_file(tmp / "a.json"));
    same(tmp / "a.json", tmp / "b.json");
    same(layout.stage2(), tmp / "a.json");

    model::save_checkpoint(tmp / "a.ckpt", model::load_checkpoint(layout.ft_ckpt()));
    model::save_checkpoint(tmp / "b.ckpt", model::load_checkpoint(tmp / "a.ckpt"));
    same(tmp / "a.ckpt", tmp / "b.ckpt");
    same(layout.ft_ckpt(), tmp / "a.ckpt");

    corpus::write_cache(tmp / "a.tkc", pipeline::load_corpus(cfg));
    testing::spit(tmp / "b.tkc", corpus::encode_cache(corpus::read_cache(tmp / "a.tkc")));
    same(tmp / "a.tkc", tmp / "b.tkc");
    return {bad == 0, "factor JSON, checkpoint and token cache; mismatching pairs " + std::to_string(bad)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::string run_dir = "acceptance_run";
    bool reuse = false;
    app.add_option("--run-dir", run_dir, "Pipeline run directory (wiped unless --reuse)");
    app.add_flag("--reuse", reuse, "Reuse a completed run and its recorded timings");
    CLI11_PARSE(app, argc, argv);

    std::map<int, std::pair<std::string, Verdict>> results;
    auto check = [&](int id, const std::string& name, const std::function<Verdict()>& fn) {
        std::cerr << "criterion " << id << ": " << name << std::endl;
        Verdict v;
        try {
            v = fn();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        std::cerr << (v.pass ? "  PASS " : "  FAIL ") << v.detail << std::endl;
        results[id] = {name, v};
    };

    check(1, "rope identity and equivalence suite", rope_suite);
    check(2, "baseline generators", generators);
    check(3, "gradient check", gradient_check);
    check(4, "planted-optimum search", planted_search);
    check(6, "sliding-window oracle", sliding_window);
    check(10, "passkey harness", passkey_harness);

    pipeline::PipelineConfig cfg = pipeline::PipelineConfig::desk();
    cfg.run_dir = run_dir;
    const fs::path timings = fs::path(run_dir) / "acceptance_timings.txt";
    PipelineRun run;
    if (reuse && fs::exists(timings)) {
        run = load_timings(timings);
    } else {
        fs::remove_all(run_dir);
        run = run_pipeline(run_dir);
        if (run.exit_code == 0) save_timings(timings, run);
    }

    check(8, "desk pipeline", [&] { return pipeline_verdict(run, cfg); });
    check(9, "recovery", [&] { return recovery_verdict(cfg); });
    check(7, "searched factors vs PI without fine-tuning", [&] { return finding_one(cfg, run); });
    check(5, "best vs seeds", [&] { return best_vs_seeds(pipeline::RunLayout{cfg.run_dir}.search_logs()); });
    check(11, "serialization round trips", [&] { return round_trips(cfg); });

    int failed = 0;
    for (const auto& [id, r] : results) {
        std::cout << (r.second.pass ? "PASS" : "FAIL") << " [" << std::setw(2) << id << "] " << r.first << ": "
                  << r.second.detail << "\n";
        failed += !r.second.pass;
    }
    std::cout << (failed ? "acceptance: " + std::to_string(failed) + " criteria failed" : "acceptance: all passed")
              << std::endl;
    return failed ? 1 : 0;
}
