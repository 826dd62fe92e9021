#include "ropeforge/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "ropeforge/bundle.hpp"
#include "ropeforge/checkpoint.hpp"
#include "ropeforge/error.hpp"
#include "ropeforge/eval.hpp"
#include "ropeforge/factor_io.hpp"
#include "ropeforge/pipeline.hpp"
#include "ropeforge/synth.hpp"

namespace ropeforge::cli {

namespace {

namespace fs = std::filesystem;

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string run_dir;
    std::string preset = "desk";
    std::optional<int> threads;
};

pipeline::PipelineConfig resolve_config(const Globals& g) {
    pipeline::PipelineConfig cfg = pipeline::PipelineConfig::preset(g.preset);
    if (!g.config.empty()) {
        std::ifstream in(g.config);
        if (!in) throw IoError("cannot read config file " + g.config);
        std::ostringstream ss;
        ss << in.rdbuf();
        cfg = pipeline::config_from_json(ss.str(), cfg);
    }
    if (const char* env = std::getenv("ROPE_FORGE_RUN_DIR"); env && *env) cfg.run_dir = env;
    if (!g.run_dir.empty()) cfg.run_dir = g.run_dir;
    if (g.seed) cfg.seed = *g.seed;
    if (g.threads) cfg.threads = *g.threads;
    return cfg;
}

void require_artifact(const fs::path& p, const std::string& hint) {
    if (!fs::exists(p)) throw IoError("missing artifact: " + p.string() + " (" + hint + ")");
}

model::ModelCheckpoint load_ckpt(const fs::path& p, const std::string& hint) {
    require_artifact(p, hint);
    return model::load_checkpoint(p);
}

// Factor selection for evaluation commands: a bundle file, a single factor
// file, or original RoPE allowed out to the longest requested length.
pipeline::FactorBundle eval_bundle(const std::string& bundle_path, const std::string& factors_path,
                                   const model::ModelCheckpoint& ckpt, std::int64_t longest) {
    if (!bundle_path.empty()) {
        require_artifact(bundle_path, "bundle file");
        return pipeline::read_bundle(bundle_path);
    }
    if (!factors_path.empty()) {
        require_artifact(factors_path, "factor file");
        const auto f = rope::read_factor_file(factors_path);
        return pipeline::single_factor_bundle(f.rotary, f.factors);
    }
    const auto& rotary = ckpt.config.rotary;
    return pipeline::single_factor_bundle(rotary, rope::identity_factors(rotary, longest));
}

void print_factors(std::ostream& out, const rope::FactorFile& f) {
    const auto& rf = f.factors;
    out << "head_dim " << f.rotary.head_dim << ", base " << f.rotary.base << ", original_len "
        << f.rotary.original_len << "\n";
    out << "target_len " << rf.target_len << " (s = " << rf.extension_ratio << "), start_token " << rf.start_token
        << "\n";
    out << std::setw(6) << "pair" << std::setw(14) << "theta_i" << std::setw(12) << "lambda_i" << "\n";
    for (std::size_t i = 0; i < rf.factors.size(); ++i) {
        out << std::setw(6) << i << std::setw(14) << std::setprecision(6) << f.rotary.frequency(static_cast<int>(i))
            << std::setw(12) << std::setprecision(6) << rf.factors[i] << "\n";
    }
    const auto v = rope::validate_factors(rf, true, f.rotary.pairs());
    out << (v ? "invalid: " + v->message : std::string("valid (bounds and monotone)")) << "\n";
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Rotary position-embedding rescale search and context extension on a small transformer"};
    app.name("ropeforge");
    app.fallthrough();
    app.require_subcommand(1);

    Globals g;
    app.add_option("--config", g.config, "JSON config file overriding the preset");
    app.add_option("--seed", g.seed, "Master seed");
    app.add_option("--run-dir", g.run_dir, "Run directory (default: $ROPE_FORGE_RUN_DIR or the config value)");
    app.add_option("--preset", g.preset, "Configuration preset")->check(CLI::IsMember({"desk", "paper"}));
    app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);

    // make-corpus
    auto* make_corpus = app.add_subcommand("make-corpus", "Write the deterministic sample corpus");
    std::string corpus_out;
    std::size_t corpus_bytes = 0;
    make_corpus->add_option("--out", corpus_out, "Output directory")->required();
    make_corpus->add_option("--bytes", corpus_bytes, "Total bytes (default from config)");

    // train-base
    auto* train_base = app.add_subcommand("train-base", "Train the base model into <run-dir>/base.ckpt");
    std::string train_corpus;
    std::optional<int> train_steps;
    train_base->add_option("--corpus", train_corpus, "Directory of text files (default: sample corpus)");
    train_base->add_option("--steps", train_steps, "Training steps")->check(CLI::PositiveNumber);

    // search
    auto* search_cmd = app.add_subcommand("search", "Search rescale factors for one target length");
    std::int64_t search_len = 0;
    std::string search_ckpt, search_out, search_corpus;
    std::optional<int> search_iters, search_docs;
    search_cmd->add_option("--target-len", search_len, "Target context length")->required();
    search_cmd->add_option("--ckpt", search_ckpt, "Checkpoint (default: <run-dir>/base.ckpt)");
    search_cmd->add_option("--out", search_out, "Factor file (default: <run-dir>/search_<len>.factors.json)");
    search_cmd->add_option("--corpus", search_corpus, "Directory of text files (default: sample corpus)");
    search_cmd->add_option("--iterations", search_iters, "Search iterations")->check(CLI::PositiveNumber);
    search_cmd->add_option("--docs", search_docs, "Validation documents for fitness")->check(CLI::PositiveNumber);

    // finetune
    auto* finetune = app.add_subcommand("finetune", "Two-stage progressive fine-tune");
    std::string ft_ckpt, ft_rf1, ft_rf2, ft_out, ft_corpus;
    std::optional<int> ft_steps1, ft_steps2;
    finetune->add_option("--ckpt", ft_ckpt, "Base checkpoint (default: <run-dir>/base.ckpt)");
    finetune->add_option("--rf1", ft_rf1, "Stage-1 factors (default: <run-dir>/stage1_mid.factors.json)");
    finetune->add_option("--rf2", ft_rf2, "Stage-2 factors (default: <run-dir>/stage1_full.factors.json)");
    finetune->add_option("--steps1", ft_steps1, "Stage-1 steps")->check(CLI::PositiveNumber);
    finetune->add_option("--steps2", ft_steps2, "Stage-2 steps")->check(CLI::PositiveNumber);
    finetune->add_option("--out", ft_out, "Output checkpoint (default: <run-dir>/ft.ckpt)");
    finetune->add_option("--corpus", ft_corpus, "Directory of text files (default: sample corpus)");

    // eval-ppl
    auto* eval_ppl = app.add_subcommand("eval-ppl", "Sliding-window perplexity at several lengths");
    std::string ep_ckpt, ep_factors, ep_bundle, ep_csv, ep_corpus;
    std::vector<std::int64_t> ep_lens;
    int ep_docs = 3;
    std::optional<std::int64_t> ep_stride;
    eval_ppl->add_option("--ckpt", ep_ckpt, "Checkpoint")->required();
    eval_ppl->add_option("--lens", ep_lens, "Context lengths")->required()->delimiter(',');
    eval_ppl->add_option("--factors", ep_factors, "Factor file used at every length");
    eval_ppl->add_option("--bundle", ep_bundle, "Factor bundle");
    eval_ppl->add_option("--docs", ep_docs, "Test documents per length")->check(CLI::PositiveNumber);
    eval_ppl->add_option("--stride", ep_stride, "Window stride (default: length / 16)")->check(CLI::PositiveNumber);
    eval_ppl->add_option("--csv", ep_csv, "Write the report as CSV");
    eval_ppl->add_option("--corpus", ep_corpus, "Directory of text files (default: sample corpus)");

    // eval-passkey
    auto* eval_pk = app.add_subcommand("eval-passkey", "Passkey retrieval accuracy at several lengths");
    std::string pk_ckpt, pk_factors, pk_bundle, pk_csv;
    std::vector<std::int64_t> pk_lens;
    int pk_iters = 10;
    eval_pk->add_option("--ckpt", pk_ckpt, "Checkpoint")->required();
    eval_pk->add_option("--lens", pk_lens, "Context lengths")->required()->delimiter(',');
    eval_pk->add_option("--factors", pk_factors, "Factor file used at every length");
    eval_pk->add_option("--bundle", pk_bundle, "Factor bundle");
    eval_pk->add_option("--iterations", pk_iters, "Trials per length")->check(CLI::PositiveNumber);
    eval_pk->add_option("--csv", pk_csv, "Write the report as CSV");

    // pipeline
    auto* pipe = app.add_subcommand("pipeline", "Run every stage of the progressive extension");
    bool print_config = false;
    pipe->add_flag("--print-config", print_config, "Print the resolved configuration and exit");

    // factors
    auto* factors = app.add_subcommand("factors", "Inspect or generate factor files");
    factors->require_subcommand(1);
    auto* show = factors->add_subcommand("show", "Print a factor file and its validation status");
    std::string show_path;
    show->add_option("file", show_path, "Factor file")->required();
    auto* gen = factors->add_subcommand("gen", "Write PI, NTK or YaRN factors");
    std::string gen_method = "pi";
    double gen_ratio = 1.0;
    int gen_head_dim = 0, gen_original_len = 0;
    double gen_base = 0.0;
    std::string gen_out;
    gen->add_option("--method", gen_method, "Generator")->check(CLI::IsMember({"pi", "ntk", "yarn", "all"}));
    gen->add_option("--ratio", gen_ratio, "Extension ratio s >= 1")->required();
    gen->add_option("--head-dim", gen_head_dim, "Head dimension (default from config)");
    gen->add_option("--base", gen_base, "Rotary base (default from config)");
    gen->add_option("--original-len", gen_original_len, "Original context length (default from config)");
    gen->add_option("--out", gen_out, "Output file, or directory for --method all (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    auto log = [&err](const std::string& s) { err << s << std::endl; };

    try {
        pipeline::PipelineConfig cfg = resolve_config(g);
        const pipeline::RunLayout layout{cfg.run_dir};
        auto corpus_for = [&](const std::string& dir) {
            pipeline::PipelineConfig c = cfg;
            if (!dir.empty()) c.corpus_dir = dir;
            return pipeline::load_corpus(c, log);
        };

        if (*make_corpus) {
            corpus::SynthOptions opts = cfg.synth;
            if (corpus_bytes) opts.total_bytes = corpus_bytes;
            const auto paths = corpus::write_synth_corpus(corpus_out, opts);
            out << "wrote " << paths.size() << " documents to " << corpus_out << "\n";
        } else if (*train_base) {
            cfg.validate();
            const auto corpus = corpus_for(train_corpus);
            model::TrainConfig tc = cfg.base_train;
            if (train_steps) tc.steps = *train_steps;
            tc.seed = cfg.seed;
            tc.threads = cfg.threads;
            auto res = model::train(model::init_model(cfg.model, cfg.seed), corpus, tc, nullptr,
                                    [&](const model::TrainLogRow& r) {
                                        if (r.step % 100 == 0) {
                                            log("step " + std::to_string(r.step) + " loss " + std::to_string(r.loss));
                                        }
                                    });
            fs::create_directories(layout.reports());
            model::save_checkpoint(layout.base_ckpt(), res.checkpoint);
            model::write_train_log(layout.reports() / "base_train.csv", res.log);
            out << "wrote " << layout.base_ckpt().string() << " (final loss " << res.log.back().loss << ")\n";
        } else if (*search_cmd) {
            const fs::path ckpt_path = search_ckpt.empty() ? layout.base_ckpt() : fs::path(search_ckpt);
            const auto ckpt = load_ckpt(ckpt_path, "run train-base first");
            const auto corpus = corpus_for(search_corpus);
            search::SearchConfig sc = cfg.search;
            if (search_iters) sc.max_iterations = *search_iters;
            sc.seed = cfg.seed;
            sc.threads = cfg.threads;
            const auto run = pipeline::search_factors(ckpt, corpus, search_len, sc,
                                                      search_docs.value_or(cfg.search_docs), {}, log);
            const std::string name = "search_" + std::to_string(search_len);
            const fs::path out_path = search_out.empty() ? layout.dir / (name + ".factors.json") : fs::path(search_out);
            if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
            pipeline::save_search(layout, name, out_path, run);
            out << "best perplexity " << *run.result.best.fitness << " after " << run.result.evaluations
                << " evaluations; wrote " << out_path.string() << "\n";
        } else if (*finetune) {
            const auto base = load_ckpt(ft_ckpt.empty() ? layout.base_ckpt() : fs::path(ft_ckpt),
                                        "run train-base first");
            const fs::path p1 = ft_rf1.empty() ? layout.stage1_mid() : fs::path(ft_rf1);
            const fs::path p2 = ft_rf2.empty() ? layout.stage1_full() : fs::path(ft_rf2);
            require_artifact(p1, "stage-1 factor file");
            require_artifact(p2, "stage-2 factor file");
            const auto corpus = corpus_for(ft_corpus);
            model::TrainConfig tc = cfg.finetune;
            tc.seed = cfg.seed;
            tc.threads = cfg.threads;
            auto res = model::finetune_progressive(
                base, rope::read_factor_file(p1).factors, ft_steps1.value_or(cfg.finetune_steps_mid),
                rope::read_factor_file(p2).factors, ft_steps2.value_or(cfg.finetune_steps_full), corpus, tc,
                [&](const model::TrainLogRow& r) {
                    log("step " + std::to_string(r.step) + " loss " + std::to_string(r.loss));
                });
            const fs::path out_path = ft_out.empty() ? layout.ft_ckpt() : fs::path(ft_out);
            if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
            model::save_checkpoint(out_path, res.checkpoint);
            out << "wrote " << out_path.string() << "\n";
        } else if (*eval_ppl) {
            const auto ckpt = load_ckpt(ep_ckpt, "checkpoint");
            std::int64_t longest = 0;
            for (auto l : ep_lens) longest = std::max(longest, l);
            const auto bundle = eval_bundle(ep_bundle, ep_factors, ckpt, longest);
            const auto corpus = corpus_for(ep_corpus);
            eval::SweepOptions opts;
            opts.stride = ep_stride;
            opts.threads = cfg.threads;
            const auto report = eval::ppl_sweep(ckpt, corpus, ep_lens, bundle, ep_docs, cfg.seed, opts);
            out << eval::format_ppl_table(report);
            if (!ep_csv.empty()) eval::write_ppl_csv(ep_csv, report);
        } else if (*eval_pk) {
            const auto ckpt = load_ckpt(pk_ckpt, "checkpoint");
            std::int64_t longest = 0;
            for (auto l : pk_lens) longest = std::max(longest, l);
            const auto bundle = eval_bundle(pk_bundle, pk_factors, ckpt, longest);
            const auto report = eval::passkey_eval(eval::model_generator(ckpt, bundle), pk_lens, pk_iters, cfg.seed);
            out << eval::format_passkey_table(report);
            for (const auto& t : report.trials) {
                if (!t.diagnostic.empty()) err << "trial at " << t.context_len << ": " << t.diagnostic << "\n";
            }
            if (!pk_csv.empty()) eval::write_passkey_csv(pk_csv, report);
        } else if (*pipe) {
            if (print_config) {
                out << pipeline::config_to_json(cfg);
                return 0;
            }
            const auto summary = pipeline::run_progressive(cfg, log);
            out << "run directory: " << cfg.run_dir.string() << "\n"
                << "bundle entries: " << summary.bundle.size() << "\n"
                << eval::format_ppl_table(summary.bundle_ppl);
        } else if (*show) {
            print_factors(out, rope::read_factor_file(show_path));
        } else if (*gen) {
            rope::RotaryConfig rotary = cfg.model.rotary;
            if (gen_head_dim) rotary.head_dim = gen_head_dim;
            if (gen_base > 0.0) rotary.base = gen_base;
            if (gen_original_len) rotary.original_len = gen_original_len;
            rotary.validate();
            const std::pair<std::string, rope::RescaleFactors (*)(const rope::RotaryConfig&, double)> methods[] = {
                {"pi", &rope::pi_factors},
                {"ntk", &rope::ntk_factors},
                {"yarn", [](const rope::RotaryConfig& c, double s) { return rope::yarn_factors(c, s); }},
            };
            if (gen_method == "all") {
                if (gen_out.empty()) throw InputError("--method all needs --out <directory>");
                fs::create_directories(gen_out);
            }
            for (const auto& [name, fn] : methods) {
                if (gen_method != "all" && gen_method != name) continue;
                const rope::FactorFile file{rotary, fn(rotary, gen_ratio)};
                if (gen_method == "all") {
                    const fs::path p = fs::path(gen_out) / (name + ".factors.json");
                    rope::write_factor_file(p, file);
                    out << "wrote " << p.string() << "\n";
                } else if (gen_out.empty()) {
                    out << rope::to_json_string(file);
                } else {
                    rope::write_factor_file(gen_out, file);
                    out << "wrote " << gen_out << "\n";
                }
            }
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

}  // namespace ropeforge::cli
