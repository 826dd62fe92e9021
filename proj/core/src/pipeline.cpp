#include "ropeforge/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "byte_io.hpp"
#include "random.hpp"
#include "ropeforge/checkpoint.hpp"
#include "ropeforge/error.hpp"
#include "ropeforge/factor_io.hpp"
#include "ropeforge/hashing.hpp"
#include "ropeforge/parallel.hpp"

namespace ropeforge::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// --- config <-> JSON --------------------------------------------------------

json model_json(const model::ModelConfig& m) {
    return {{"n_layers", m.n_layers},     {"d_model", m.d_model},       {"n_heads", m.n_heads},
            {"head_dim", m.head_dim},     {"vocab_size", m.vocab_size}, {"trained_len", m.trained_len},
            {"ffn_mult", m.ffn_mult},     {"tied_embeddings", m.tied_embeddings},
            {"rope_base", m.rotary.base}};
}

model::ModelConfig model_from(const json& j) {
    model::ModelConfig m;
    m.n_layers = j.at("n_layers").get<int>();
    m.d_model = j.at("d_model").get<int>();
    m.n_heads = j.at("n_heads").get<int>();
    m.head_dim = j.at("head_dim").get<int>();
    m.vocab_size = j.at("vocab_size").get<int>();
    m.trained_len = j.at("trained_len").get<int>();
    m.ffn_mult = j.at("ffn_mult").get<int>();
    m.tied_embeddings = j.at("tied_embeddings").get<bool>();
    m.rotary = {m.head_dim, j.at("rope_base").get<double>(), m.trained_len};
    return m;
}

const char* schedule_name(model::LrSchedule s) {
    return s == model::LrSchedule::constant ? "constant" : "linear_decay";
}

model::LrSchedule schedule_from(const std::string& s) {
    if (s == "constant") return model::LrSchedule::constant;
    if (s == "linear_decay") return model::LrSchedule::linear_decay;
    throw ConfigError("unknown lr_schedule '" + s + "' (constant | linear_decay)");
}

json train_json(const model::TrainConfig& t) {
    return {{"steps", t.steps},
            {"batch_size", t.batch_size},
            {"seq_len", t.seq_len},
            {"learning_rate", t.learning_rate},
            {"lr_schedule", schedule_name(t.schedule)},
            {"warmup_steps", t.warmup_steps},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"eps", t.eps},
            {"grad_clip", t.grad_clip}};
}

model::TrainConfig train_from(const json& j) {
    model::TrainConfig t;
    t.steps = j.at("steps").get<int>();
    t.batch_size = j.at("batch_size").get<int>();
    t.seq_len = j.at("seq_len").get<int>();
    t.learning_rate = j.at("learning_rate").get<double>();
    t.schedule = schedule_from(j.at("lr_schedule").get<std::string>());
    t.warmup_steps = j.at("warmup_steps").get<int>();
    t.beta1 = j.at("beta1").get<double>();
    t.beta2 = j.at("beta2").get<double>();
    t.eps = j.at("eps").get<double>();
    t.grad_clip = j.at("grad_clip").get<double>();
    return t;
}

json search_json(const search::SearchConfig& s) {
    return {{"population", s.population},
            {"mutation_size", s.mutation_size},
            {"crossover_size", s.crossover_size},
            {"topk", s.topk},
            {"max_iterations", s.max_iterations},
            {"mutate_prob", s.mutate_prob},
            {"lambda_min", s.lambda_min},
            {"lambda_max", s.lambda_max ? json(*s.lambda_max) : json(nullptr)},
            {"lambda_step", s.lambda_step},
            {"start_candidates", s.start_candidates}};
}

search::SearchConfig search_from(const json& j) {
    search::SearchConfig s;
    s.population = j.at("population").get<int>();
    s.mutation_size = j.at("mutation_size").get<int>();
    s.crossover_size = j.at("crossover_size").get<int>();
    s.topk = j.at("topk").get<int>();
    s.max_iterations = j.at("max_iterations").get<int>();
    s.mutate_prob = j.at("mutate_prob").get<double>();
    s.lambda_min = j.at("lambda_min").get<double>();
    if (!j.at("lambda_max").is_null()) s.lambda_max = j.at("lambda_max").get<double>();
    s.lambda_step = j.at("lambda_step").get<double>();
    s.start_candidates = j.at("start_candidates").get<std::vector<std::int64_t>>();
    return s;
}

json to_json_object(const PipelineConfig& c) {
    return {
        {"seed", c.seed},
        {"threads", c.threads},
        {"run_dir", c.run_dir.string()},
        {"corpus_dir", c.corpus_dir ? json(c.corpus_dir->string()) : json(nullptr)},
        {"model", model_json(c.model)},
        {"base_train", train_json(c.base_train)},
        {"finetune", train_json(c.finetune)},
        {"finetune_steps", {c.finetune_steps_mid, c.finetune_steps_full}},
        {"search", search_json(c.search)},
        {"search_final", search_json(c.search_final)},
        {"search_recovery", search_json(c.search_recovery)},
        {"search_docs", c.search_docs},
        {"search_docs_final", c.search_docs_final},
        {"targets",
         {{"mid_len", c.targets.mid_len},
          {"full_len", c.targets.full_len},
          {"final_len", c.targets.final_len},
          {"recovery_lens", c.targets.recovery_lens}}},
        {"eval",
         {{"ppl_lens", c.eval.ppl_lens},
          {"ppl_docs", c.eval.ppl_docs},
          {"passkey_lens", c.eval.passkey_lens},
          {"passkey_iterations", c.eval.passkey_iterations}}},
        {"synth",
         {{"total_bytes", c.synth.total_bytes},
          {"min_doc_bytes", c.synth.min_doc_bytes},
          {"max_doc_bytes", c.synth.max_doc_bytes},
          {"seed", c.synth.seed}}},
        {"split", {{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test}}},
    };
}

PipelineConfig from_json_object(const json& j) {
    PipelineConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.threads = j.at("threads").get<int>();
    c.run_dir = j.at("run_dir").get<std::string>();
    if (!j.at("corpus_dir").is_null()) c.corpus_dir = fs::path(j.at("corpus_dir").get<std::string>());
    c.model = model_from(j.at("model"));
    c.base_train = train_from(j.at("base_train"));
    c.finetune = train_from(j.at("finetune"));
    const auto steps = j.at("finetune_steps").get<std::vector<int>>();
    if (steps.size() != 2) throw ConfigError("finetune_steps must hold two counts");
    c.finetune_steps_mid = steps[0];
    c.finetune_steps_full = steps[1];
    c.search = search_from(j.at("search"));
    c.search_final = search_from(j.at("search_final"));
    c.search_recovery = search_from(j.at("search_recovery"));
    c.search_docs = j.at("search_docs").get<int>();
    c.search_docs_final = j.at("search_docs_final").get<int>();
    const auto& t = j.at("targets");
    c.targets.mid_len = t.at("mid_len").get<std::int64_t>();
    c.targets.full_len = t.at("full_len").get<std::int64_t>();
    c.targets.final_len = t.at("final_len").get<std::int64_t>();
    c.targets.recovery_lens = t.at("recovery_lens").get<std::vector<std::int64_t>>();
    const auto& e = j.at("eval");
    c.eval.ppl_lens = e.at("ppl_lens").get<std::vector<std::int64_t>>();
    c.eval.ppl_docs = e.at("ppl_docs").get<int>();
    c.eval.passkey_lens = e.at("passkey_lens").get<std::vector<std::int64_t>>();
    c.eval.passkey_iterations = e.at("passkey_iterations").get<int>();
    const auto& s = j.at("synth");
    c.synth.total_bytes = s.at("total_bytes").get<std::size_t>();
    c.synth.min_doc_bytes = s.at("min_doc_bytes").get<std::size_t>();
    c.synth.max_doc_bytes = s.at("max_doc_bytes").get<std::size_t>();
    c.synth.seed = s.at("seed").get<std::uint64_t>();
    const auto& r = j.at("split");
    c.split = {r.at("train").get<double>(), r.at("val").get<double>(), r.at("test").get<double>()};
    return c;
}

// Like merge_patch, except that null values are stored rather than erasing keys.
void overlay(json& base, const json& patch) {
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        if (it.value().is_object() && base.contains(it.key()) && base.at(it.key()).is_object()) {
            overlay(base.at(it.key()), it.value());
        } else {
            base[it.key()] = it.value();
        }
    }
}

// Every key of patch must exist in base (objects are checked recursively).
void check_known_keys(const json& base, const json& patch, const std::string& where) {
    if (!patch.is_object()) return;
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        const std::string path = where.empty() ? it.key() : where + "." + it.key();
        if (!base.contains(it.key())) throw ConfigError("unknown config key '" + path + "'");
        if (base.at(it.key()).is_object()) check_known_keys(base.at(it.key()), it.value(), path);
    }
}

// --- manifest ---------------------------------------------------------------

class Manifest {
public:
    explicit Manifest(fs::path path) : path_(std::move(path)) {
        if (fs::exists(path_)) {
            try {
                j_ = json::parse(io::read_file(path_.string()));
            } catch (const json::exception& e) {
                throw DataError("corrupt " + path_.string() + ": " + e.what());
            }
        } else {
            j_ = {{"version", 1}, {"stages", json::object()}};
        }
    }

    // Complete, same inputs, and every recorded output unchanged on disk.
    bool up_to_date(const std::string& stage, const std::string& inputs, const fs::path& dir) const {
        const auto& stages = j_.at("stages");
        if (!stages.contains(stage)) return false;
        const auto& s = stages.at(stage);
        if (s.value("status", "") != "complete" || s.value("inputs", "") != inputs) return false;
        for (auto it = s.at("outputs").begin(); it != s.at("outputs").end(); ++it) {
            const fs::path p = dir / it.key();
            if (!fs::exists(p) || sha256_file(p) != it.value().get<std::string>()) return false;
        }
        return true;
    }

    void mark_complete(const std::string& stage, const std::string& inputs, const std::vector<fs::path>& outputs,
                       const fs::path& dir) {
        json out = json::object();
        for (const auto& p : outputs) out[fs::relative(p, dir).generic_string()] = sha256_file(p);
        j_["stages"][stage] = {{"status", "complete"}, {"inputs", inputs}, {"outputs", out}};
        if (j_.contains("failed_stage") && j_["failed_stage"].value("stage", "") == stage) j_.erase("failed_stage");
        save();
    }

    void mark_failed(const std::string& stage, const std::string& message) {
        if (j_["stages"].contains(stage)) j_["stages"][stage]["status"] = "failed";
        j_["failed_stage"] = {{"stage", stage}, {"message", message}};
        save();
    }

    std::string output_hash(const std::string& stage, const std::string& file) const {
        return j_.at("stages").at(stage).at("outputs").at(file).get<std::string>();
    }

private:
    void save() const {
        const fs::path tmp = path_.string() + ".tmp";
        io::write_file(tmp.string(), j_.dump(2) + "\n");
        fs::rename(tmp, path_);
    }

    fs::path path_;
    json j_;
};

std::string digest_of(const json& parts) { return sha256_hex(parts.dump()); }

std::string corpus_digest(const corpus::Corpus& c) {
    std::vector<TokenSeq> docs;
    std::string tags;
    docs.reserve(c.documents.size());
    for (const auto& d : c.documents) {
        docs.push_back(d.tokens);
        tags += d.name;
        tags += static_cast<char>('0' + static_cast<int>(d.split));
    }
    return sha256_hex(corpus::encode_cache(docs) + tags);
}

std::string format_ppl(double x) {
    std::ostringstream os;
    os.precision(5);
    os << x;
    return os.str();
}

}  // namespace

// --- config -------------------------------------------------------------------

void PipelineConfig::validate() const {
    model.validate();
    const std::int64_t L = model.trained_len;
    if (!(L < targets.mid_len && targets.mid_len < targets.full_len && targets.full_len < targets.final_len)) {
        throw ConfigError("stage targets must satisfy trained_len < mid_len < full_len < final_len");
    }
    std::int64_t prev = 0;
    for (auto r : targets.recovery_lens) {
        if (r <= prev) throw ConfigError("recovery_lens must be positive and strictly increasing");
        if (r > 2 * L) throw ConfigError("recovery lengths must not exceed 2 * trained_len");
        if (r < 2) throw ConfigError("recovery lengths must be >= 2");
        prev = r;
    }
    if (finetune_steps_mid < 1 || finetune_steps_full < 1) throw ConfigError("both fine-tune stages need steps >= 1");
    if (base_train.steps < 1) throw ConfigError("base training needs steps >= 1");
    if (base_train.seq_len > L) throw ConfigError("base training seq_len must not exceed trained_len");
    if (search_docs < 1 || search_docs_final < 1) throw ConfigError("search document counts must be >= 1");
    search.validate();
    search_final.validate();
    search_recovery.validate();
    for (auto len : eval.ppl_lens) {
        if (len < 2) throw ConfigError("evaluation lengths must be >= 2");
    }
    if (eval.ppl_docs < 1 || eval.passkey_iterations < 1) throw ConfigError("evaluation counts must be >= 1");
    if (threads < 1) throw ConfigError("threads must be >= 1");
}

PipelineConfig PipelineConfig::desk() {
    PipelineConfig c;
    c.base_train.steps = 2400;
    c.base_train.batch_size = 16;
    c.base_train.seq_len = c.model.trained_len;
    c.base_train.learning_rate = 3e-3;
    c.base_train.warmup_steps = 100;
    c.finetune.batch_size = 4;
    c.finetune.learning_rate = 1e-3;
    c.finetune.warmup_steps = 0;
    c.search_final.max_iterations = 10;
    c.search_recovery.max_iterations = 10;
    c.threads = hardware_threads();
    return c;
}

PipelineConfig PipelineConfig::paper() {
    PipelineConfig c = desk();
    c.search = search::SearchConfig::paper();
    c.search_final = search::SearchConfig::paper().halved();
    c.search_recovery = search::SearchConfig::paper();
    return c;
}

PipelineConfig PipelineConfig::preset(const std::string& name) {
    if (name == "desk") return desk();
    if (name == "paper") return paper();
    throw ConfigError("unknown preset '" + name + "' (desk | paper)");
}

std::string config_to_json(const PipelineConfig& cfg) { return to_json_object(cfg).dump(2) + "\n"; }

PipelineConfig config_from_json(const std::string& text, const PipelineConfig& base) {
    try {
        const json patch = json::parse(text);
        if (!patch.is_object()) throw ConfigError("config file must hold a JSON object");
        json merged = to_json_object(base);
        check_known_keys(merged, patch, "");
        overlay(merged, patch);
        return from_json_object(merged);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }
}

// --- run lock -------------------------------------------------------------------

RunLock::RunLock(const fs::path& dir) {
    fs::create_directories(dir);
    const fs::path p = RunLayout{dir}.lock();
    fd_ = ::open(p.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw IoError("cannot open lock file " + p.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
        ::close(fd_);
        fd_ = -1;
        throw Error("run directory " + dir.string() + " is locked by another process");
    }
}

RunLock::~RunLock() {
    if (fd_ >= 0) {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
}

// --- oracle -----------------------------------------------------------------------

PerplexityOracle::PerplexityOracle(const model::ModelCheckpoint& ckpt, std::vector<TokenSeq> docs,
                                   std::int64_t target_len)
    : ckpt_(ckpt), docs_(std::move(docs)) {
    if (docs_.empty()) throw InputError("perplexity oracle needs at least one document");
    for (auto& d : docs_) {
        if (static_cast<std::int64_t>(d.size()) < target_len) {
            throw LengthError("oracle document shorter than target length " + std::to_string(target_len));
        }
        d.resize(static_cast<std::size_t>(target_len));
    }
}

double PerplexityOracle::evaluate(const rope::RescaleFactors& genome) {
    double nll = 0.0;
    std::int64_t count = 0;
    for (const auto& d : docs_) {
        for (double x : model::token_nll(ckpt_, d, &genome)) nll += x;
        count += static_cast<std::int64_t>(d.size()) - 1;
    }
    return std::exp(nll / static_cast<double>(count));
}

// --- stages -------------------------------------------------------------------------

corpus::Corpus load_corpus(const PipelineConfig& cfg, const Logger& log) {
    fs::path dir;
    if (cfg.corpus_dir) {
        dir = *cfg.corpus_dir;
    } else {
        dir = RunLayout{cfg.run_dir}.corpus();
        if (!fs::exists(dir) || fs::is_empty(dir)) {
            if (log) log("generating sample corpus in " + dir.string());
            corpus::write_synth_corpus(dir, cfg.synth);
        }
    }
    auto paths = corpus::list_text_files(dir);
    auto c = corpus::ingest(std::move(paths), cfg.split, rnd::derive(cfg.seed, {0xC0}));
    if (log) {
        log("corpus: " + std::to_string(c.documents.size()) + " documents, " + std::to_string(c.total_tokens()) +
            " tokens");
    }
    return c;
}

SearchRun search_factors(const model::ModelCheckpoint& ckpt, const corpus::Corpus& corpus, std::int64_t target_len,
                         const search::SearchConfig& sc, int k_docs, std::vector<search::Individual> seeds,
                         const Logger& log) {
    SearchRun run{{}, search::SearchSpace::for_target(ckpt.config.rotary, target_len, sc), sc};
    if (seeds.empty()) seeds = search::baseline_seeds(run.space);
    auto docs = corpus::sample_eval_docs(corpus, corpus::Split::val, k_docs, target_len,
                                         rnd::derive(sc.seed, {0xD0C5}));
    PerplexityOracle oracle(ckpt, std::move(docs), target_len);
    run.result = search::run_search(oracle, run.space, seeds, sc, [&](const search::HistoryRow& r) {
        if (log) {
            log("  search L'=" + std::to_string(target_len) + " iter " + std::to_string(r.iteration) + "/" +
                std::to_string(sc.max_iterations) + " best " + format_ppl(r.best_ppl) + " median " +
                format_ppl(r.median_ppl) + " evals " + std::to_string(r.evals_total));
        }
    });
    return run;
}

void save_search(const RunLayout& layout, const std::string& name, const fs::path& factors_path,
                 const SearchRun& run) {
    fs::create_directories(layout.search_logs());
    rope::write_factor_file(factors_path, {run.space.rotary, run.result.best.genome});
    search::write_history(layout.search_logs() / (name + ".csv"), run.result.history);
    search::write_sidecar(layout.search_logs() / (name + ".json"), run.result, run.config, run.space);
}

std::vector<search::Individual> secondary_seeds(const search::SearchSpace& space,
                                                const rope::RescaleFactors& finetuned) {
    rope::RotaryConfig window = space.rotary;
    window.original_len = static_cast<int>(finetuned.target_len);
    const double s2 = static_cast<double>(space.target_len) / static_cast<double>(finetuned.target_len);
    const std::pair<rope::RescaleFactors, search::Provenance> generated[] = {
        {rope::pi_factors(window, s2), search::Provenance::seed_pi},
        {rope::ntk_factors(window, s2), search::Provenance::seed_ntk},
        {rope::yarn_factors(window, s2), search::Provenance::seed_yarn},
    };
    std::vector<search::Individual> seeds;
    for (const auto& [g, prov] : generated) {
        rope::RescaleFactors rf = finetuned;
        for (std::size_t i = 0; i < rf.factors.size(); ++i) rf.factors[i] *= g.factors[i];
        rf = space.snap(std::move(rf));
        if (rf.start_token >= space.target_len) rf.start_token = 0;
        seeds.push_back({std::move(rf), std::nullopt, prov});
    }
    return seeds;
}

FactorBundle assemble_bundle(const rope::RotaryConfig& rotary,
                             const std::vector<std::pair<std::int64_t, rope::RescaleFactors>>& recovery,
                             const rope::RescaleFactors& finetuned, const rope::RescaleFactors& final_factors) {
    FactorBundle b;
    b.rotary = rotary;
    for (const auto& [len, rf] : recovery) b.entries.push_back({len, rf});
    b.entries.push_back({finetuned.target_len, finetuned});
    b.default_factors = final_factors;
    b.validate();
    return b;
}

RunSummary run_progressive(const PipelineConfig& cfg, const Logger& log) {
    cfg.validate();
    const RunLayout layout{cfg.run_dir};
    fs::create_directories(layout.reports());
    fs::create_directories(layout.search_logs());
    RunLock lock(layout.dir);
    Manifest manifest(layout.manifest());
    RunSummary summary;
    auto say = [&](const std::string& s) {
        if (log) log(s);
    };

    const corpus::Corpus corpus = load_corpus(cfg, log);
    const std::string data_digest = corpus_digest(corpus);
    const rope::RotaryConfig& rotary = cfg.model.rotary;

    auto stage = [&](const std::string& name, const json& inputs, const std::vector<fs::path>& outputs,
                     const std::function<void()>& body) {
        const std::string key = digest_of(inputs);
        if (manifest.up_to_date(name, key, layout.dir)) {
            say("[" + name + "] up to date, skipped");
            summary.skipped_stages.push_back(name);
            return;
        }
        say("[" + name + "] running");
        try {
            body();
        } catch (const std::exception& e) {
            manifest.mark_failed(name, e.what());
            throw;
        }
        manifest.mark_complete(name, key, outputs, layout.dir);
    };
    auto hash = [&](const fs::path& p) { return sha256_file(p); };
    auto seeded = [&](search::SearchConfig sc, std::uint64_t stream) {
        sc.seed = rnd::derive(cfg.seed, {stream});
        sc.threads = cfg.threads;
        return sc;
    };

    // 1. base model
    stage("base",
          {{"model", model_json(cfg.model)}, {"train", train_json(cfg.base_train)}, {"seed", cfg.seed},
           {"data", data_digest}},
          {layout.base_ckpt(), layout.reports() / "base_train.csv"}, [&] {
              model::TrainConfig tc = cfg.base_train;
              tc.seed = rnd::derive(cfg.seed, {2});
              tc.threads = cfg.threads;
              auto ckpt = model::init_model(cfg.model, rnd::derive(cfg.seed, {1}));
              ckpt.rng_seed = cfg.seed;
              auto res = model::train(std::move(ckpt), corpus, tc, nullptr, [&](const model::TrainLogRow& r) {
                  if (r.step % 100 == 0) say("  base step " + std::to_string(r.step) + " loss " + format_ppl(r.loss));
              });
              model::save_checkpoint(layout.base_ckpt(), res.checkpoint);
              model::write_train_log(layout.reports() / "base_train.csv", res.log);
          });
    const model::ModelCheckpoint base = model::load_checkpoint(layout.base_ckpt());

    // 2. searches on the base model
    const std::pair<std::string, std::int64_t> first_stage[] = {{"stage1_mid", cfg.targets.mid_len},
                                                                 {"stage1_full", cfg.targets.full_len}};
    std::uint64_t stream = 10;
    for (const auto& [name, len] : first_stage) {
        const fs::path out = name == "stage1_mid" ? layout.stage1_mid() : layout.stage1_full();
        const auto sc = seeded(cfg.search, stream++);
        stage(name,
              {{"search", search_json(sc)}, {"seed", sc.seed}, {"target_len", len}, {"docs", cfg.search_docs},
               {"base", hash(layout.base_ckpt())}, {"data", data_digest}},
              {out, layout.search_logs() / (name + ".csv"), layout.search_logs() / (name + ".json")}, [&] {
                  save_search(layout, name, out, search_factors(base, corpus, len, sc, cfg.search_docs, {}, log));
              });
    }
    const auto rf_mid = rope::read_factor_file(layout.stage1_mid()).factors;
    const auto rf_full = rope::read_factor_file(layout.stage1_full()).factors;

    // 3. progressive fine-tune
    stage("finetune",
          {{"train", train_json(cfg.finetune)},
           {"steps", {cfg.finetune_steps_mid, cfg.finetune_steps_full}},
           {"seed", cfg.seed},
           {"base", hash(layout.base_ckpt())},
           {"mid", hash(layout.stage1_mid())},
           {"full", hash(layout.stage1_full())},
           {"data", data_digest}},
          {layout.ft_ckpt(), layout.reports() / "finetune.csv"}, [&] {
              model::TrainConfig tc = cfg.finetune;
              tc.seed = rnd::derive(cfg.seed, {3});
              tc.threads = cfg.threads;
              auto res = model::finetune_progressive(base, rf_mid, cfg.finetune_steps_mid, rf_full,
                                                     cfg.finetune_steps_full, corpus, tc,
                                                     [&](const model::TrainLogRow& r) {
                                                         if (r.step % 10 == 0) {
                                                             say("  finetune step " + std::to_string(r.step) +
                                                                 " loss " + format_ppl(r.loss));
                                                         }
                                                     });
              model::save_checkpoint(layout.ft_ckpt(), res.checkpoint);
              model::write_train_log(layout.reports() / "finetune.csv", res.log);
          });
    const model::ModelCheckpoint ft = model::load_checkpoint(layout.ft_ckpt());

    // 4. search on the fine-tuned model
    {
        const auto sc = seeded(cfg.search_final, 20);
        stage("stage2",
              {{"search", search_json(sc)}, {"seed", sc.seed}, {"target_len", cfg.targets.final_len},
               {"docs", cfg.search_docs_final}, {"ft", hash(layout.ft_ckpt())}, {"full", hash(layout.stage1_full())},
               {"data", data_digest}},
              {layout.stage2(), layout.search_logs() / "stage2.csv", layout.search_logs() / "stage2.json"}, [&] {
                  const auto space = search::SearchSpace::for_target(rotary, cfg.targets.final_len, sc);
                  save_search(layout, "stage2", layout.stage2(),
                              search_factors(ft, corpus, cfg.targets.final_len, sc, cfg.search_docs_final,
                                             secondary_seeds(space, rf_full), log));
              });
    }
    const auto rf_final = rope::read_factor_file(layout.stage2()).factors;

    // 5. recovery searches
    std::vector<std::pair<std::int64_t, rope::RescaleFactors>> recovery;
    for (auto len : cfg.targets.recovery_lens) {
        const std::string name = "recovery_" + std::to_string(len);
        const auto sc = seeded(cfg.search_recovery, 30 + static_cast<std::uint64_t>(len));
        stage(name,
              {{"search", search_json(sc)}, {"seed", sc.seed}, {"target_len", len}, {"docs", cfg.search_docs},
               {"ft", hash(layout.ft_ckpt())}, {"data", data_digest}},
              {layout.recovery(len), layout.search_logs() / (name + ".csv"), layout.search_logs() / (name + ".json")},
              [&] {
                  save_search(layout, name, layout.recovery(len),
                              search_factors(ft, corpus, len, sc, cfg.search_docs, {}, log));
              });
        recovery.emplace_back(len, rope::read_factor_file(layout.recovery(len)).factors);
    }

    // 6. bundle
    {
        json inputs = {{"full", hash(layout.stage1_full())}, {"final", hash(layout.stage2())}};
        for (auto len : cfg.targets.recovery_lens) inputs["recovery_" + std::to_string(len)] = hash(layout.recovery(len));
        stage("bundle", inputs, {layout.bundle()},
              [&] { write_bundle(layout.bundle(), assemble_bundle(rotary, recovery, rf_full, rf_final)); });
    }
    summary.bundle = read_bundle(layout.bundle());

    // 7. reports
    const fs::path ppl_base = layout.reports() / "ppl_base.csv";
    const fs::path ppl_bundle = layout.reports() / "ppl_bundle.csv";
    const fs::path recovery_csv = layout.reports() / "recovery.csv";
    const fs::path passkey_csv = layout.reports() / "passkey.csv";
    stage("eval",
          {{"eval",
            {{"ppl_lens", cfg.eval.ppl_lens},
             {"ppl_docs", cfg.eval.ppl_docs},
             {"passkey_lens", cfg.eval.passkey_lens},
             {"passkey_iterations", cfg.eval.passkey_iterations}}},
           {"seed", cfg.seed},
           {"base", hash(layout.base_ckpt())},
           {"ft", hash(layout.ft_ckpt())},
           {"bundle", hash(layout.bundle())},
           {"data", data_digest}},
          {ppl_base, ppl_bundle, recovery_csv, passkey_csv}, [&] {
              const std::uint64_t eval_seed = rnd::derive(cfg.seed, {40});
              eval::SweepOptions opts;
              opts.threads = cfg.threads;
              std::int64_t longest = 0;
              for (auto len : cfg.eval.ppl_lens) longest = std::max(longest, len);
              const auto identity = single_factor_bundle(rotary, rope::identity_factors(rotary, longest));
              say("  perplexity sweep, base model");
              const auto base_report =
                  eval::ppl_sweep(base, corpus, cfg.eval.ppl_lens, identity, cfg.eval.ppl_docs, eval_seed, opts);
              eval::write_ppl_csv(ppl_base, base_report);
              say("  perplexity sweep, fine-tuned model with bundle");
              const auto bundle_report = eval::ppl_sweep(ft, corpus, cfg.eval.ppl_lens, summary.bundle,
                                                         cfg.eval.ppl_docs, eval_seed, opts);
              eval::write_ppl_csv(ppl_bundle, bundle_report);

              std::ofstream rec(recovery_csv, std::ios::trunc);
              rec << "context_len,recovery_ppl,full_target_ppl\n";
              rec.precision(17);
              const auto final_only = single_factor_bundle(rotary, rf_final);
              for (const auto& [len, rf] : recovery) {
                  const auto with_recovery = eval::ppl_sweep(ft, corpus, {len}, single_factor_bundle(rotary, rf),
                                                             cfg.eval.ppl_docs, eval_seed, opts);
                  const auto with_final =
                      eval::ppl_sweep(ft, corpus, {len}, final_only, cfg.eval.ppl_docs, eval_seed, opts);
                  rec << len << ',' << with_recovery.rows[0].perplexity << ',' << with_final.rows[0].perplexity
                      << '\n';
              }
              rec.close();

              say("  passkey retrieval");
              const auto passkey = eval::passkey_eval(eval::model_generator(ft, summary.bundle), cfg.eval.passkey_lens,
                                                      cfg.eval.passkey_iterations, eval_seed);
              eval::write_passkey_csv(passkey_csv, passkey);
          });
    summary.base_ppl = eval::read_ppl_csv(ppl_base);
    summary.bundle_ppl = eval::read_ppl_csv(ppl_bundle);
    summary.passkey = eval::read_passkey_csv(passkey_csv);
    say("base model perplexity (original RoPE):\n" + eval::format_ppl_table(summary.base_ppl));
    say("fine-tuned model with factor bundle:\n" + eval::format_ppl_table(summary.bundle_ppl));
    say("passkey retrieval:\n" + eval::format_passkey_table(summary.passkey));
    return summary;
}

}  // namespace ropeforge::pipeline
