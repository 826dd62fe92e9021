#include "ropeforge/search.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include <json.hpp>

#include "random.hpp"
#include "ropeforge/parallel.hpp"

namespace ropeforge::search {

namespace {

constexpr int kMutationRetries = 16;
constexpr int kDuplicateRetries = 8;

using GenomeKey = std::vector<std::int64_t>;

GenomeKey key_of(const SearchSpace& space, const rope::RescaleFactors& rf) {
    GenomeKey k;
    k.reserve(rf.factors.size() + 1);
    for (double f : rf.factors) k.push_back(space.grid.index_of(f));
    k.push_back(rf.start_token);
    return k;
}

bool monotone(const std::vector<double>& f) { return std::is_sorted(f.begin(), f.end()); }

double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::string format_double(double x) {
    std::ostringstream os;
    os << std::setprecision(17) << x;
    return os.str();
}

}  // namespace

void SearchConfig::validate() const {
    if (population < 3) throw ConfigError("search population must be >= 3");
    if (mutation_size < 0 || crossover_size < 0) throw ConfigError("search offspring sizes must be >= 0");
    if (topk < 1) throw ConfigError("search topk must be >= 1");
    if (mutation_size + crossover_size + topk > population) {
        throw ConfigError("search needs mutation_size + crossover_size + topk <= population");
    }
    if (max_iterations < 1) throw ConfigError("search max_iterations must be >= 1");
    if (!(mutate_prob >= 0.0 && mutate_prob <= 1.0)) throw ConfigError("mutate_prob must lie in [0, 1]");
    if (!(lambda_step > 0.0)) throw ConfigError("lambda_step must be > 0");
    if (!(lambda_min >= 1.0)) throw ConfigError("lambda_min must be >= 1");
    if (lambda_max && !(*lambda_max >= lambda_min)) throw ConfigError("lambda_max must be >= lambda_min");
    if (start_candidates.empty()) throw ConfigError("start_candidates must not be empty");
    for (auto c : start_candidates) {
        if (c < 0) throw ConfigError("start_candidates must be >= 0");
    }
}

SearchConfig SearchConfig::desk() { return {}; }

SearchConfig SearchConfig::paper() {
    SearchConfig sc;
    sc.population = 64;
    sc.mutation_size = 16;
    sc.crossover_size = 16;
    sc.topk = 32;
    sc.max_iterations = 40;
    return sc;
}

SearchConfig SearchConfig::halved() const {
    SearchConfig sc = *this;
    sc.population = std::max(3, population / 2);
    sc.mutation_size = mutation_size / 2;
    sc.crossover_size = crossover_size / 2;
    sc.topk = std::max(1, sc.population / 2);
    return sc;
}

Grid::Grid(double lo, double hi, double step) : lo_(lo), step_(step) {
    if (!(step > 0.0) || !(hi >= lo)) throw ConfigError("invalid lambda grid");
    count_ = static_cast<int>(std::floor((hi - lo) / step + 1e-9)) + 1;
}

int Grid::snap(double lambda) const {
    const double k = std::floor((lambda - lo_) / step_ + 0.5);
    if (!(k > 0.0)) return 0;
    return k >= count_ - 1 ? count_ - 1 : static_cast<int>(k);
}

int Grid::index_of(double lambda) const {
    const double k = std::nearbyint((lambda - lo_) / step_);
    if (!(k >= 0.0) || k >= count_) return -1;
    const int i = static_cast<int>(k);
    return value(i) == lambda ? i : -1;
}

SearchSpace SearchSpace::make(const rope::RotaryConfig& cfg, double s, const SearchConfig& sc) {
    if (!(s >= 1.0)) throw InputError("extension ratio must be >= 1");
    SearchSpace space;
    space.rotary = cfg;
    space.extension_ratio = s;
    space.target_len = std::llround(s * cfg.original_len);
    const double hi = sc.lambda_max.value_or(rope::max_factor_bound(s));
    space.grid = Grid(sc.lambda_min, hi, sc.lambda_step);
    for (auto c : sc.start_candidates) {
        if (c < space.target_len) space.start_candidates.push_back(c);
    }
    std::sort(space.start_candidates.begin(), space.start_candidates.end());
    space.start_candidates.erase(std::unique(space.start_candidates.begin(), space.start_candidates.end()),
                                 space.start_candidates.end());
    if (space.start_candidates.empty()) throw ConfigError("no start-token candidate below the target length");
    return space;
}

SearchSpace SearchSpace::for_target(const rope::RotaryConfig& cfg, std::int64_t target_len, const SearchConfig& sc) {
    SearchSpace space =
        make(cfg, static_cast<double>(target_len) / static_cast<double>(cfg.original_len), sc);
    space.target_len = target_len;
    return space;
}

bool SearchSpace::admits(const rope::RescaleFactors& rf) const {
    if (static_cast<int>(rf.factors.size()) != rotary.pairs()) return false;
    if (rf.target_len != target_len) return false;
    if (rf.start_token < 0 || rf.start_token >= target_len) return false;
    for (double f : rf.factors) {
        if (grid.index_of(f) < 0) return false;
    }
    return monotone(rf.factors) && !rope::validate_factors(rf, true, rotary.pairs());
}

rope::RescaleFactors SearchSpace::snap(rope::RescaleFactors rf) const {
    for (double& f : rf.factors) f = grid.value(grid.snap(f));
    std::sort(rf.factors.begin(), rf.factors.end());
    rf.target_len = target_len;
    rf.extension_ratio = extension_ratio;
    return rf;
}

const char* to_string(Provenance p) {
    switch (p) {
        case Provenance::seed_pi: return "seed_pi";
        case Provenance::seed_ntk: return "seed_ntk";
        case Provenance::seed_yarn: return "seed_yarn";
        case Provenance::mutation: return "mutation";
        case Provenance::crossover: return "crossover";
    }
    return "unknown";
}

std::vector<Individual> baseline_seeds(const SearchSpace& space) {
    const double s = space.extension_ratio;
    return {
        {space.snap(rope::pi_factors(space.rotary, s)), std::nullopt, Provenance::seed_pi},
        {space.snap(rope::ntk_factors(space.rotary, s)), std::nullopt, Provenance::seed_ntk},
        {space.snap(rope::yarn_factors(space.rotary, s)), std::nullopt, Provenance::seed_yarn},
    };
}

rope::RescaleFactors mutate(const rope::RescaleFactors& parent, const SearchSpace& space, double p,
                            std::uint64_t stream_seed) {
    rnd::Engine g(stream_seed);
    rope::RescaleFactors child;
    for (int attempt = 0; attempt <= kMutationRetries; ++attempt) {
        child = parent;
        // A resampled factor moves to a grid point at a log-uniform distance
        // (1 to grid size steps) in a random direction, clamped to the bounds.
        for (double& f : child.factors) {
            if (!rnd::bernoulli(g, p)) continue;
            const int size = space.grid.size();
            const double span = std::log2(static_cast<double>(size));
            const int mag = static_cast<int>(std::exp2(rnd::unit(g) * span));
            const int k = space.grid.index_of(f) + (rnd::bernoulli(g, 0.5) ? mag : -mag);
            f = space.grid.value(std::clamp(k, 0, size - 1));
        }
        if (rnd::bernoulli(g, p)) {
            child.start_token = space.start_candidates[rnd::below(g, space.start_candidates.size())];
        }
        if (monotone(child.factors)) return child;
    }
    std::sort(child.factors.begin(), child.factors.end());
    return child;
}

rope::RescaleFactors crossover(const rope::RescaleFactors& a, const rope::RescaleFactors& b, const SearchSpace& space,
                               std::uint64_t stream_seed) {
    (void)space;
    if (a.factors.size() != b.factors.size() || a.target_len != b.target_len) {
        throw ShapeError("crossover parents differ in dimension or target length");
    }
    rnd::Engine g(stream_seed);
    rope::RescaleFactors child = a;
    for (int attempt = 0; attempt <= kMutationRetries; ++attempt) {
        for (std::size_t i = 0; i < a.factors.size(); ++i) {
            child.factors[i] = rnd::bernoulli(g, 0.5) ? a.factors[i] : b.factors[i];
        }
        child.start_token = rnd::bernoulli(g, 0.5) ? a.start_token : b.start_token;
        if (monotone(child.factors)) return child;
    }
    // Raising an offending entry to the larger parent value always restores
    // order, because the pointwise maximum of two sorted sequences is sorted.
    for (std::size_t i = 1; i < child.factors.size(); ++i) {
        if (child.factors[i] < child.factors[i - 1]) child.factors[i] = std::max(a.factors[i], b.factors[i]);
    }
    return child;
}

Population seed_population(const SearchSpace& space, const std::vector<Individual>& seeds, const SearchConfig& sc) {
    sc.validate();
    if (seeds.empty()) throw ConfigError("search needs at least one seed individual");
    if (static_cast<int>(seeds.size()) > sc.population) throw ConfigError("more seeds than population slots");
    Population pop;
    pop.reserve(static_cast<std::size_t>(sc.population));
    std::vector<GenomeKey> keys;
    for (const auto& s : seeds) {
        if (!space.admits(s.genome)) throw InputError("seed genome is off-grid or not monotone");
        pop.push_back({s.genome, std::nullopt, s.provenance});
        keys.push_back(key_of(space, s.genome));
    }
    for (int idx = static_cast<int>(seeds.size()); idx < sc.population; ++idx) {
        const auto& parent = seeds[static_cast<std::size_t>(idx) % seeds.size()].genome;
        rope::RescaleFactors child;
        for (int attempt = 0; attempt <= kDuplicateRetries; ++attempt) {
            child = mutate(parent, space, sc.mutate_prob,
                           rnd::derive(sc.seed, {0, static_cast<std::uint64_t>(idx), static_cast<std::uint64_t>(attempt)}));
            if (std::find(keys.begin(), keys.end(), key_of(space, child)) == keys.end()) break;
        }
        keys.push_back(key_of(space, child));
        pop.push_back({std::move(child), std::nullopt, Provenance::mutation});
    }
    return pop;
}

Population seed_population(const rope::RotaryConfig& cfg, double s, const SearchConfig& sc) {
    const SearchSpace space = SearchSpace::make(cfg, s, sc);
    return seed_population(space, baseline_seeds(space), sc);
}

SearchResult run_search(FitnessOracle& oracle, const SearchSpace& space, const std::vector<Individual>& seeds,
                        const SearchConfig& sc, const IterationCallback& on_iteration) {
    Population pop = seed_population(space, seeds, sc);
    std::map<GenomeKey, double> cache;
    std::vector<Individual> top;
    SearchResult result;

    for (int it = 1; it <= sc.max_iterations; ++it) {
        std::vector<GenomeKey> keys;
        keys.reserve(pop.size());
        std::vector<std::size_t> pending;
        std::vector<GenomeKey> pending_keys;
        for (std::size_t i = 0; i < pop.size(); ++i) {
            keys.push_back(key_of(space, pop[i].genome));
            if (pop[i].fitness || cache.count(keys.back())) continue;
            if (std::find(pending_keys.begin(), pending_keys.end(), keys.back()) != pending_keys.end()) continue;
            if (!space.admits(pop[i].genome)) throw Error("search produced an inadmissible genome");
            pending.push_back(i);
            pending_keys.push_back(keys.back());
        }

        std::vector<double> fitness(pending.size());
        try {
            parallel_for(pending.size(), sc.threads,
                         [&](std::size_t j) { fitness[j] = oracle.evaluate(pop[pending[j]].genome); });
        } catch (const std::exception& e) {
            throw SearchError(std::string("fitness evaluation failed at iteration ") + std::to_string(it) + ": " +
                                  e.what(),
                              result.history);
        }
        for (std::size_t j = 0; j < pending.size(); ++j) {
            double f = fitness[j];
            if (std::isnan(f)) f = std::numeric_limits<double>::infinity();
            cache.emplace(pending_keys[j], f);
        }
        result.evaluations += static_cast<std::int64_t>(pending.size());

        std::vector<double> pop_fitness;
        pop_fitness.reserve(pop.size());
        for (std::size_t i = 0; i < pop.size(); ++i) {
            if (!pop[i].fitness) pop[i].fitness = cache.at(keys[i]);
            pop_fitness.push_back(*pop[i].fitness);
        }
        if (it == 1) {
            for (std::size_t i = 0; i < seeds.size(); ++i) result.seeds.push_back(pop[i]);
        }

        // Elitist top-k over the previous elite and this population, one slot per genome.
        std::vector<Individual> pool = top;
        pool.insert(pool.end(), pop.begin(), pop.end());
        std::stable_sort(pool.begin(), pool.end(),
                         [](const Individual& a, const Individual& b) { return *a.fitness < *b.fitness; });
        top.clear();
        std::vector<GenomeKey> top_keys;
        for (auto& ind : pool) {
            if (static_cast<int>(top.size()) == sc.topk) break;
            auto k = key_of(space, ind.genome);
            if (std::find(top_keys.begin(), top_keys.end(), k) != top_keys.end()) continue;
            top_keys.push_back(std::move(k));
            top.push_back(ind);
        }

        HistoryRow row{it, *top.front().fitness, median(pop_fitness), result.evaluations};
        result.history.push_back(row);
        if (on_iteration) on_iteration(row);
        if (it == sc.max_iterations) break;

        Population next;
        next.reserve(static_cast<std::size_t>(sc.mutation_size + sc.crossover_size) + top.size());
        const auto iter = static_cast<std::uint64_t>(it);
        std::vector<GenomeKey> fresh;
        auto is_new = [&](const GenomeKey& k) {
            return !cache.count(k) && std::find(fresh.begin(), fresh.end(), k) == fresh.end();
        };
        for (int j = 0; j < sc.mutation_size + sc.crossover_size; ++j) {
            const bool mutation = j < sc.mutation_size;
            rnd::Engine g(rnd::derive(sc.seed, {iter, static_cast<std::uint64_t>(j)}));
            rope::RescaleFactors child;
            for (int attempt = 0; attempt <= kDuplicateRetries; ++attempt) {
                if (mutation) {
                    const auto& parent = top[rnd::below(g, top.size())].genome;
                    child = mutate(parent, space, sc.mutate_prob, g());
                } else {
                    const std::size_t ia = rnd::below(g, top.size());
                    std::size_t ib = ia;
                    if (top.size() > 1) {
                        ib = rnd::below(g, top.size() - 1);
                        if (ib >= ia) ++ib;
                    }
                    child = crossover(top[ia].genome, top[ib].genome, space, g());
                }
                if (is_new(key_of(space, child))) break;
            }
            fresh.push_back(key_of(space, child));
            next.push_back({std::move(child), std::nullopt, mutation ? Provenance::mutation : Provenance::crossover});
        }
        next.insert(next.end(), top.begin(), top.end());
        pop = std::move(next);
    }

    result.best = top.front();
    return result;
}

SearchResult run_search(FitnessOracle& oracle, const rope::RotaryConfig& cfg, double s, const SearchConfig& sc,
                        const IterationCallback& on_iteration) {
    const SearchSpace space = SearchSpace::make(cfg, s, sc);
    return run_search(oracle, space, baseline_seeds(space), sc, on_iteration);
}

void write_history(const std::filesystem::path& path, const std::vector<HistoryRow>& history) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "iteration,best_ppl,median_ppl,evals_total\n";
    for (const auto& r : history) {
        out << r.iteration << ',' << format_double(r.best_ppl) << ',' << format_double(r.median_ppl) << ','
            << r.evals_total << '\n';
    }
}

std::vector<HistoryRow> read_history(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    std::string line;
    std::getline(in, line);
    if (line != "iteration,best_ppl,median_ppl,evals_total") throw DataError("unexpected history header in " + path.string());
    std::vector<HistoryRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        HistoryRow r;
        std::string field;
        std::getline(ls, field, ',');
        r.iteration = std::stoi(field);
        std::getline(ls, field, ',');
        r.best_ppl = std::stod(field);
        std::getline(ls, field, ',');
        r.median_ppl = std::stod(field);
        std::getline(ls, field, ',');
        r.evals_total = std::stoll(field);
        rows.push_back(r);
    }
    return rows;
}

namespace {

nlohmann::json fitness_json(double f) { return std::isfinite(f) ? nlohmann::json(f) : nlohmann::json(nullptr); }

double fitness_from(const nlohmann::json& j) {
    return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

}  // namespace

void write_sidecar(const std::filesystem::path& path, const SearchResult& result, const SearchConfig& sc,
                   const SearchSpace& space) {
    nlohmann::json cfg = {
        {"population", sc.population},
        {"mutation_size", sc.mutation_size},
        {"crossover_size", sc.crossover_size},
        {"topk", sc.topk},
        {"max_iterations", sc.max_iterations},
        {"mutate_prob", sc.mutate_prob},
        {"lambda_min", sc.lambda_min},
        {"lambda_max", space.grid.value(space.grid.size() - 1)},
        {"lambda_step", sc.lambda_step},
        {"start_candidates", space.start_candidates},
    };
    nlohmann::json seeds = nlohmann::json::array();
    for (const auto& s : result.seeds) {
        seeds.push_back({{"provenance", to_string(s.provenance)}, {"ppl", fitness_json(s.fitness.value_or(NAN))}});
    }
    nlohmann::json j = {
        {"seed", sc.seed},
        {"target_len", space.target_len},
        {"extension_ratio", space.extension_ratio},
        {"config", cfg},
        {"best_ppl", fitness_json(*result.best.fitness)},
        {"best_provenance", to_string(result.best.provenance)},
        {"evaluations", result.evaluations},
        {"seeds", seeds},
    };
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

SidecarSummary read_sidecar(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    try {
        const auto j = nlohmann::json::parse(in);
        SidecarSummary s;
        s.best_ppl = fitness_from(j.at("best_ppl"));
        for (const auto& e : j.at("seeds")) {
            s.seed_ppl.emplace_back(e.at("provenance").get<std::string>(), fitness_from(e.at("ppl")));
        }
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed search sidecar " + path.string() + ": " + e.what());
    }
}

}  // namespace ropeforge::search
