#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ropeforge/error.hpp"
#include "ropeforge/rope.hpp"

namespace ropeforge::search {

struct SearchConfig {
    int population = 16;
    int mutation_size = 4;
    int crossover_size = 4;
    int max_iterations = 20;
    double mutate_prob = 0.3;
    int topk = 8;
    double lambda_min = 1.0;
    std::optional<double> lambda_max;  // unset: 1.25 * extension ratio
    double lambda_step = 0.01;
    std::vector<std::int64_t> start_candidates{0, 1, 2, 4, 8, 12, 16, 20, 24, 28, 32, 64, 128, 256};
    std::uint64_t seed = 0;
    // Concurrent oracle evaluations. Results never depend on it.
    int threads = 1;

    // Throws ConfigError when sizes or grid bounds are inconsistent.
    void validate() const;

    // P=16, N1=N2=4, K=8, T=20.
    static SearchConfig desk();
    // P=64, N1=N2=16, K=32, T=40.
    static SearchConfig paper();
    // Population, mutation and crossover sizes halved (top-k follows P/2).
    SearchConfig halved() const;
};

// The lambda grid {min, min + step, ..., <= max}; values are always formed as
// min + k * step so equal indices give bit-equal factors.
class Grid {
public:
    Grid(double lo, double hi, double step);

    int size() const { return count_; }
    double value(int k) const { return lo_ + k * step_; }
    // Round-half-up to the nearest grid index, clamped to the grid.
    int snap(double lambda) const;
    // Index of a value already on the grid, or -1.
    int index_of(double lambda) const;

private:
    double lo_;
    double step_;
    int count_;
};

// Everything that fixes where genomes live for one search.
struct SearchSpace {
    rope::RotaryConfig rotary;
    std::int64_t target_len = 0;
    double extension_ratio = 1.0;
    Grid grid{1.0, 1.0, 0.01};
    std::vector<std::int64_t> start_candidates;  // filtered to [0, target_len)

    static SearchSpace make(const rope::RotaryConfig& cfg, double s, const SearchConfig& sc);
    // Same, for a search whose genomes target target_len directly.
    static SearchSpace for_target(const rope::RotaryConfig& cfg, std::int64_t target_len, const SearchConfig& sc);

    // On-grid, within bounds, monotone, valid start token.
    bool admits(const rope::RescaleFactors& rf) const;
    // Snap every factor to the grid, then sort-repair.
    rope::RescaleFactors snap(rope::RescaleFactors rf) const;
};

enum class Provenance { seed_pi, seed_ntk, seed_yarn, mutation, crossover };
const char* to_string(Provenance p);

struct Individual {
    rope::RescaleFactors genome;
    std::optional<double> fitness;
    Provenance provenance = Provenance::mutation;
};

using Population = std::vector<Individual>;

class FitnessOracle {
public:
    virtual ~FitnessOracle() = default;
    // Perplexity of the genome over a fixed sample set. Must be deterministic;
    // must be safe to call concurrently when the search uses threads > 1.
    virtual double evaluate(const rope::RescaleFactors& genome) = 0;
};

// Adapts a callable to FitnessOracle.
class FunctionOracle final : public FitnessOracle {
public:
    explicit FunctionOracle(std::function<double(const rope::RescaleFactors&)> fn) : fn_(std::move(fn)) {}
    double evaluate(const rope::RescaleFactors& genome) override { return fn_(genome); }

private:
    std::function<double(const rope::RescaleFactors&)> fn_;
};

// PI, NTK and YaRN at ratio s, snapped to the grid.
std::vector<Individual> baseline_seeds(const SearchSpace& space);

// Seeds first, then P - seeds.size() grid-snapped mutants of them.
// Throws ConfigError for P < 3.
Population seed_population(const SearchSpace& space, const std::vector<Individual>& seeds, const SearchConfig& sc);
Population seed_population(const rope::RotaryConfig& cfg, double s, const SearchConfig& sc);

rope::RescaleFactors mutate(const rope::RescaleFactors& parent, const SearchSpace& space, double p,
                            std::uint64_t stream_seed);
// Throws ShapeError when the parents differ in dimension or target length.
rope::RescaleFactors crossover(const rope::RescaleFactors& a, const rope::RescaleFactors& b, const SearchSpace& space,
                               std::uint64_t stream_seed);

struct HistoryRow {
    int iteration = 0;
    double best_ppl = 0.0;
    double median_ppl = 0.0;
    std::int64_t evals_total = 0;
};

struct SearchResult {
    Individual best;
    std::vector<HistoryRow> history;
    std::vector<Individual> seeds;  // with fitness
    std::int64_t evaluations = 0;
};

// Oracle failure aborts the search; the history completed so far travels along.
class SearchError : public Error {
public:
    SearchError(const std::string& what, std::vector<HistoryRow> partial)
        : Error(what), history(std::move(partial)) {}
    std::vector<HistoryRow> history;
};

using IterationCallback = std::function<void(const HistoryRow&)>;

SearchResult run_search(FitnessOracle& oracle, const SearchSpace& space, const std::vector<Individual>& seeds,
                        const SearchConfig& sc, const IterationCallback& on_iteration = {});
SearchResult run_search(FitnessOracle& oracle, const rope::RotaryConfig& cfg, double s, const SearchConfig& sc,
                        const IterationCallback& on_iteration = {});

// CSV iteration,best_ppl,median_ppl,evals_total.
void write_history(const std::filesystem::path& path, const std::vector<HistoryRow>& history);
std::vector<HistoryRow> read_history(const std::filesystem::path& path);

// Search config, seed, seed fitnesses and the winner's fitness.
void write_sidecar(const std::filesystem::path& path, const SearchResult& result, const SearchConfig& sc,
                   const SearchSpace& space);

struct SidecarSummary {
    double best_ppl = 0.0;
    std::vector<std::pair<std::string, double>> seed_ppl;
};
SidecarSummary read_sidecar(const std::filesystem::path& path);

}  // namespace ropeforge::search
