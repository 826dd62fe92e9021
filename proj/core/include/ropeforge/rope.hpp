#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ropeforge::rope {

// Geometry of the rotary embedding for one attention head.
struct RotaryConfig {
    int head_dim = 32;
    double base = 10000.0;
    int original_len = 128;

    int pairs() const { return head_dim / 2; }
    // beta = base^(2/d); frequency(i) = base^(-2i/d) = beta^(-i).
    double beta() const;
    double frequency(int i) const;
    std::vector<double> frequencies() const;

    // Throws ConfigError when d is odd or < 2, base <= 1, or original_len < 1.
    void validate() const;

    bool operator==(const RotaryConfig&) const = default;
};

// Per-pair divisors applied to rotary angles at positions >= start_token.
// factors[i] = 1 keeps the original angle (extrapolation); factors[i] = s
// reproduces linear position interpolation for that pair.
struct RescaleFactors {
    std::vector<double> factors;
    std::int64_t start_token = 0;
    std::int64_t target_len = 0;
    double extension_ratio = 1.0;

    // Builds an instance with extension_ratio = target_len / original_len.
    static RescaleFactors make(std::vector<double> factors, std::int64_t start_token,
                               std::int64_t target_len, int original_len);

    bool operator==(const RescaleFactors&) const = default;
};

// All-ones factors: original RoPE, allowed to run out to target_len.
RescaleFactors identity_factors(const RotaryConfig& cfg, std::int64_t target_len);

std::vector<double> rope_angles(const RotaryConfig& cfg, std::int64_t n);

// angle_i = n * theta_i when n < start_token, otherwise n * theta_i / factors[i].
std::vector<double> rescaled_angles(const RotaryConfig& cfg, const RescaleFactors& rf,
                                    std::int64_t n);

// Rotates each pair (v[2i], v[2i+1]) by angle_i. rf == nullptr means plain RoPE.
// Throws ShapeError when v.size() != head_dim.
std::vector<double> apply_rope(const RotaryConfig& cfg, const RescaleFactors* rf,
                               std::span<const double> v, std::int64_t n);

// --- baseline factor generators -------------------------------------------

// Linear interpolation: every pair divided by s. Throws InputError for s < 1.
RescaleFactors pi_factors(const RotaryConfig& cfg, double s);

// NTK-aware: factors[i] = s^(2i/(d-2)); first pair extrapolates, last
// pair interpolates by s. Requires d >= 4.
RescaleFactors ntk_factors(const RotaryConfig& cfg, double s);

// Three-group blend by wavelength. gamma_i = clamp((L/w_i - low)/(high - low), 0, 1)
// with w_i = 2*pi*beta^i, then factors[i] = 1 / ((1 - gamma_i)/s + gamma_i).
RescaleFactors yarn_factors(const RotaryConfig& cfg, double s, double ramp_low = 1.0,
                            double ramp_high = 32.0);

enum class DynamicBase { pi, ntk };

// Recomputes the generator at s' = max(1, current_len / L).
RescaleFactors dynamic_factors(DynamicBase generator, const RotaryConfig& cfg,
                               std::int64_t current_len);

// --- validation -------------------------------------------------------------

enum class ViolationKind { length, non_finite, below_min, above_max, not_monotone, start_token };

struct FactorViolation {
    ViolationKind kind;
    std::int64_t index;  // first offending pair, or -1 for whole-object checks
    std::string message;
};

// Bounds are [1, 1.25 * extension_ratio]. Never throws.
std::optional<FactorViolation> validate_factors(const RescaleFactors& rf, bool require_monotone,
                                                std::optional<int> expected_pairs = std::nullopt);

double max_factor_bound(double extension_ratio);

const char* to_string(ViolationKind kind);

}  // namespace ropeforge::rope
