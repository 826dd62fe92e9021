#include "ropeforge/rope.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "ropeforge/error.hpp"

namespace ropeforge::rope {

namespace {

// Slack for factors that land on the 1.25*s bound after grid arithmetic.
constexpr double kBoundSlack = 1e-9;

RescaleFactors with_generated(const RotaryConfig& cfg, double s, std::vector<double> factors) {
    RescaleFactors rf;
    rf.factors = std::move(factors);
    rf.start_token = 0;
    rf.target_len = std::llround(s * cfg.original_len);
    rf.extension_ratio = s;
    return rf;
}

void require_ratio(double s) {
    if (!(s >= 1.0) || !std::isfinite(s)) {
        std::ostringstream os;
        os << "extension ratio must be >= 1, got " << s;
        throw InputError(os.str());
    }
}

}  // namespace

double RotaryConfig::beta() const { return std::pow(base, 2.0 / head_dim); }

double RotaryConfig::frequency(int i) const {
    return std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
}

std::vector<double> RotaryConfig::frequencies() const {
    std::vector<double> out(static_cast<std::size_t>(pairs()));
    for (int i = 0; i < pairs(); ++i) out[static_cast<std::size_t>(i)] = frequency(i);
    return out;
}

void RotaryConfig::validate() const {
    if (head_dim < 2 || head_dim % 2 != 0) {
        throw ConfigError("rotary head_dim must be even and >= 2, got " + std::to_string(head_dim));
    }
    if (!(base > 1.0) || !std::isfinite(base)) {
        throw ConfigError("rotary base must be > 1");
    }
    if (original_len < 1) {
        throw ConfigError("original_len must be positive");
    }
}

RescaleFactors RescaleFactors::make(std::vector<double> factors, std::int64_t start_token,
                                    std::int64_t target_len, int original_len) {
    if (original_len < 1) throw ConfigError("original_len must be positive");
    RescaleFactors rf;
    rf.factors = std::move(factors);
    rf.start_token = start_token;
    rf.target_len = target_len;
    rf.extension_ratio = static_cast<double>(target_len) / static_cast<double>(original_len);
    return rf;
}

RescaleFactors identity_factors(const RotaryConfig& cfg, std::int64_t target_len) {
    return RescaleFactors::make(std::vector<double>(static_cast<std::size_t>(cfg.pairs()), 1.0), 0,
                                target_len, cfg.original_len);
}

std::vector<double> rope_angles(const RotaryConfig& cfg, std::int64_t n) {
    std::vector<double> out(static_cast<std::size_t>(cfg.pairs()));
    const double pos = static_cast<double>(n);
    for (int i = 0; i < cfg.pairs(); ++i) out[static_cast<std::size_t>(i)] = pos * cfg.frequency(i);
    return out;
}

std::vector<double> rescaled_angles(const RotaryConfig& cfg, const RescaleFactors& rf,
                                    std::int64_t n) {
    if (rf.factors.size() != static_cast<std::size_t>(cfg.pairs())) {
        throw ShapeError("rescale factor count " + std::to_string(rf.factors.size()) +
                         " does not match head_dim/2 = " + std::to_string(cfg.pairs()));
    }
    std::vector<double> out = rope_angles(cfg, n);
    if (n < rf.start_token) return out;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= rf.factors[i];
    return out;
}

std::vector<double> apply_rope(const RotaryConfig& cfg, const RescaleFactors* rf,
                               std::span<const double> v, std::int64_t n) {
    if (v.size() != static_cast<std::size_t>(cfg.head_dim)) {
        throw ShapeError("apply_rope expects a vector of length " + std::to_string(cfg.head_dim) +
                         ", got " + std::to_string(v.size()));
    }
    const std::vector<double> angles = rf ? rescaled_angles(cfg, *rf, n) : rope_angles(cfg, n);
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < angles.size(); ++i) {
        const double c = std::cos(angles[i]);
        const double s = std::sin(angles[i]);
        const double x = v[2 * i];
        const double y = v[2 * i + 1];
        out[2 * i] = x * c - y * s;
        out[2 * i + 1] = x * s + y * c;
    }
    return out;
}

RescaleFactors pi_factors(const RotaryConfig& cfg, double s) {
    require_ratio(s);
    return with_generated(cfg, s, std::vector<double>(static_cast<std::size_t>(cfg.pairs()), s));
}

RescaleFactors ntk_factors(const RotaryConfig& cfg, double s) {
    require_ratio(s);
    if (cfg.head_dim < 4) throw InputError("NTK factors need head_dim >= 4");
    const int pairs = cfg.pairs();
    std::vector<double> f(static_cast<std::size_t>(pairs));
    for (int i = 0; i < pairs; ++i) {
        f[static_cast<std::size_t>(i)] = std::pow(s, 2.0 * i / static_cast<double>(cfg.head_dim - 2));
    }
    return with_generated(cfg, s, std::move(f));
}

RescaleFactors yarn_factors(const RotaryConfig& cfg, double s, double ramp_low, double ramp_high) {
    require_ratio(s);
    if (!(ramp_low > 0.0) || !(ramp_low < ramp_high)) {
        throw InputError("YaRN ramp requires 0 < low < high");
    }
    const double beta = cfg.beta();
    std::vector<double> f(static_cast<std::size_t>(cfg.pairs()));
    for (int i = 0; i < cfg.pairs(); ++i) {
        const double wavelength = 2.0 * std::numbers::pi * std::pow(beta, i);
        const double ratio = cfg.original_len / wavelength;
        const double gamma = std::clamp((ratio - ramp_low) / (ramp_high - ramp_low), 0.0, 1.0);
        f[static_cast<std::size_t>(i)] = 1.0 / ((1.0 - gamma) / s + gamma);
    }
    return with_generated(cfg, s, std::move(f));
}

RescaleFactors dynamic_factors(DynamicBase generator, const RotaryConfig& cfg,
                               std::int64_t current_len) {
    if (current_len < 1) throw InputError("current_len must be >= 1");
    const double s = std::max(1.0, static_cast<double>(current_len) / cfg.original_len);
    return generator == DynamicBase::pi ? pi_factors(cfg, s) : ntk_factors(cfg, s);
}

double max_factor_bound(double extension_ratio) { return 1.25 * extension_ratio; }

std::optional<FactorViolation> validate_factors(const RescaleFactors& rf, bool require_monotone,
                                                std::optional<int> expected_pairs) {
    auto fail = [](ViolationKind kind, std::int64_t index, std::string msg) {
        return std::optional<FactorViolation>(FactorViolation{kind, index, std::move(msg)});
    };
    if (rf.factors.empty() ||
        (expected_pairs && rf.factors.size() != static_cast<std::size_t>(*expected_pairs))) {
        return fail(ViolationKind::length, -1,
                    "expected " + std::to_string(expected_pairs.value_or(0)) + " factors, got " +
                        std::to_string(rf.factors.size()));
    }
    if (rf.start_token < 0 || rf.start_token >= rf.target_len) {
        return fail(ViolationKind::start_token, -1,
                    "start_token " + std::to_string(rf.start_token) + " outside [0, " +
                        std::to_string(rf.target_len) + ")");
    }
    const double upper = max_factor_bound(rf.extension_ratio);
    for (std::size_t i = 0; i < rf.factors.size(); ++i) {
        const double f = rf.factors[i];
        const auto idx = static_cast<std::int64_t>(i);
        if (!std::isfinite(f)) return fail(ViolationKind::non_finite, idx, "factor is not finite");
        if (f < 1.0 - kBoundSlack) {
            return fail(ViolationKind::below_min, idx, "factor " + std::to_string(f) + " < 1.0");
        }
        if (f > upper * (1.0 + kBoundSlack)) {
            return fail(ViolationKind::above_max, idx,
                        "factor " + std::to_string(f) + " > 1.25*s = " + std::to_string(upper));
        }
    }
    if (require_monotone) {
        for (std::size_t i = 1; i < rf.factors.size(); ++i) {
            if (rf.factors[i] < rf.factors[i - 1]) {
                return fail(ViolationKind::not_monotone, static_cast<std::int64_t>(i),
                            "factor " + std::to_string(i) + " decreases");
            }
        }
    }
    return std::nullopt;
}

const char* to_string(ViolationKind kind) {
    switch (kind) {
        case ViolationKind::length: return "length";
        case ViolationKind::non_finite: return "non_finite";
        case ViolationKind::below_min: return "below_min";
        case ViolationKind::above_max: return "above_max";
        case ViolationKind::not_monotone: return "not_monotone";
        case ViolationKind::start_token: return "start_token";
    }
    return "unknown";
}

}  // namespace ropeforge::rope
