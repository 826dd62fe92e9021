#include "ropeforge/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "random.hpp"
#include "ropeforge/error.hpp"
#include "ropeforge/parallel.hpp"

namespace ropeforge::model {

double TrainConfig::lr_at(int t) const {
    if (warmup_steps > 0 && t < warmup_steps) {
        return learning_rate * static_cast<double>(t + 1) / static_cast<double>(warmup_steps);
    }
    if (schedule == LrSchedule::constant) return learning_rate;
    const int decay_steps = std::max(1, steps - warmup_steps);
    const double frac = static_cast<double>(t - warmup_steps) / static_cast<double>(decay_steps);
    return learning_rate * std::max(0.0, 1.0 - frac);
}

TrainResult train(ModelCheckpoint ckpt, const corpus::Corpus& corpus, const TrainConfig& tc,
                  const rope::RescaleFactors* rf, const StepCallback& on_step) {
    if (tc.steps < 1) throw ConfigError("training needs steps >= 1");
    if (tc.batch_size < 1) throw ConfigError("training needs batch_size >= 1");
    if (tc.seq_len < 2) throw ConfigError("training needs seq_len >= 2");
    ckpt.validate();
    const ModelConfig& cfg = ckpt.config;
    if (tc.seq_len > context_limit(cfg, rf)) {
        throw LengthError("training seq_len " + std::to_string(tc.seq_len) + " exceeds context limit " +
                          std::to_string(context_limit(cfg, rf)));
    }
    const auto chunk_range = corpus::chunks(corpus, corpus::Split::train, tc.seq_len);
    if (chunk_range.size() == 0) {
        throw DataError("training corpus yields no chunk of length " + std::to_string(tc.seq_len));
    }

    const std::size_t n_params = ckpt.params.total_size();
    std::vector<float> m(n_params, 0.0f), v(n_params, 0.0f);
    TrainResult result;
    result.log.reserve(static_cast<std::size_t>(tc.steps));

    std::vector<TokenSeq> batch(static_cast<std::size_t>(tc.batch_size), TokenSeq(static_cast<std::size_t>(tc.seq_len)));
    std::vector<LossAndGrads<float>> per_seq(batch.size());

    for (int step = 0; step < tc.steps; ++step) {
        rnd::Engine g(rnd::derive(tc.seed, {0x7A1, static_cast<std::uint64_t>(step)}));
        for (auto& seq : batch) chunk_range.materialize_into(rnd::below(g, chunk_range.size()), seq);

        parallel_for(batch.size(), tc.threads, [&](std::size_t i) {
            per_seq[i] = loss_and_grads<float>(cfg, ckpt.params, batch[i], rf);
        });

        double loss = 0.0;
        for (const auto& r : per_seq) loss += r.loss;
        loss /= static_cast<double>(batch.size());
        if (!std::isfinite(loss)) {
            std::ostringstream os;
            os << "training diverged at step " << step << " (loss " << loss << ")";
            throw DivergenceError(os.str());
        }

        // Mean gradient, reduced in batch order.
        std::vector<double> grad(n_params, 0.0);
        for (const auto& r : per_seq) {
            std::size_t off = 0;
            for (const auto& t : r.grads.tensors) {
                for (float x : t.data) grad[off++] += x;
            }
        }
        double norm2 = 0.0;
        for (double& x : grad) {
            x /= static_cast<double>(batch.size());
            norm2 += x * x;
        }
        const double norm = std::sqrt(norm2);
        if (!std::isfinite(norm)) throw DivergenceError("non-finite gradient at step " + std::to_string(step));
        const double clip = (tc.grad_clip > 0.0 && norm > tc.grad_clip) ? tc.grad_clip / norm : 1.0;

        const double lr = tc.lr_at(step);
        const double bc1 = 1.0 - std::pow(tc.beta1, step + 1);
        const double bc2 = 1.0 - std::pow(tc.beta2, step + 1);
        std::size_t off = 0;
        for (auto& t : ckpt.params.tensors) {
            for (float& p : t.data) {
                const double gi = grad[off] * clip;
                m[off] = static_cast<float>(tc.beta1 * m[off] + (1.0 - tc.beta1) * gi);
                v[off] = static_cast<float>(tc.beta2 * v[off] + (1.0 - tc.beta2) * gi * gi);
                const double mhat = m[off] / bc1;
                const double vhat = v[off] / bc2;
                p = static_cast<float>(p - lr * mhat / (std::sqrt(vhat) + tc.eps));
                ++off;
            }
        }

        TrainLogRow row{ckpt.train_steps + step, loss, lr};
        result.log.push_back(row);
        if (on_step) on_step(row);
    }

    ckpt.train_steps += tc.steps;
    ckpt.rescale_used = rf ? std::optional<rope::RescaleFactors>(*rf) : std::nullopt;
    result.checkpoint = std::move(ckpt);
    return result;
}

TrainResult finetune_progressive(const ModelCheckpoint& base, const rope::RescaleFactors& rf1, int steps1,
                                 const rope::RescaleFactors& rf2, int steps2, const corpus::Corpus& corpus,
                                 const TrainConfig& tc, const StepCallback& on_step) {
    if (rf1.target_len >= rf2.target_len) {
        throw ConfigError("progressive fine-tune needs rf1.target_len < rf2.target_len");
    }
    if (steps1 < 1 || steps2 < 1) throw ConfigError("both fine-tune stages need steps >= 1");

    TrainConfig first = tc;
    first.steps = steps1;
    first.seq_len = static_cast<int>(rf1.target_len);
    first.seed = rnd::derive(tc.seed, {1});
    TrainResult a = train(base, corpus, first, &rf1, on_step);

    TrainConfig second = tc;
    second.steps = steps2;
    second.seq_len = static_cast<int>(rf2.target_len);
    second.seed = rnd::derive(tc.seed, {2});
    TrainResult b = train(std::move(a.checkpoint), corpus, second, &rf2, on_step);

    a.log.insert(a.log.end(), b.log.begin(), b.log.end());
    b.log = std::move(a.log);
    return b;
}

void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& log) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "step,loss,lr\n" << std::setprecision(17);
    for (const auto& r : log) out << r.step << ',' << r.loss << ',' << r.lr << '\n';
}

}  // namespace ropeforge::model
