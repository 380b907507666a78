#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mixtable/common.hpp"
#include "mixtable/tensor.hpp"

namespace mixtable {

// Discrete-time noise schedule: per-step betas, cumulative alpha-bar, and the
// evenly strided timestep subsequence the deterministic sampler walks.
struct NoiseSchedule {
    int t_train = 0;
    std::vector<double> betas;
    std::vector<double> alphas_bar;
    std::vector<int> inference_steps;  // strictly decreasing, ends at 0

    double alpha_bar(int t) const {
        if (t < 0 || t >= t_train)
            throw Error(concat("timestep ", t, " outside [0, ", t_train, ")"));
        return alphas_bar[t];
    }

    void validate() const {
        if (t_train <= 0 || betas.size() != static_cast<size_t>(t_train) ||
            alphas_bar.size() != static_cast<size_t>(t_train))
            throw Error("noise schedule: inconsistent sizes");
        for (double b : betas) {
            if (!(b > 0.0 && b < 1.0)) throw Error(concat("beta ", b, " outside (0, 1)"));
        }
        for (size_t t = 1; t < alphas_bar.size(); ++t) {
            if (!(alphas_bar[t] < alphas_bar[t - 1]))
                throw Error("alpha_bar must be strictly decreasing");
        }
        if (inference_steps.empty() || inference_steps.back() != 0)
            throw Error("inference steps must end at 0");
        for (size_t i = 1; i < inference_steps.size(); ++i) {
            if (inference_steps[i] >= inference_steps[i - 1])
                throw Error("inference steps must be strictly decreasing");
        }
        if (inference_steps.front() >= t_train) throw Error("inference step out of range");
    }
};

inline NoiseSchedule build_schedule(int t_train, int t_infer, const std::string& kind = "linear") {
    if (t_train < 1) throw ConfigError(concat("t_train = ", t_train, " must be >= 1"));
    if (t_infer < 1 || t_infer > t_train)
        throw ConfigError(concat("t_infer = ", t_infer, " outside [1, ", t_train, "]"));
    if (kind != "linear") throw ConfigError(concat("unknown schedule kind '", kind, "'"));

    NoiseSchedule s;
    s.t_train = t_train;
    s.betas.resize(t_train);
    s.alphas_bar.resize(t_train);
    const double beta_min = 1e-4, beta_max = 0.02;
    double cum = 1.0;
    for (int t = 0; t < t_train; ++t) {
        const double frac = t_train == 1 ? 0.0 : static_cast<double>(t) / (t_train - 1);
        s.betas[t] = beta_min + (beta_max - beta_min) * frac;
        cum *= 1.0 - s.betas[t];
        s.alphas_bar[t] = cum;
    }
    // evenly strided subsequence, walked high to low
    const int stride = t_train / t_infer;
    s.inference_steps.resize(t_infer);
    for (int i = 0; i < t_infer; ++i) s.inference_steps[i] = (t_infer - 1 - i) * stride;
    s.validate();
    return s;
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline double forward_noise(double x0, int t, double eps, const NoiseSchedule& s) {
    const double ab = s.alpha_bar(t);
    return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

template <typename Real>
std::vector<Real> forward_noise(const std::vector<Real>& x0, int t, const std::vector<Real>& eps,
                                const NoiseSchedule& s) {
    if (x0.size() != eps.size())
        throw Error(concat("forward_noise: x0 has ", x0.size(), " values, eps has ", eps.size()));
    const double ab = s.alpha_bar(t);
    const Real ca = static_cast<Real>(std::sqrt(ab));
    const Real ce = static_cast<Real>(std::sqrt(1.0 - ab));
    std::vector<Real> out(x0.size());
    for (size_t i = 0; i < x0.size(); ++i) out[i] = ca * x0[i] + ce * eps[i];
    return out;
}

// Deterministic reverse step (eta = 0): recover the implied noise from the
// x0 prediction, then re-noise to the earlier timestep.
//   eps_hat = (x_t - sqrt(abar_t) x0_pred) / sqrt(1 - abar_t)
//   x_prev  = sqrt(abar_prev) x0_pred + sqrt(1 - abar_prev) eps_hat
template <typename Real>
std::vector<Real> ddim_step(const std::vector<Real>& x_t, const std::vector<Real>& x0_pred,
                            int t, int t_prev, const NoiseSchedule& s, double eta = 0.0) {
    if (eta != 0.0) throw ConfigError("ddim_step: only eta = 0 (deterministic) is supported");
    if (t_prev >= t || t_prev < 0)
        throw Error(concat("ddim_step: need t > t_prev >= 0, got t = ", t, ", t_prev = ", t_prev));
    if (x_t.size() != x0_pred.size())
        throw Error(concat("ddim_step: x_t has ", x_t.size(), " values, x0_pred has ", x0_pred.size()));
    const double ab_t = s.alpha_bar(t);
    const double ab_p = s.alpha_bar(t_prev);
    const double sa_t = std::sqrt(ab_t), se_t = std::sqrt(1.0 - ab_t);
    const double sa_p = std::sqrt(ab_p), se_p = std::sqrt(1.0 - ab_p);
    std::vector<Real> out(x_t.size());
    for (size_t i = 0; i < x_t.size(); ++i) {
        const double eps_hat = (static_cast<double>(x_t[i]) - sa_t * static_cast<double>(x0_pred[i])) / se_t;
        out[i] = static_cast<Real>(sa_p * static_cast<double>(x0_pred[i]) + se_p * eps_hat);
    }
    return out;
}

inline double ddim_step(double x_t, double x0_pred, int t, int t_prev, const NoiseSchedule& s,
                        double eta = 0.0) {
    return ddim_step(std::vector<double>{x_t}, std::vector<double>{x0_pred}, t, t_prev, s, eta)[0];
}

// Runs the full inference subsequence with a caller-supplied x0 predictor and
// returns the final x0 prediction (the t = 0 forward pass decides the sample).
template <typename Real, typename PredictX0>
std::vector<Real> ddim_sample_loop(const NoiseSchedule& s, std::vector<Real> x, PredictX0&& predict) {
    std::vector<Real> x0;
    for (size_t i = 0; i < s.inference_steps.size(); ++i) {
        const int t = s.inference_steps[i];
        x0 = predict(x, t);
        if (i + 1 < s.inference_steps.size()) {
            x = ddim_step(x, x0, t, s.inference_steps[i + 1], s);
        }
    }
    return x0;
}

// weighted mean of unit-norm category embeddings, weights on the simplex
template <typename Real>
std::vector<Real> score_interpolation(const std::vector<Real>& probs,
                                      const Tensor<Real>& unit_rows) {
    const int n = unit_rows.rows(), d = unit_rows.cols();
    if (static_cast<int>(probs.size()) != n)
        throw Error(concat("score_interpolation: ", probs.size(), " probs for ", n, " rows"));
    double sum = 0.0;
    for (Real p : probs) {
        if (p < Real(0)) throw NumericError("score_interpolation: negative probability");
        sum += static_cast<double>(p);
    }
    if (std::abs(sum - 1.0) > 1e-6)
        throw NumericError(concat("score_interpolation: probabilities sum to ", sum));
    std::vector<Real> out(d, Real(0));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out[j] += probs[i] * unit_rows.data[static_cast<size_t>(i) * d + j];
    return out;
}

// sinusoidal timestep features; even width, pairs of (sin, cos) at
// geometrically spaced frequencies, injective over integer t in [0, t_train)
inline std::vector<double> timestep_features(int t, int dim) {
    if (dim <= 0 || dim % 2 != 0) throw ConfigError(concat("timestep feature dim ", dim, " must be even"));
    std::vector<double> f(dim);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / half);
        f[2 * i] = std::sin(t * freq);
        f[2 * i + 1] = std::cos(t * freq);
    }
    return f;
}

}  // namespace mixtable
