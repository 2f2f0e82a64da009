#pragma once
// Noise schedule, forward noising, the deterministic DDIM update and the stub
// latent codec.

#include <cstddef>
#include <random>
#include <vector>

#include "idfuse/image.hpp"
#include "idfuse/matrix.hpp"

namespace idfuse {

struct NoiseSchedule {
    int steps = 0;                   // T
    std::vector<double> beta;        // beta[t-1] for t = 1..T
    std::vector<double> alpha_bar;   // alpha_bar[t-1]

    /// alpha_bar_t with alpha_bar_0 = 1.
    double alpha_bar_at(int t) const;
};

/// Linear beta from beta_start to beta_end over T steps.
NoiseSchedule make_noise_schedule(int steps, double beta_start, double beta_end);

/// Latent grid: data is [height*width x channels], row index y*width + x.
template <class T>
struct BasicLatent {
    std::size_t height = 0;
    std::size_t width = 0;
    Matrix<T> data;

    std::size_t channels() const { return data.cols(); }
    template <class U>
    BasicLatent<U> cast() const { return {height, width, data.template cast<U>()}; }
    bool operator==(const BasicLatent&) const = default;
};

using Latent = BasicLatent<float>;
using Latent64 = BasicLatent<double>;  // for checking the sampler algebra at 64-bit

Latent gaussian_latent(std::size_t height, std::size_t width, std::size_t channels, std::mt19937_64& rng);

/// sqrt(ab_t) z0 + sqrt(1 - ab_t) eps.
template <class T>
BasicLatent<T> q_sample(const BasicLatent<T>& z0, int t, const BasicLatent<T>& eps, const NoiseSchedule& sched);

/// Clean-latent estimate implied by an epsilon prediction.
template <class T>
BasicLatent<T> predict_x0(const BasicLatent<T>& z_t, const BasicLatent<T>& eps_hat, int t, const NoiseSchedule& sched);

/// Deterministic (eta = 0) DDIM update from t to t_prev < t.
template <class T>
BasicLatent<T> ddim_step(const BasicLatent<T>& z_t, const BasicLatent<T>& eps_hat, int t, int t_prev,
                         const NoiseSchedule& sched);

/// `count` strictly decreasing timesteps from T down to 1, evenly spaced.
std::vector<int> ddim_timesteps(const NoiseSchedule& sched, int count);

/// Average-pool by `factor`, map [0,1] -> [-1,1], then append channel means
/// until `channels` (>= 3) channels are filled.
Latent encode_latent(const Image& img, std::size_t factor = 2, std::size_t channels = 4);

/// Right inverse of encode_latent on the pooled grid: first three channels,
/// [-1,1] -> [0,1], clamp, nearest upsample by `factor`.
Image decode_latent(const Latent& z, std::size_t factor = 2);

}  // namespace idfuse
