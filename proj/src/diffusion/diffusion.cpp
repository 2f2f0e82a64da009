#include "idfuse/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "idfuse/errors.hpp"

namespace idfuse {

double NoiseSchedule::alpha_bar_at(int t) const {
    if (t == 0) return 1.0;
    if (t < 0 || t > steps) throw InputError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps) + "]");
    return alpha_bar[static_cast<std::size_t>(t - 1)];
}

NoiseSchedule make_noise_schedule(int steps, double beta_start, double beta_end) {
    if (steps < 2) throw InputError("schedule needs at least 2 steps");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw InputError("schedule requires 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.steps = steps;
    s.beta.resize(static_cast<std::size_t>(steps));
    s.alpha_bar.resize(static_cast<std::size_t>(steps));
    double prod = 1.0;
    for (int i = 0; i < steps; ++i) {
        const double b = beta_start + (beta_end - beta_start) * i / (steps - 1);
        s.beta[static_cast<std::size_t>(i)] = b;
        prod *= 1.0 - b;
        s.alpha_bar[static_cast<std::size_t>(i)] = prod;
    }
    return s;
}

Latent gaussian_latent(std::size_t height, std::size_t width, std::size_t channels, std::mt19937_64& rng) {
    Latent z{height, width, Matrix<float>(height * width, channels)};
    std::normal_distribution<float> n(0.f, 1.f);
    for (auto& v : z.data.storage()) v = n(rng);
    return z;
}

namespace {

template <class T>
void require_same(const BasicLatent<T>& a, const BasicLatent<T>& b, const char* op) {
    if (a.height != b.height || a.width != b.width || !a.data.same_shape(b.data))
        throw ShapeError(std::string(op) + ": latent shapes differ");
}

template <class T>
BasicLatent<T> affine(const BasicLatent<T>& a, double ca, const BasicLatent<T>& b, double cb) {
    BasicLatent<T> out{a.height, a.width, Matrix<T>(a.data.rows(), a.data.cols())};
    for (std::size_t i = 0; i < a.data.size(); ++i)
        out.data.data()[i] = static_cast<T>(ca * a.data.data()[i] + cb * b.data.data()[i]);
    return out;
}

}  // namespace

template <class T>
BasicLatent<T> q_sample(const BasicLatent<T>& z0, int t, const BasicLatent<T>& eps, const NoiseSchedule& sched) {
    require_same(z0, eps, "q_sample");
    if (t < 0 || t > sched.steps) throw InputError("q_sample: t must be in [0, T]");
    const double ab = sched.alpha_bar_at(t);
    return affine(z0, std::sqrt(ab), eps, std::sqrt(1.0 - ab));
}

template <class T>
BasicLatent<T> predict_x0(const BasicLatent<T>& z_t, const BasicLatent<T>& eps_hat, int t, const NoiseSchedule& sched) {
    require_same(z_t, eps_hat, "predict_x0");
    const double ab = sched.alpha_bar_at(t);
    return affine(z_t, 1.0 / std::sqrt(ab), eps_hat, -std::sqrt(1.0 - ab) / std::sqrt(ab));
}

template <class T>
BasicLatent<T> ddim_step(const BasicLatent<T>& z_t, const BasicLatent<T>& eps_hat, int t, int t_prev,
                         const NoiseSchedule& sched) {
    require_same(z_t, eps_hat, "ddim_step");
    if (!(t > t_prev && t_prev >= 0) || t > sched.steps)
        throw InputError("ddim_step requires T >= t > t_prev >= 0, got t=" + std::to_string(t) +
                         " t_prev=" + std::to_string(t_prev));
    const double ab = sched.alpha_bar_at(t), ab_prev = sched.alpha_bar_at(t_prev);
    BasicLatent<T> out{z_t.height, z_t.width, Matrix<T>(z_t.data.rows(), z_t.data.cols())};
    const double s = std::sqrt(1.0 - ab), r = std::sqrt(ab);
    const double a_prev = std::sqrt(ab_prev), s_prev = std::sqrt(1.0 - ab_prev);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        const double e = eps_hat.data.data()[i];
        const double x0 = (z_t.data.data()[i] - s * e) / r;
        out.data.data()[i] = static_cast<T>(a_prev * x0 + s_prev * e);
    }
    return out;
}

#define IDFUSE_INSTANTIATE(T)                                                                                      \
    template BasicLatent<T> q_sample(const BasicLatent<T>&, int, const BasicLatent<T>&, const NoiseSchedule&);     \
    template BasicLatent<T> predict_x0(const BasicLatent<T>&, const BasicLatent<T>&, int, const NoiseSchedule&);   \
    template BasicLatent<T> ddim_step(const BasicLatent<T>&, const BasicLatent<T>&, int, int, const NoiseSchedule&);
IDFUSE_INSTANTIATE(float)
IDFUSE_INSTANTIATE(double)
#undef IDFUSE_INSTANTIATE

std::vector<int> ddim_timesteps(const NoiseSchedule& sched, int count) {
    if (count < 1) throw InputError("sampler needs at least one step");
    if (count > sched.steps) throw InputError("more sampler steps than schedule steps");
    std::vector<int> ts(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const double frac = count == 1 ? 0.0 : static_cast<double>(i) / (count - 1);
        ts[static_cast<std::size_t>(i)] = static_cast<int>(std::lround(sched.steps - frac * (sched.steps - 1)));
    }
    return ts;
}

Latent encode_latent(const Image& img, std::size_t factor, std::size_t channels) {
    if (channels < 3) throw InputError("latent needs at least 3 channels");
    const Image pooled = downsample_box(img, factor);
    Latent z{pooled.height, pooled.width, Matrix<float>(pooled.height * pooled.width, channels)};
    for (std::size_t p = 0; p < pooled.height * pooled.width; ++p) {
        float mean = 0;
        for (std::size_t c = 0; c < 3; ++c) {
            const float v = 2.f * pooled.pixels[p * 3 + c] - 1.f;
            z.data(p, c) = v;
            mean += v;
        }
        for (std::size_t c = 3; c < channels; ++c) z.data(p, c) = mean / 3.f;
    }
    return z;
}

Image decode_latent(const Latent& z, std::size_t factor) {
    if (z.channels() < 3) throw ShapeError("latent needs at least 3 channels to decode");
    if (factor == 0) throw InputError("decode factor must be positive");
    Image img(z.height * factor, z.width * factor);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
            const std::size_t p = (y / factor) * z.width + x / factor;
            for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = std::clamp((z.data(p, c) + 1.f) / 2.f, 0.f, 1.f);
        }
    return img;
}

}  // namespace idfuse
