#pragma once
// Adapter training: identity-enhanced (image condition only, text
// cross-attention off) or entangled (caption and image condition together).
// Only the trainable partition of the parameter store is ever written.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "idfuse/diffusion.hpp"
#include "idfuse/encoders.hpp"
#include "idfuse/synthetic.hpp"
#include "idfuse/unet.hpp"

namespace idfuse {

enum class TrainMode { identity_enhanced, entangled };

const char* to_string(TrainMode m);
TrainMode train_mode_from_string(const std::string& s);

struct TrainConfig {
    double learning_rate = 2e-3;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t batch_size = 4;
    std::size_t steps = 500;
    std::uint64_t seed = 0;
    TrainMode mode = TrainMode::identity_enhanced;

    bool operator==(const TrainConfig&) const = default;
};

void validate(const TrainConfig& cfg);

/// Encoded dataset: latents and raw identity features per image, caption
/// tokens per identity.
struct PreparedData {
    std::vector<std::vector<Latent>> latents;
    std::vector<std::vector<IdentityFeatures>> features;
    std::vector<Matrix<float>> captions;
    std::vector<TrainingPair> pairs;
};

PreparedData prepare_training_data(const Dataset& d, const Encoders& enc, std::size_t latent_factor,
                                   std::size_t latent_channels);

struct TrainSample {
    Latent z0;
    IdentityFeatures features;
    std::optional<Matrix<float>> caption;  // present only for entangled training
    int t = 1;
    Latent eps;
};

/// Uniform pairs, uniform t in [1, T], standard normal noise. Captions are
/// attached only in entangled mode.
std::vector<TrainSample> sample_batch(const PreparedData& data, TrainMode mode, std::size_t batch_size,
                                      const NoiseSchedule& sched, std::mt19937_64& rng);

/// Batch mean of the per-element mean squared noise-prediction error. With
/// `grads`, d loss / d param is accumulated into the buffers it holds.
double training_loss(const std::vector<TrainSample>& batch, const UNet& unet, TrainMode mode,
                     GradStore* grads = nullptr);

struct OptimizerState {
    std::int64_t step = 0;
    std::map<std::string, Matrix<float>> m, v;

    bool operator==(const OptimizerState&) const = default;
};

/// One AdamW update of every parameter that has a gradient buffer.
void adamw_step(ParamStore& params, const GradStore& grads, OptimizerState& state, const TrainConfig& cfg);

struct TrainResult {
    std::vector<double> losses;
    OptimizerState optimizer;
};

using ProgressFn = std::function<void(std::size_t step, double loss)>;

/// Throws NumericError on a non-finite loss, gradient or parameter.
TrainResult train(const PreparedData& data, ParamStore& params, const UNet& unet, const TrainConfig& cfg,
                  const ProgressFn& progress = {}, OptimizerState initial = {});

struct SmoothedLoss {
    double initial, final, ratio;
};

/// Means over the first and last max(1, n/10) steps.
SmoothedLoss smoothed_loss(const std::vector<double>& losses);

std::string loss_csv(const std::vector<double>& losses);
void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& losses);

}  // namespace idfuse
