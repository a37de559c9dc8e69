#pragma once

#include <string>
#include <vector>

#include "json.hpp"

namespace storynizor {

// Architecture and run constants. Fields marked structural must agree between
// a checkpoint and the model that loads it.
struct ModelConfig {
    // Geometry (structural).
    int image_size = 64;
    int image_channels = 3;
    int latent_factor = 2;  // space-to-depth factor of the fixed image codec
    std::vector<int> unet_channels{64, 128, 128};
    std::vector<int> attention_levels{1, 2};
    int heads = 4;
    int norm_groups = 8;
    int text_width = 64;
    int text_length = 16;
    int text_layers = 1;
    int frames = 4;
    int resampler_tokens = 16;
    int resampler_blocks = 2;
    int reference_size = 32;
    int patch_size = 8;
    int id_feature_dim = 64;
    int train_timesteps = 1000;

    // Synchronizer and loss.
    bool use_amsa = true;
    double mask_loss_weight = 0.1;  // alpha
    double mask_eps = 1e-6;

    // Diffusion.
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int sample_steps = 30;
    double guidance_scale = 7.0;
    double condition_dropout = 0.05;
    bool clip_sample = true;

    // Optimization.
    double lr_base = 1e-3;
    double lr_synchronizer = 5e-5;
    double lr_injector = 1e-4;
    double weight_decay = 1e-2;

    int latent_size() const { return image_size / latent_factor; }
    int latent_channels() const { return image_channels * latent_factor * latent_factor; }
    int resampler_width() const { return text_width; }
    int levels() const { return static_cast<int>(unet_channels.size()); }
    bool has_attention(int level) const;

    // Throws std::invalid_argument on the first violated invariant.
    void validate() const;

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    static ModelConfig load(const std::string& path);

    // Names of structural fields whose values differ.
    std::vector<std::string> structural_differences(const ModelConfig& other) const;
};

}  // namespace storynizor
