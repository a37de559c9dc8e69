#include "storynizor/config.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace storynizor {

namespace {

#define STORYNIZOR_STRUCTURAL_FIELDS(X)                                                                \
    X(image_size) X(image_channels) X(latent_factor) X(unet_channels) X(attention_levels) X(heads)     \
    X(norm_groups) X(text_width) X(text_length) X(text_layers) X(frames) X(resampler_tokens)           \
    X(resampler_blocks) X(reference_size) X(patch_size) X(id_feature_dim) X(train_timesteps)

#define STORYNIZOR_RUN_FIELDS(X)                                                                       \
    X(use_amsa) X(mask_loss_weight) X(mask_eps) X(beta_start) X(beta_end) X(sample_steps)              \
    X(guidance_scale) X(condition_dropout) X(clip_sample) X(lr_base) X(lr_synchronizer) X(lr_injector) \
    X(weight_decay)

void check(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument("config: " + msg);
}

}  // namespace

bool ModelConfig::has_attention(int level) const {
    return std::find(attention_levels.begin(), attention_levels.end(), level) != attention_levels.end();
}

void ModelConfig::validate() const {
    check(mask_loss_weight >= 0, "mask_loss_weight (alpha) must be >= 0");
    check(mask_eps > 0 && mask_eps < 1, "mask_eps must lie in (0, 1)");
    check(condition_dropout >= 0 && condition_dropout <= 1, "condition_dropout must lie in [0, 1]");
    check(guidance_scale >= 1, "guidance_scale must be >= 1");
    check(frames >= 1, "frames must be >= 1");
    check(!unet_channels.empty(), "unet_channels must not be empty");
    check(image_size % latent_factor == 0, "image_size must be divisible by latent_factor");
    check(latent_size() % (1 << (levels() - 1)) == 0, "latent size must be divisible by 2^(levels-1)");
    for (int c : unet_channels) {
        check(c % heads == 0, "channel widths must be divisible by heads");
        check(c % norm_groups == 0, "channel widths must be divisible by norm_groups");
    }
    for (int l : attention_levels) check(l >= 0 && l < levels(), "attention level out of range");
    check(text_width % heads == 0, "text_width must be divisible by heads");
    check(text_length >= 3, "text_length must be >= 3");
    check(reference_size % patch_size == 0, "reference_size must be divisible by patch_size");
    check(sample_steps >= 1 && sample_steps <= train_timesteps, "sample_steps must lie in [1, train_timesteps]");
    check(beta_start > 0 && beta_end < 1 && beta_start <= beta_end, "beta range must satisfy 0 < start <= end < 1");
    check(resampler_tokens >= 1 && resampler_blocks >= 1, "resampler needs >= 1 token and block");
}

nlohmann::json ModelConfig::to_json() const {
    nlohmann::json j;
#define X(f) j[#f] = f;
    STORYNIZOR_STRUCTURAL_FIELDS(X)
    STORYNIZOR_RUN_FIELDS(X)
#undef X
    return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    for (const auto& [key, _] : j.items()) {
        bool known = false;
#define X(f) known = known || key == #f;
        STORYNIZOR_STRUCTURAL_FIELDS(X)
        STORYNIZOR_RUN_FIELDS(X)
#undef X
        if (!known) throw std::invalid_argument("config: unknown key '" + key + "'");
    }
#define X(f) \
    if (j.contains(#f)) j.at(#f).get_to(c.f);
    STORYNIZOR_STRUCTURAL_FIELDS(X)
    STORYNIZOR_RUN_FIELDS(X)
#undef X
    c.validate();
    return c;
}

ModelConfig ModelConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    return from_json(nlohmann::json::parse(in));
}

std::vector<std::string> ModelConfig::structural_differences(const ModelConfig& other) const {
    std::vector<std::string> diff;
#define X(f) \
    if (f != other.f) diff.emplace_back(#f);
    STORYNIZOR_STRUCTURAL_FIELDS(X)
#undef X
    return diff;
}

}  // namespace storynizor
