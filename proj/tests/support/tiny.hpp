#pragma once

#include "storynizor/config.hpp"

namespace storynizor::testing {

// Smallest configuration that still has two levels, attention at both and
// the full injector path. Used where models run many times.
inline ModelConfig tiny_config() {
    ModelConfig c;
    c.image_size = 16;
    c.unet_channels = {8, 16};
    c.attention_levels = {0, 1};
    c.heads = 2;
    c.norm_groups = 2;
    c.text_width = 8;
    c.text_layers = 1;
    c.frames = 2;
    c.resampler_tokens = 2;
    c.resampler_blocks = 1;
    c.reference_size = 16;
    c.patch_size = 8;
    c.id_feature_dim = 8;
    c.condition_dropout = 0.0;
    c.validate();
    return c;
}

}  // namespace storynizor::testing
