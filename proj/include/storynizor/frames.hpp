#pragma once

#include <stdexcept>
#include <string>

#include "storynizor/tensor.hpp"

namespace storynizor {

enum class FrameLayout { PerFrame, Concatenated };

// Latents of B stories with N frames each. PerFrame: (B, N, H, W, C);
// Concatenated: (B*N, H, W, C) with frame n of story b at block b*N + n.
template <typename T>
struct FrameBatch {
    Tensor<T> latents;
    int64_t timestep = 0;
    FrameLayout layout = FrameLayout::PerFrame;
};

template <typename T>
FrameBatch<T> concat_frames(const FrameBatch<T>& batch) {
    if (batch.layout != FrameLayout::PerFrame)
        throw std::logic_error("concat_frames: batch is already concatenated (double fold)");
    const auto& s = batch.latents.shape;
    if (s.size() != 5) throw std::invalid_argument("concat_frames: expected (B, N, H, W, C), got " + shape_str(s));
    // Row-major storage already places the frames of a story contiguously.
    return {batch.latents.reshaped({s[0] * s[1], s[2], s[3], s[4]}), batch.timestep, FrameLayout::Concatenated};
}

template <typename T>
FrameBatch<T> split_frames(const FrameBatch<T>& batch, int frames) {
    if (batch.layout != FrameLayout::Concatenated) throw std::logic_error("split_frames: batch is not concatenated");
    const auto& s = batch.latents.shape;
    if (s.size() != 4) throw std::invalid_argument("split_frames: expected (B*N, H, W, C), got " + shape_str(s));
    if (frames <= 0 || s[0] % frames != 0)
        throw std::invalid_argument("split_frames: leading size " + std::to_string(s[0]) +
                                    " is not divisible by frame count " + std::to_string(frames));
    return {batch.latents.reshaped({s[0] / frames, frames, s[1], s[2], s[3]}), batch.timestep, FrameLayout::PerFrame};
}

}  // namespace storynizor
