#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "storynizor/autograd.hpp"
#include "storynizor/image.hpp"

namespace storynizor {

inline constexpr double kDiceSmoothing = 1e-6;

struct LossBreakdown {
    double ldm = 0;
    double mask_perceptual = 0;
    double total = 0;
    double alpha = 0;
};

// Mean squared error over all elements.
template <typename T>
Var<T> ldm_loss(const Var<T>& noise_pred, const Var<T>& noise_true);

// 1 - (2 sum(p g) + s) / (sum(p^2) + sum(g^2) + s) with s = kDiceSmoothing.
template <typename T>
Var<T> dice_term(const Var<T>& pred, const Tensor<T>& gt);

// maps: [K, H, W] accumulated character maps, frame-major. gt: one binary mask
// per map; an empty tensor marks a missing mask. Maps are bilinearly resized
// to the mask resolution when they differ. Returns the sum of Dice terms.
template <typename T>
Var<T> mask_perceptual_loss(const Var<T>& maps, const std::vector<Tensor<T>>& gt);

template <typename T>
struct TotalLoss {
    Var<T> value;
    LossBreakdown breakdown;
};

// total = ldm + alpha * mask
template <typename T>
TotalLoss<T> total_loss(const Var<T>& ldm, const Var<T>& mask_perceptual, double alpha);

// Area-average a 0/1 mask to (height, width) and threshold at 0.5.
Tensor<float> downsample_mask(const Image& mask, int height, int width);

struct MetricsRecord {
    int64_t step = 0;
    LossBreakdown loss;
};

// Plain-text metrics log, one "step ldm mask total" record per line.
class MetricsLog {
public:
    MetricsLog() = default;
    MetricsLog(const std::string& path, bool append);
    bool is_open() const { return out_.is_open(); }
    void write(int64_t step, const LossBreakdown& loss);

private:
    std::ofstream out_;
};

std::vector<MetricsRecord> read_metrics_log(const std::string& path);

}  // namespace storynizor
