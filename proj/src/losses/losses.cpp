#include "storynizor/losses.hpp"

#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace storynizor {

template <typename T>
Var<T> ldm_loss(const Var<T>& noise_pred, const Var<T>& noise_true) {
    if (noise_pred.shape() != noise_true.shape())
        throw std::invalid_argument("ldm_loss: shape mismatch " + shape_str(noise_pred.shape()) + " vs " +
                                    shape_str(noise_true.shape()));
    return ag::mse(noise_pred, noise_true);
}

template <typename T>
Var<T> dice_term(const Var<T>& pred, const Tensor<T>& gt) {
    if (pred.shape() != gt.shape)
        throw std::invalid_argument("dice_term: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                    shape_str(gt.shape));
    T gg = 0;
    for (T g : gt.data) gg += g * g;
    const T s = static_cast<T>(kDiceSmoothing);
    auto inter = ag::add_scalar(ag::scale(ag::sum(ag::mul_const(pred, gt)), T(2)), s);
    auto denom = ag::add_scalar(ag::sum(ag::square(pred)), gg + s);
    return ag::add_scalar(ag::scale(ag::div(inter, denom), T(-1)), T(1));
}

template <typename T>
Var<T> mask_perceptual_loss(const Var<T>& maps, const std::vector<Tensor<T>>& gt) {
    if (maps.shape().size() != 3) throw std::invalid_argument("mask_perceptual_loss: maps must be [K, H, W]");
    const int64_t k = maps.dim(0);
    if (static_cast<int64_t>(gt.size()) != k)
        throw std::invalid_argument("mask_perceptual_loss: " + std::to_string(gt.size()) + " masks for " +
                                    std::to_string(k) + " characters");
    Var<T> total(Tensor<T>({1}, T(0)));
    if (k == 0) return total;
    const Tensor<T>& first = gt.front();
    for (int64_t i = 0; i < k; ++i)
        if (gt[static_cast<size_t>(i)].empty())
            throw std::invalid_argument("mask_perceptual_loss: missing ground-truth mask for character " +
                                        std::to_string(i));
    const int64_t h = first.dim(-2), w = first.dim(-1);
    auto resized = (maps.dim(1) == h && maps.dim(2) == w) ? maps : ag::bilinear_resize(maps, h, w);
    for (int64_t i = 0; i < k; ++i) {
        const auto& g = gt[static_cast<size_t>(i)];
        if (g.numel() != h * w) throw std::invalid_argument("mask_perceptual_loss: masks differ in resolution");
        total = ag::add(total, dice_term(ag::reshape(ag::slice0(resized, i, 1), {h, w}), g.reshaped({h, w})));
    }
    return total;
}

template <typename T>
TotalLoss<T> total_loss(const Var<T>& ldm, const Var<T>& mask_perceptual, double alpha) {
    if (alpha < 0) throw std::invalid_argument("total_loss: alpha must be >= 0");
    TotalLoss<T> out;
    out.value = alpha == 0 ? ldm : ag::add(ldm, ag::scale(mask_perceptual, static_cast<T>(alpha)));
    out.breakdown.ldm = static_cast<double>(ldm.item());
    out.breakdown.mask_perceptual = static_cast<double>(mask_perceptual.item());
    out.breakdown.alpha = alpha;
    out.breakdown.total = static_cast<double>(out.value.item());
    return out;
}

Tensor<float> downsample_mask(const Image& mask, int height, int width) {
    if (mask.channels != 1) throw std::invalid_argument("downsample_mask: expected a one-channel mask");
    if (mask.width % width != 0 || mask.height % height != 0)
        throw std::invalid_argument("downsample_mask: mask size is not a multiple of the target");
    const int fx = mask.width / width, fy = mask.height / height;
    Tensor<float> out({height, width});
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            int on = 0;
            for (int dy = 0; dy < fy; ++dy)
                for (int dx = 0; dx < fx; ++dx) on += mask.at(x * fx + dx, y * fy + dy) ? 1 : 0;
            out[y * width + x] = 2 * on >= fx * fy ? 1.0f : 0.0f;
        }
    return out;
}

MetricsLog::MetricsLog(const std::string& path, bool append)
    : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot open metrics log " + path);
}

void MetricsLog::write(int64_t step, const LossBreakdown& loss) {
    out_ << step << ' ' << std::setprecision(9) << loss.ldm << ' ' << loss.mask_perceptual << ' ' << loss.total
         << '\n';
    out_.flush();
}

std::vector<MetricsRecord> read_metrics_log(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read metrics log " + path);
    std::vector<MetricsRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        MetricsRecord r;
        if (!(ss >> r.step >> r.loss.ldm >> r.loss.mask_perceptual >> r.loss.total))
            throw std::runtime_error("malformed metrics line: " + line);
        out.push_back(r);
    }
    return out;
}

#define STORYNIZOR_INSTANTIATE_LOSSES(T)                                                 \
    template Var<T> ldm_loss(const Var<T>&, const Var<T>&);                              \
    template Var<T> dice_term(const Var<T>&, const Tensor<T>&);                          \
    template Var<T> mask_perceptual_loss(const Var<T>&, const std::vector<Tensor<T>>&);  \
    template TotalLoss<T> total_loss(const Var<T>&, const Var<T>&, double);

STORYNIZOR_INSTANTIATE_LOSSES(float)
STORYNIZOR_INSTANTIATE_LOSSES(double)

}  // namespace storynizor
