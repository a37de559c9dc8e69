#include "storynizor/synchronizer.hpp"

#include <stdexcept>
#include <string>

namespace storynizor {

void AmsaConfig::validate() const {
    if (!(eps > 0 && eps < 1)) throw std::invalid_argument("AMSA mask floor must lie in (0, 1)");
}

int total_characters(const FrameSpans& spans) {
    int k = 0;
    for (const auto& f : spans) k += static_cast<int>(f.size());
    return k;
}

template <typename T>
Var<T> record_cross_attention_map(const Var<T>& probs, int heads, int64_t height, int64_t width,
                                  const FrameSpans& spans) {
    if (probs.shape().size() != 3) throw std::invalid_argument("cross-attention probs must be rank 3");
    const int64_t frames = static_cast<int64_t>(spans.size());
    if (probs.dim(0) != frames * heads)
        throw std::invalid_argument("cross-attention probs cover " + std::to_string(probs.dim(0) / heads) +
                                    " frames, spans cover " + std::to_string(frames));
    if (probs.dim(1) != height * width)
        throw std::invalid_argument("query size " + std::to_string(probs.dim(1)) + " does not match layer resolution " +
                                    std::to_string(height) + "x" + std::to_string(width));
    const int64_t length = probs.dim(2);

    auto mean = ag::head_mean(probs, heads);
    std::vector<Var<T>> rows;
    for (int64_t f = 0; f < frames; ++f)
        for (const auto& s : spans[static_cast<size_t>(f)]) {
            if (s.length() < 1) throw std::invalid_argument("character span has zero length");
            if (s.first < 0 || s.last >= length)
                throw std::invalid_argument("character span [" + std::to_string(s.first) + ", " +
                                            std::to_string(s.last) + "] outside " + std::to_string(length) + " tokens");
            rows.push_back(ag::column_span_mean(mean, f, s.first, s.last));
        }
    if (rows.empty()) return Var<T>(Tensor<T>({0, height, width}));
    return ag::reshape(ag::concat0(std::span<const Var<T>>(rows)), {static_cast<int64_t>(rows.size()), height, width});
}

template <typename T>
void AttentionMaskStack<T>::reset(FrameSpans spans) {
    spans_ = std::move(spans);
    layers_.clear();
}

template <typename T>
void AttentionMaskStack<T>::record(int layer, Var<T> maps) {
    if (maps.shape().size() != 3 || maps.dim(0) != characters())
        throw std::invalid_argument("recorded maps " + shape_str(maps.shape()) + " do not match " +
                                    std::to_string(characters()) + " characters");
    layers_.push_back({layer, std::move(maps)});
}

template <typename T>
bool AttentionMaskStack<T>::has_layers_before(int layer) const {
    for (const auto& l : layers_)
        if (l.layer < layer) return true;
    return false;
}

template <typename T>
Var<T> AttentionMaskStack<T>::accumulate(int up_to_layer, int64_t height, int64_t width) const {
    Var<T> sum;
    for (const auto& l : layers_) {
        if (l.layer >= up_to_layer) continue;
        auto r = (l.maps.dim(1) == height && l.maps.dim(2) == width) ? l.maps
                                                                      : ag::bilinear_resize(l.maps, height, width);
        sum = sum ? ag::add(sum, r) : r;
    }
    if (!sum)
        throw std::logic_error("no cross-attention layer recorded before layer " + std::to_string(up_to_layer) +
                               "; skip AMSA at the first attention block");
    const int64_t k = sum.dim(0);
    if (k == 0) return sum;
    return ag::reshape(ag::max_normalize_rows(ag::reshape(sum, {k, height * width})), {k, height, width});
}

template <typename T>
Var<T> build_frame_mask(const Var<T>& accumulated, const FrameSpans& spans, const AmsaConfig& config) {
    config.validate();
    if (accumulated.dim(0) != total_characters(spans))
        throw std::invalid_argument("accumulated maps do not match the character count");
    int64_t s = 1;
    for (size_t i = 1; i < accumulated.shape().size(); ++i) s *= accumulated.dim(static_cast<int>(i));
    const int64_t k = accumulated.dim(0);
    auto flat = ag::reshape(accumulated, {k, s});

    std::vector<Var<T>> frames;
    int64_t offset = 0;
    for (const auto& f : spans) {
        const auto count = static_cast<int64_t>(f.size());
        if (count == 0) {
            frames.push_back(Var<T>(Tensor<T>({s}, T(1))));
        } else {
            frames.push_back(ag::max_over_rows(ag::slice0(flat, offset, count)));
        }
        offset += count;
    }
    auto masks = ag::reshape(ag::concat0(std::span<const Var<T>>(frames)), {static_cast<int64_t>(spans.size()), s});
    return ag::clamp(masks, static_cast<T>(config.eps), T(1));
}

template <typename T>
Var<T> amsa_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& masks, int heads,
                      int frames) {
    const int64_t f = q.dim(0), s = q.dim(1), c = q.dim(2);
    if (frames <= 0 || f % frames != 0)
        throw std::invalid_argument("AMSA: " + std::to_string(f) + " frames do not split into stories of " +
                                    std::to_string(frames));
    if (masks.shape() != Shape{f, s})
        throw std::invalid_argument("AMSA: masks " + shape_str(masks.shape()) + " do not match " +
                                    shape_str({f, s}));
    for (T m : masks.value().data)
        if (!(m > T(0)) || m > T(1))
            throw std::invalid_argument("AMSA: mask values must lie in [eps, 1]; clamp before the log bias");

    const int64_t b = f / frames;
    const Shape joint{b, frames * s, c};
    auto qh = ag::split_heads(ag::reshape(q, joint), heads);
    auto kh = ag::split_heads(ag::reshape(k, joint), heads);
    const T scale = T(1) / std::sqrt(static_cast<T>(c / heads));
    auto logits = ag::scale(ag::bmm_nt(qh, kh), scale);
    auto log_mask = ag::reshape(ag::log(masks), {b, frames * s});
    logits = ag::add_cross_frame_key_bias(logits, log_mask, heads, s);
    auto out = attend(ag::softmax_last(logits), ag::reshape(v, joint), heads);
    return ag::reshape(out, {f, s, c});
}

template <typename T>
Synchronizer<T>::Synchronizer(SynchronizerOptions options) : options_(options) {
    options_.amsa_config.validate();
}

template <typename T>
void Synchronizer<T>::set_options(const SynchronizerOptions& options) {
    options.amsa_config.validate();
    options_ = options;
}

template <typename T>
Var<T> Synchronizer<T>::self_attention(int block, const Var<T>& q, const Var<T>& k, const Var<T>& v, int64_t height,
                                       int64_t width, int heads, int frames) {
    if (!options_.amsa) return dot_product_attention(q, k, v, heads);
    if (options_.force_unit_masks) return joint_attention(q, k, v, heads, frames);
    if (static_cast<int64_t>(stack_.spans().size()) != q.dim(0))
        throw std::logic_error("synchronizer: begin_pass spans cover " + std::to_string(stack_.spans().size()) +
                               " frames but the batch has " + std::to_string(q.dim(0)));
    if (!stack_.has_layers_before(block)) return dot_product_attention(q, k, v, heads);
    auto masks = build_frame_mask(stack_.accumulate(block, height, width), stack_.spans(), options_.amsa_config);
    return amsa_attention(q, k, v, masks, heads, frames);
}

template <typename T>
void Synchronizer<T>::cross_attention_probs(int block, const Var<T>& probs, int64_t height, int64_t width,
                                            int heads) {
    stack_.record(block, record_cross_attention_map(probs, heads, height, width, stack_.spans()));
}

#define STORYNIZOR_INSTANTIATE_SYNC(T)                                                                        \
    template Var<T> record_cross_attention_map(const Var<T>&, int, int64_t, int64_t, const FrameSpans&);      \
    template class AttentionMaskStack<T>;                                                                     \
    template Var<T> build_frame_mask(const Var<T>&, const FrameSpans&, const AmsaConfig&);                    \
    template Var<T> amsa_attention(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, int, int);     \
    template class Synchronizer<T>;

STORYNIZOR_INSTANTIATE_SYNC(float)
STORYNIZOR_INSTANTIATE_SYNC(double)

}  // namespace storynizor
