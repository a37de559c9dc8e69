#pragma once

#include <limits>
#include <vector>

#include "storynizor/nn.hpp"
#include "storynizor/prompt.hpp"

namespace storynizor {

// Head aggregation (mean), own-frame policy (unmasked) and character union
// (elementwise max) are fixed; only the clamp floor is tunable.
struct AmsaConfig {
    double eps = 1e-6;
    void validate() const;
};

// Character spans, in model token positions, for every frame of a
// concatenated batch. Entry f lists the characters of frame f.
using FrameSpans = std::vector<std::vector<TokenSpan>>;

int total_characters(const FrameSpans& spans);

// probs: [F*heads, H*W, L] text cross-attention probabilities.
// Returns [K, H, W]: one map per (frame, character), frame-major, each the
// head mean of the probabilities averaged over the character's span tokens.
template <typename T>
Var<T> record_cross_attention_map(const Var<T>& probs, int heads, int64_t height, int64_t width,
                                  const FrameSpans& spans);

template <typename T>
class AttentionMaskStack {
public:
    struct Layer {
        int layer;
        Var<T> maps;  // [K, H, W]
    };

    explicit AttentionMaskStack(FrameSpans spans = {}) : spans_(std::move(spans)) {}

    void reset(FrameSpans spans);
    void record(int layer, Var<T> maps);

    const FrameSpans& spans() const { return spans_; }
    int characters() const { return total_characters(spans_); }
    const std::vector<Layer>& layers() const { return layers_; }
    bool empty() const { return layers_.empty(); }
    bool has_layers_before(int layer) const;

    // Sum of every recorded map from layers strictly before `up_to_layer`,
    // each bilinearly resized to (height, width), then divided by its maximum.
    // Throws std::logic_error when no such layer exists.
    Var<T> accumulate(int up_to_layer, int64_t height, int64_t width) const;
    Var<T> accumulate_all(int64_t height, int64_t width) const {
        return accumulate(std::numeric_limits<int>::max(), height, width);
    }

private:
    FrameSpans spans_;
    std::vector<Layer> layers_;
};

// accumulated: [K, H, W] frame-major maps -> [F, H*W] per-frame union masks,
// clamped to [eps, 1]. Frames without characters get all ones.
template <typename T>
Var<T> build_frame_mask(const Var<T>& accumulated, const FrameSpans& spans, const AmsaConfig& config);

// Self-attention over all frames of each story with a log-mask bias on keys
// of other frames. q, k, v: [B*N, S, C]; masks: [B*N, S] in [eps, 1].
template <typename T>
Var<T> amsa_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& masks, int heads, int frames);

struct SynchronizerOptions {
    bool amsa = true;               // false: frame-local self-attention (ablation)
    bool force_unit_masks = false;  // AMSA with every mask equal to one
    AmsaConfig amsa_config;
};

// Hook object that turns a backbone's self-attention into AMSA and collects
// its cross-attention maps. Call begin_pass before every forward.
template <typename T>
class Synchronizer : public AttentionHooks<T> {
public:
    explicit Synchronizer(SynchronizerOptions options = {});

    void begin_pass(FrameSpans spans) { stack_.reset(std::move(spans)); }
    const AttentionMaskStack<T>& stack() const { return stack_; }
    const SynchronizerOptions& options() const { return options_; }
    void set_options(const SynchronizerOptions& options);

    Var<T> self_attention(int block, const Var<T>& q, const Var<T>& k, const Var<T>& v, int64_t height, int64_t width,
                          int heads, int frames) override;
    void cross_attention_probs(int block, const Var<T>& probs, int64_t height, int64_t width, int heads) override;

    // Accumulation over every recorded layer at the requested resolution.
    Var<T> final_maps(int64_t height, int64_t width) const { return stack_.accumulate_all(height, width); }

private:
    SynchronizerOptions options_;
    AttentionMaskStack<T> stack_;
};

template <typename T>
void attach_synchronizer(HookSlot<T>& slot, Synchronizer<T>& sync) {
    slot.attach(&sync);
}

}  // namespace storynizor
