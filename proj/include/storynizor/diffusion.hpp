#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "storynizor/checkpoint.hpp"
#include "storynizor/config.hpp"
#include "storynizor/data.hpp"
#include "storynizor/injector.hpp"
#include "storynizor/losses.hpp"
#include "storynizor/synchronizer.hpp"

namespace storynizor {

// Fixed lossless image codec: space-to-depth by `factor`.
// [F, S, S, 3] in [-1, 1] <-> [F, S/factor, S/factor, 3*factor^2].
Tensor<float> encode_latents(const Tensor<float>& images, int factor);
Tensor<float> decode_latents(const Tensor<float>& latents, int factor);

template <typename T>
class TextEncoder {
public:
    TextEncoder(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng);
    // ids: one fixed-length row per frame -> [F, L, D]
    Var<T> operator()(const std::vector<std::vector<int>>& ids) const;

private:
    struct Layer {
        LayerNorm<T> norm1, norm2;
        Linear<T> q, k, v, out, ff1, ff2;
    };
    int length_, width_, heads_;
    Var<T> tokens_, positions_;
    std::vector<Layer> layers_;
    LayerNorm<T> norm_out_;
};

enum class PlainAttention { FrameLocal, Joint };

// Conditional UNet over NHWC latents of concatenated frames. Attention
// blocks are numbered in forward order; block b's parameters live under
// "unet.attn.<b>." and its identity adapter under "injector.ida.<b>.".
template <typename T>
class UNet {
public:
    UNet(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng);

    // z [F, h, w, c]; timesteps per frame; text [F, L, D]; face optional.
    Var<T> operator()(const Var<T>& z, const std::vector<int64_t>& timesteps, const Var<T>& text,
                      const FaceCondition<T>* face, int frames) const;

    HookSlot<T>& hooks() { return hooks_; }
    // Self-attention used when no hooks are attached.
    void set_plain_attention(PlainAttention mode) { plain_ = mode; }
    int attention_blocks() const { return static_cast<int>(attn_.size()); }
    // Spatial size of every attention block, in forward order.
    const std::vector<int>& attention_resolutions() const { return attn_res_; }

private:
    struct ResBlock {
        GroupNorm<T> norm1, norm2;
        Conv2d<T> conv1, conv2, skip;
        Linear<T> temb;
        bool has_skip = false;
    };
    struct AttnBlock {
        int index = 0;
        int channels = 0;
        GroupNorm<T> norm;
        Linear<T> proj_in, proj_out;
        LayerNorm<T> ln1, ln2, ln3;
        Linear<T> q1, k1, v1, o1;  // self-attention
        Linear<T> q2, k2, v2, o2;  // text cross-attention
        Linear<T> ff1, ff2;
        IdentityAttention<T> identity;
    };
    struct Level {
        ResBlock down_res, up_res;
        std::optional<int> down_attn, up_attn;  // indices into attn_
        Conv2d<T> downsample, upsample;
        int channels = 0;
    };

    ResBlock make_res(ParamStore<T>& store, const std::string& prefix, int in, int out, Rng& rng);
    int make_attn(ParamStore<T>& store, int channels, int resolution, Rng& rng);
    Var<T> res_forward(const ResBlock& rb, const Var<T>& x, const Var<T>& temb) const;
    Var<T> attn_forward(const AttnBlock& ab, const Var<T>& x, const Var<T>& text, const FaceCondition<T>* face,
                        int frames) const;

    ModelConfig cfg_;
    int groups_;
    HookSlot<T> hooks_;
    PlainAttention plain_ = PlainAttention::FrameLocal;
    Linear<T> time1_, time2_;
    Conv2d<T> conv_in_, conv_out_;
    GroupNorm<T> norm_out_;
    std::vector<Level> levels_;
    ResBlock mid1_, mid2_;
    std::optional<int> mid_attn_;
    std::vector<AttnBlock> attn_;
    std::vector<int> attn_res_;
};

// Every trainable piece of the system under one parameter store.
template <typename T>
class StoryModel {
public:
    explicit StoryModel(const ModelConfig& cfg, uint64_t init_seed = kDefaultSeed);

    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }
    TextEncoder<T>& text_encoder() { return *text_; }
    UNet<T>& unet() { return *unet_; }
    IdInjector<T>& injector() { return *injector_; }

    Var<T> encode_prompts(const std::vector<std::string>& prompts) const;
    Var<T> null_text(int64_t frames) const;

private:
    ModelConfig cfg_;
    ParamStore<T> store_;
    std::unique_ptr<TextEncoder<T>> text_;
    std::unique_ptr<UNet<T>> unet_;
    std::unique_ptr<IdInjector<T>> injector_;
};

// Linear beta schedule; alpha_bar in double.
class NoiseSchedule {
public:
    NoiseSchedule(int steps, double beta_start, double beta_end);
    explicit NoiseSchedule(const ModelConfig& cfg) : NoiseSchedule(cfg.train_timesteps, cfg.beta_start, cfg.beta_end) {}

    int steps() const { return static_cast<int>(alpha_bar_.size()); }
    double alpha_bar(int64_t t) const;
    const std::vector<double>& alpha_bars() const { return alpha_bar_; }
    // Uniform-stride sub-schedule, descending: (count-1)*k, ..., k, 0 with k = steps/count.
    std::vector<int> ddim_timesteps(int count) const;

private:
    std::vector<double> alpha_bar_;
};

// sqrt(a) x0 + sqrt(1 - a) noise for a = alpha_bar(t).
template <typename T>
Tensor<T> add_noise(const Tensor<T>& x0, double alpha_bar, const Tensor<T>& noise);
Tensor<float> add_noise(const NoiseSchedule& schedule, const Tensor<float>& x0, int64_t t,
                        const Tensor<float>& noise);

struct MapEntry {
    int frame = 0;
    int character = 0;
};
// Rows of a [K, r, r] map tensor for the given per-frame spans, frame-major.
std::vector<MapEntry> map_entries(const FrameSpans& spans);

// Per-story inputs built from a StoryGroup.
struct TrainSample {
    std::string group_id;
    std::vector<std::string> prompts;
    FrameSpans spans;                  // model token positions per frame
    Tensor<float> images;              // [N, S, S, 3]
    std::vector<Tensor<float>> masks;  // frame-major per character, at the map resolution
    IdBucket bucket;                   // reference crops; empty when unavailable
};
TrainSample make_train_sample(const StoryGroup& group, const ModelConfig& cfg);
// Resolution of the maps supervised by the mask loss (largest attention resolution).
int map_resolution(const ModelConfig& cfg);

struct TrainOptions {
    bool use_amsa = true;
    double mask_loss_weight = 0.1;
    double condition_dropout = 0.05;
    bool shuffle_references = true;  // false: each frame sees its own crop (stacked-ID baseline)
    std::optional<double> lr;        // overrides the stage default
    double max_grad_norm = 1.0;      // global gradient clipping; <= 0 disables
};

TrainOptions default_train_options(const ModelConfig& cfg);

// Names trainable in each stage.
bool trainable_in_stage(TrainingStage stage, const std::string& name);

template <typename T>
struct TrainState {
    TrainingStage stage;
    TrainOptions options;
    AdamW<T> optimizer;
    int64_t step = 0;
    Rng rng;
    Synchronizer<T> synchronizer;
    bool synchronizer_attached = false;
    // Accumulated maps of the latest step, [K, r, r], with their rows and masks.
    Var<T> last_maps;
    std::vector<MapEntry> last_entries;
    std::vector<Tensor<float>> last_masks;
    double last_grad_norm = 0;  // before clipping

    TrainState(StoryModel<T>& model, TrainingStage stage, const TrainOptions& options, uint64_t seed);
    ~TrainState();
    TrainState(const TrainState&) = delete;
    TrainState& operator=(const TrainState&) = delete;

private:
    UNet<T>* unet_;
};

// One optimizer step. Throws std::invalid_argument when the sample does not
// suit the stage (the injector stage needs reference crops).
template <typename T>
LossBreakdown train_step(StoryModel<T>& model, TrainState<T>& state, const TrainSample& sample);

struct RunOptions {
    TrainingStage stage = TrainingStage::Base;
    int steps = 100;
    uint64_t seed = kDefaultSeed;
    std::string out_dir;
    int checkpoint_every = 0;  // 0: final checkpoint only
    int mask_dump_every = 0;
    std::string init_checkpoint;    // previous stage (required for the injector stage)
    std::string resume_checkpoint;  // continue an interrupted run of the same stage
    TrainOptions train;
    bool quiet = false;
};

// Runs `steps` optimizer steps in total (including resumed ones), writing
// checkpoints, "metrics.log" and mask dumps under out_dir.
Checkpoint run_training(const ModelConfig& cfg, const std::vector<TrainSample>& data, const RunOptions& options);

Checkpoint make_checkpoint(const StoryModel<float>& model, TrainingStage stage, int64_t step, const Rng& rng,
                           const AdamW<float>* optimizer);
void load_parameters(StoryModel<float>& model, const Checkpoint& ckpt);

struct SampleOptions {
    int steps = 30;
    double guidance = 7.0;
    uint64_t seed = kDefaultSeed;
    bool use_amsa = true;
};

struct SampleResult {
    std::vector<Image> images;
    Tensor<float> latents;
    Var<float> final_maps;  // [K, r, r] accumulated maps of the last conditional pass
};

// DDIM (eta = 0) with classifier-free guidance: null + s * (cond - null);
// s == 1 runs the conditional branch only.
SampleResult ddim_sample(StoryModel<float>& model, const StoryPrompt& prompt, const IdBucket* reference,
                         const SampleOptions& options);

// Accumulated character maps of one noisy forward pass at timestep t.
Var<float> probe_maps(StoryModel<float>& model, const TrainSample& sample, int64_t t, uint64_t noise_seed,
                      bool use_amsa = true);
// Mean soft Dice coefficient (1 - dice term) between probe maps and GT masks
// over the given timesteps.
double mean_map_dice(StoryModel<float>& model, const TrainSample& sample, const std::vector<int64_t>& timesteps,
                     uint64_t noise_seed, bool use_amsa = true);

// Writes step{k}_frame{n}_char{c}.png: accumulated map (left, min-max scaled
// to 0..255) and GT (right), each at image_size.
void dump_masks(const std::string& dir, int64_t step, const Var<float>& maps, const std::vector<MapEntry>& entries,
                const std::vector<Tensor<float>>& gt, int image_size);

FrameSpans model_spans(const StoryPrompt& prompt);

}  // namespace storynizor
