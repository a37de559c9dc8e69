#include <cmath>
#include <stdexcept>

#include "storynizor/diffusion.hpp"

namespace storynizor {

NoiseSchedule::NoiseSchedule(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw std::invalid_argument("noise schedule needs at least one step");
    double prod = 1.0;
    for (int t = 0; t < steps; ++t) {
        const double beta = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / (steps - 1);
        prod *= 1.0 - beta;
        alpha_bar_.push_back(prod);
    }
}

double NoiseSchedule::alpha_bar(int64_t t) const {
    if (t < 0 || t >= steps())
        throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + ")");
    return alpha_bar_[static_cast<size_t>(t)];
}

std::vector<int> NoiseSchedule::ddim_timesteps(int count) const {
    if (count < 1 || count > steps()) throw std::invalid_argument("DDIM step count out of range");
    const int ratio = steps() / count;
    std::vector<int> ts;
    for (int i = count - 1; i >= 0; --i) ts.push_back(i * ratio);
    return ts;
}

template <typename T>
Tensor<T> add_noise(const Tensor<T>& x0, double alpha_bar, const Tensor<T>& noise) {
    if (x0.shape != noise.shape) throw std::invalid_argument("add_noise: shape mismatch");
    const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
    Tensor<T> out(x0.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(a * x0[i] + b * noise[i]);
    return out;
}

template Tensor<float> add_noise(const Tensor<float>&, double, const Tensor<float>&);
template Tensor<double> add_noise(const Tensor<double>&, double, const Tensor<double>&);

Tensor<float> add_noise(const NoiseSchedule& schedule, const Tensor<float>& x0, int64_t t,
                        const Tensor<float>& noise) {
    return add_noise(x0, schedule.alpha_bar(t), noise);
}

FrameSpans model_spans(const StoryPrompt& prompt) {
    FrameSpans spans;
    for (const auto& f : prompt.frames) {
        std::vector<TokenSpan> s;
        for (const auto& c : f.characters) s.push_back(model_span(c.span));
        spans.push_back(std::move(s));
    }
    return spans;
}

std::vector<MapEntry> map_entries(const FrameSpans& spans) {
    std::vector<MapEntry> out;
    for (size_t f = 0; f < spans.size(); ++f)
        for (size_t c = 0; c < spans[f].size(); ++c) out.push_back({static_cast<int>(f), static_cast<int>(c)});
    return out;
}

int map_resolution(const ModelConfig& cfg) {
    int best = 0;
    for (int l : cfg.attention_levels) best = std::max(best, cfg.latent_size() >> l);
    return best;
}

namespace {

Tensor<float> normal_tensor(Shape shape, Rng& rng) {
    Tensor<float> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<float>(rng.normal());
    return t;
}

// Swaps in `hooks` for the lifetime of the guard, so that probes can run in
// the middle of training while the training synchronizer stays attached.
class HookGuard {
public:
    HookGuard(HookSlot<float>& slot, AttentionHooks<float>* hooks) : slot_(slot), previous_(slot.get()) {
        slot_.detach();
        slot_.attach(hooks);
    }
    ~HookGuard() {
        slot_.detach();
        if (previous_) slot_.attach(previous_);
    }
    HookGuard(const HookGuard&) = delete;
    HookGuard& operator=(const HookGuard&) = delete;

private:
    HookSlot<float>& slot_;
    AttentionHooks<float>* previous_;
};

Var<float> reference_condition(const IdBucket& bucket, int64_t frames) {
    if (bucket.images.empty()) throw std::invalid_argument("reference bucket is empty");
    std::vector<Image> per_frame;
    for (int64_t n = 0; n < frames; ++n) per_frame.push_back(bucket.images[static_cast<size_t>(n) % bucket.images.size()]);
    return Var<float>(images_to_tensor(per_frame));
}

}  // namespace

SampleResult ddim_sample(StoryModel<float>& model, const StoryPrompt& prompt, const IdBucket* reference,
                         const SampleOptions& options) {
    prompt.validate();
    if (options.guidance < 1) throw std::invalid_argument("guidance scale must be >= 1");
    const auto& cfg = model.config();
    const NoiseSchedule schedule(cfg);
    const auto ts = schedule.ddim_timesteps(options.steps);
    const int ratio = schedule.steps() / options.steps;
    const int n = prompt.frame_count();
    const bool guided = options.guidance != 1.0;
    const int r = map_resolution(cfg);

    NoGradGuard no_grad;
    SynchronizerOptions so;
    so.amsa = options.use_amsa;
    so.amsa_config.eps = cfg.mask_eps;
    Synchronizer<float> sync(so);
    HookGuard guard(model.unet().hooks(), &sync);

    std::vector<std::string> texts;
    for (const auto& f : prompt.frames) texts.push_back(f.full_text);
    auto text = model.encode_prompts(texts);
    FrameSpans spans = model_spans(prompt);

    std::optional<FaceCondition<float>> face;
    if (reference) face = model.injector().condition(reference_condition(*reference, n));

    if (guided) {
        std::vector<Var<float>> parts{text, model.null_text(n)};
        text = ag::concat0(std::span<const Var<float>>(parts));
        spans.resize(static_cast<size_t>(2 * n));
        if (face) {
            auto null = model.injector().null_condition(n);
            std::vector<Var<float>> fp{face->embeddings, null.embeddings};
            face->embeddings = ag::concat0(std::span<const Var<float>>(fp));
            face->null_flags.insert(face->null_flags.end(), null.null_flags.begin(), null.null_flags.end());
        }
    }
    const int64_t batch = guided ? 2 * n : n;

    Rng rng(options.seed);
    const Shape shape{n, cfg.latent_size(), cfg.latent_size(), cfg.latent_channels()};
    Tensor<float> z = normal_tensor(shape, rng);
    const int64_t per = z.numel();

    SampleResult result;
    for (size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        Tensor<float> zin = z;
        if (guided) zin.data.insert(zin.data.end(), z.data.begin(), z.data.end()), zin.shape[0] = batch;
        sync.begin_pass(spans);
        auto eps_all = model.unet()(Var<float>(zin), std::vector<int64_t>(static_cast<size_t>(batch), t), text,
                                    face ? &*face : nullptr, n)
                           .value();
        Tensor<float> eps(shape);
        for (int64_t j = 0; j < per; ++j) {
            const float c = eps_all[j];
            eps[j] = guided ? eps_all[per + j] + static_cast<float>(options.guidance) * (c - eps_all[per + j]) : c;
        }
        if (i + 1 == ts.size() && total_characters(spans) > 0) result.final_maps = sync.final_maps(r, r);

        const double a = schedule.alpha_bar(t);
        const double a_prev = t - ratio >= 0 ? schedule.alpha_bar(t - ratio) : 1.0;
        for (int64_t j = 0; j < per; ++j) {
            double x0 = (z[j] - std::sqrt(1 - a) * eps[j]) / std::sqrt(a);
            double e = eps[j];
            if (cfg.clip_sample) {
                x0 = std::clamp(x0, -1.0, 1.0);
                e = (z[j] - std::sqrt(a) * x0) / std::sqrt(1 - a);
            }
            z[j] = static_cast<float>(std::sqrt(a_prev) * x0 + std::sqrt(1 - a_prev) * e);
        }
    }
    result.latents = z;
    result.images = tensor_to_images(decode_latents(z, cfg.latent_factor));
    return result;
}

Var<float> probe_maps(StoryModel<float>& model, const TrainSample& sample, int64_t t, uint64_t noise_seed,
                      bool use_amsa) {
    const auto& cfg = model.config();
    const NoiseSchedule schedule(cfg);
    NoGradGuard no_grad;
    SynchronizerOptions so;
    so.amsa = use_amsa;
    so.amsa_config.eps = cfg.mask_eps;
    Synchronizer<float> sync(so);
    HookGuard guard(model.unet().hooks(), &sync);

    const auto x0 = encode_latents(sample.images, cfg.latent_factor);
    Rng rng(noise_seed);
    const auto zt = add_noise(schedule, x0, t, normal_tensor(x0.shape, rng));
    const auto n = static_cast<int>(sample.prompts.size());
    sync.begin_pass(sample.spans);
    model.unet()(Var<float>(zt), std::vector<int64_t>(static_cast<size_t>(n), t), model.encode_prompts(sample.prompts),
                 nullptr, n);
    const int r = map_resolution(cfg);
    return sync.final_maps(r, r);
}

double mean_map_dice(StoryModel<float>& model, const TrainSample& sample, const std::vector<int64_t>& timesteps,
                     uint64_t noise_seed, bool use_amsa) {
    double total = 0;
    int count = 0;
    NoGradGuard no_grad;
    for (size_t i = 0; i < timesteps.size(); ++i) {
        auto maps = probe_maps(model, sample, timesteps[i], noise_seed + i, use_amsa);
        const int64_t h = maps.dim(1), w = maps.dim(2);
        for (int64_t k = 0; k < maps.dim(0); ++k) {
            auto row = ag::reshape(ag::slice0(maps, k, 1), {h, w});
            total += 1.0 - dice_term(row, sample.masks[static_cast<size_t>(k)].reshaped({h, w})).item();
            ++count;
        }
    }
    if (count == 0) throw std::invalid_argument("mean_map_dice: sample has no characters");
    return total / count;
}

}  // namespace storynizor
