#include <filesystem>
#include <iostream>
#include <stdexcept>

#include "storynizor/diffusion.hpp"

namespace storynizor {

namespace fs = std::filesystem;

TrainSample make_train_sample(const StoryGroup& group, const ModelConfig& cfg) {
    TrainSample s;
    s.group_id = group.group_id;
    const int r = map_resolution(cfg);
    for (int n = 0; n < group.frame_count(); ++n) {
        const auto& f = group.frames[static_cast<size_t>(n)];
        s.prompts.push_back(f.prompt);
        std::vector<TokenSpan> spans;
        for (size_t c = 0; c < f.characters.size(); ++c) {
            spans.push_back(model_span(f.characters[c].span));
            const auto& masks = group.masks.at(static_cast<size_t>(n));
            if (c >= masks.size() || masks[c].pixels.empty())
                throw std::invalid_argument("group " + group.group_id + " frame " + std::to_string(n) +
                                            " lacks a mask for character " + std::to_string(c));
            s.masks.push_back(downsample_mask(masks[c], r, r));
        }
        s.spans.push_back(std::move(spans));
    }
    for (const auto& im : group.images)
        if (im.width != cfg.image_size || im.height != cfg.image_size || im.channels != cfg.image_channels)
            throw std::invalid_argument("group " + group.group_id + " images do not match the configured size");
    s.images = images_to_tensor(group.images);
    try {
        s.bucket = make_id_bucket(group, cfg.reference_size);
    } catch (const std::invalid_argument&) {
        s.bucket = IdBucket{};
    }
    return s;
}

TrainOptions default_train_options(const ModelConfig& cfg) {
    TrainOptions o;
    o.use_amsa = cfg.use_amsa;
    o.mask_loss_weight = cfg.mask_loss_weight;
    o.condition_dropout = cfg.condition_dropout;
    return o;
}

bool trainable_in_stage(TrainingStage stage, const std::string& name) {
    const bool injector = name.rfind("injector.", 0) == 0;
    switch (stage) {
        case TrainingStage::Base:
            return !injector;
        case TrainingStage::Synchronizer:
            for (const char* suffix : {".attn1.to_q.", ".attn1.to_k.", ".attn1.to_v.", ".attn1.to_out.", ".attn2.to_q.",
                                       ".attn2.to_k."})
                if (name.find(suffix) != std::string::npos) return true;
            return false;
        case TrainingStage::Injector:
            return injector;
    }
    return false;
}

namespace {

double stage_lr(const ModelConfig& cfg, TrainingStage stage) {
    switch (stage) {
        case TrainingStage::Base:
            return cfg.lr_base;
        case TrainingStage::Synchronizer:
            return cfg.lr_synchronizer;
        case TrainingStage::Injector:
            return cfg.lr_injector;
    }
    return cfg.lr_base;
}

template <typename T>
Tensor<T> normal_tensor(const Shape& shape, Rng& rng) {
    Tensor<T> t(shape);
    for (auto& v : t.data) v = static_cast<T>(rng.normal());
    return t;
}

}  // namespace

template <typename T>
TrainState<T>::TrainState(StoryModel<T>& model, TrainingStage stage_, const TrainOptions& options_, uint64_t seed)
    : stage(stage_),
      options(options_),
      optimizer(options_.lr.value_or(stage_lr(model.config(), stage_)), model.config().weight_decay),
      rng(seed),
      synchronizer(SynchronizerOptions{options_.use_amsa, false, AmsaConfig{model.config().mask_eps}}),
      unet_(&model.unet()) {
    model.params().set_trainable([&](const std::string& n) { return trainable_in_stage(stage, n); });
    if (stage != TrainingStage::Base) {
        unet_->hooks().attach(&synchronizer);
        synchronizer_attached = true;
    }
}

template <typename T>
TrainState<T>::~TrainState() {
    if (synchronizer_attached) unet_->hooks().detach();
}

template <typename T>
LossBreakdown train_step(StoryModel<T>& model, TrainState<T>& state, const TrainSample& sample) {
    const auto& cfg = model.config();
    const int n = static_cast<int>(sample.prompts.size());
    if (n == 0) throw std::invalid_argument("train_step: empty sample");
    if (state.stage == TrainingStage::Injector && sample.bucket.images.empty())
        throw std::invalid_argument("train_step: the injector stage needs reference crops (group " + sample.group_id +
                                    ")");
    const NoiseSchedule schedule(cfg);

    const Tensor<T> x0 = encode_latents(sample.images, cfg.latent_factor).template cast<T>();
    const auto t = static_cast<int64_t>(state.rng.uniform_int(static_cast<uint64_t>(schedule.steps())));
    const Tensor<T> noise = normal_tensor<T>(x0.shape, state.rng);
    const Tensor<T> zt = add_noise(x0, schedule.alpha_bar(t), noise);
    const auto drop = draw_drop_flags(n, state.options.condition_dropout, state.rng);

    // A dropped caption leaves the frame without characters: its mask is all
    // ones and it takes no part in the mask loss.
    std::vector<std::vector<int>> ids;
    FrameSpans spans;
    std::vector<Tensor<T>> masks;
    std::vector<Tensor<float>> masks_f;
    std::vector<MapEntry> entries;
    size_t k = 0;
    for (int f = 0; f < n; ++f) {
        const auto& fs_ = sample.spans[static_cast<size_t>(f)];
        if (drop.text[static_cast<size_t>(f)]) {
            ids.push_back(null_prompt_ids(cfg.text_length));
            spans.emplace_back();
        } else {
            ids.push_back(encode_for_model(sample.prompts[static_cast<size_t>(f)], cfg.text_length));
            spans.push_back(fs_);
            for (size_t c = 0; c < fs_.size(); ++c) {
                masks.push_back(sample.masks[k + c].template cast<T>());
                masks_f.push_back(sample.masks[k + c]);
                entries.push_back({f, static_cast<int>(c)});
            }
        }
        k += fs_.size();
    }
    auto text = model.text_encoder()(ids);

    std::optional<FaceCondition<T>> face;
    if (state.stage == TrainingStage::Injector) {
        const IdBucket bucket =
            state.options.shuffle_references ? shuffle_bucket(sample.bucket, state.rng.derive_seed()) : sample.bucket;
        std::vector<Image> refs;
        for (int f = 0; f < n; ++f) refs.push_back(bucket.images[static_cast<size_t>(f) % bucket.images.size()]);
        auto cond = model.injector().condition(Var<T>(images_to_tensor(refs).template cast<T>()));
        face = apply_face_drop(cond, model.injector().null_tokens(), drop.face);
    }

    if (state.synchronizer_attached) state.synchronizer.begin_pass(spans);
    auto eps = model.unet()(Var<T>(zt), std::vector<int64_t>(static_cast<size_t>(n), t), text,
                            face ? &*face : nullptr, n);
    auto ldm = ldm_loss(eps, Var<T>(noise));

    Var<T> mpl(Tensor<T>({1}, T(0)));
    state.last_maps = Var<T>();
    if (state.synchronizer_attached && total_characters(spans) > 0) {
        const int r = map_resolution(cfg);
        auto maps = state.synchronizer.final_maps(r, r);
        if (state.stage == TrainingStage::Synchronizer && state.options.mask_loss_weight > 0)
            mpl = mask_perceptual_loss(maps, masks);
        state.last_maps = Var<T>(maps.value());
        state.last_entries = entries;
        state.last_masks = masks_f;
    }
    const double alpha = state.stage == TrainingStage::Synchronizer ? state.options.mask_loss_weight : 0.0;
    auto total = total_loss(ldm, mpl, alpha);
    if (state.stage != TrainingStage::Synchronizer) {
        // Reported for monitoring only.
        if (state.last_maps) {
            NoGradGuard ng;
            total.breakdown.mask_perceptual = mask_perceptual_loss(state.last_maps, masks).item();
        }
    }
    backward(total.value);
    state.last_grad_norm = clip_grad_norm(model.params(), state.options.max_grad_norm);
    state.optimizer.step(model.params());
    model.params().zero_grad();
    ++state.step;
    return total.breakdown;
}

Checkpoint make_checkpoint(const StoryModel<float>& model, TrainingStage stage, int64_t step, const Rng& rng,
                           const AdamW<float>* optimizer) {
    Checkpoint ck;
    ck.config = model.config();
    ck.stage = stage;
    ck.step = step;
    ck.rng_state = rng.state();
    ck.parameters = model.params().export_float();
    if (optimizer) {
        ck.optimizer = optimizer->export_state();
        ck.optimizer_step = optimizer->steps();
    }
    return ck;
}

void load_parameters(StoryModel<float>& model, const Checkpoint& ckpt) { model.params().import_float(ckpt.parameters); }

void dump_masks(const std::string& dir, int64_t step, const Var<float>& maps, const std::vector<MapEntry>& entries,
                const std::vector<Tensor<float>>& gt, int image_size) {
    if (!maps) return;
    if (maps.dim(0) != static_cast<int64_t>(entries.size()) || entries.size() != gt.size())
        throw std::invalid_argument("dump_masks: maps, entries and masks disagree");
    fs::create_directories(dir);
    NoGradGuard ng;
    auto up = ag::bilinear_resize(maps, image_size, image_size).value();
    const int64_t mh = maps.dim(1), mw = maps.dim(2);
    const int64_t plane = static_cast<int64_t>(image_size) * image_size;
    for (size_t k = 0; k < entries.size(); ++k) {
        // Min-max scaled so every dump spans the full grey range.
        float lo = up[static_cast<int64_t>(k) * plane], hi = lo;
        for (int64_t i = 0; i < plane; ++i) {
            lo = std::min(lo, up[static_cast<int64_t>(k) * plane + i]);
            hi = std::max(hi, up[static_cast<int64_t>(k) * plane + i]);
        }
        Image im(2 * image_size, image_size, 1);
        for (int y = 0; y < image_size; ++y)
            for (int x = 0; x < image_size; ++x) {
                const float v = up[static_cast<int64_t>(k) * plane + y * image_size + x];
                im.at(x, y) = static_cast<uint8_t>(std::lround(255.0f * std::clamp(hi > lo ? (v - lo) / (hi - lo) : 0.0f, 0.0f, 1.0f)));
                const int64_t gy = y * mh / image_size, gx = x * mw / image_size;
                im.at(image_size + x, y) = gt[k][gy * mw + gx] > 0.5f ? 255 : 0;
            }
        write_png((fs::path(dir) / ("step" + std::to_string(step) + "_frame" + std::to_string(entries[k].frame) + "_char" +
                                   std::to_string(entries[k].character) + ".png"))
                      .string(),
                  im);
    }
}

Checkpoint run_training(const ModelConfig& cfg, const std::vector<TrainSample>& data, const RunOptions& options) {
    if (data.empty()) throw std::invalid_argument("run_training: no training samples");
    if (options.stage == TrainingStage::Injector && options.init_checkpoint.empty() &&
        options.resume_checkpoint.empty())
        throw std::runtime_error("the injector stage requires a synchronizer checkpoint");

    StoryModel<float> model(cfg, options.seed);
    if (!options.init_checkpoint.empty()) {
        const auto init = load_checkpoint(options.init_checkpoint, cfg);
        if (options.stage == TrainingStage::Injector && init.stage != TrainingStage::Synchronizer)
            throw std::runtime_error("the injector stage must start from a synchronizer checkpoint, got a " +
                                     to_string(init.stage) + " checkpoint");
        if (options.stage == TrainingStage::Synchronizer && init.stage == TrainingStage::Injector)
            throw std::runtime_error("the synchronizer stage cannot start from an injector checkpoint");
        load_parameters(model, init);
    }
    TrainState<float> state(model, options.stage, options.train, options.seed);
    if (!options.resume_checkpoint.empty()) {
        const auto ck = load_checkpoint(options.resume_checkpoint, cfg);
        if (ck.stage != options.stage)
            throw std::runtime_error("resume checkpoint is from the " + to_string(ck.stage) + " stage, not " +
                                     to_string(options.stage));
        load_parameters(model, ck);
        state.optimizer.import_state(ck.optimizer, ck.optimizer_step);
        state.step = ck.step;
        state.rng.set_state(ck.rng_state);
    }

    MetricsLog log;
    if (!options.out_dir.empty()) {
        fs::create_directories(options.out_dir);
        log = MetricsLog((fs::path(options.out_dir) / "metrics.log").string(), !options.resume_checkpoint.empty());
    }
    auto save = [&](const std::string& name) {
        if (options.out_dir.empty()) return;
        save_checkpoint(make_checkpoint(model, options.stage, state.step, state.rng, &state.optimizer),
                        (fs::path(options.out_dir) / name).string());
    };

    while (state.step < options.steps) {
        const auto& sample = data[state.rng.uniform_int(data.size())];
        const auto loss = train_step(model, state, sample);
        if (log.is_open()) log.write(state.step, loss);
        if (!options.quiet && (state.step % 50 == 0 || state.step == 1))
            std::cerr << to_string(options.stage) << " step " << state.step << "  ldm " << loss.ldm << "  mask "
                      << loss.mask_perceptual << "  total " << loss.total << '\n';
        if (options.checkpoint_every > 0 && state.step % options.checkpoint_every == 0 && state.step < options.steps)
            save("checkpoint_step" + std::to_string(state.step) + ".ckpt");
        if (options.mask_dump_every > 0 && state.step % options.mask_dump_every == 0 && !options.out_dir.empty())
            dump_masks((fs::path(options.out_dir) / "masks").string(), state.step, state.last_maps, state.last_entries,
                       state.last_masks, cfg.image_size);
    }
    save("checkpoint.ckpt");
    return make_checkpoint(model, options.stage, state.step, state.rng, &state.optimizer);
}

template struct TrainState<float>;
template struct TrainState<double>;
template LossBreakdown train_step(StoryModel<float>&, TrainState<float>&, const TrainSample&);
template LossBreakdown train_step(StoryModel<double>&, TrainState<double>&, const TrainSample&);

}  // namespace storynizor
