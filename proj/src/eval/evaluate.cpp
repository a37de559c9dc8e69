#include <algorithm>
#include <stdexcept>

#include "storynizor/eval.hpp"

namespace storynizor {

namespace {

bool wanted(const EvalOptions& o, const std::string& name) {
    return o.metrics.empty() || std::find(o.metrics.begin(), o.metrics.end(), name) != o.metrics.end();
}

}  // namespace

EvalReport evaluate_group(StoryModel<float>& model, const StoryGroup& group, const EvalOptions& options,
                          const IdBucket* reference) {
    for (const auto& m : options.metrics)
        if (std::find(metric_names().begin(), metric_names().end(), m) == metric_names().end())
            throw std::invalid_argument("unknown metric '" + m + "'");
    const auto& cfg = model.config();
    const int n = group.frame_count();

    EvalReport r;
    r.run_id = options.run_id;
    r.config_hash = options.config_hash;
    auto put = [&](const std::string& name, double v, int count) {
        r.metrics[name] = v;
        r.counts[name] = count;
    };

    const bool want_ref = options.with_reference && wanted(options, "face_sim_ref");
    const bool need_images = wanted(options, "text_sim") || wanted(options, "frame_sim_clip_style") ||
                             wanted(options, "frame_sim_dino_style") || wanted(options, "face_sim") || want_ref;
    if (need_images) {
        IdBucket bucket;
        if (options.with_reference) bucket = reference ? *reference : make_id_bucket(group, cfg.reference_size);
        const auto result =
            ddim_sample(model, group.story_prompt(), options.with_reference ? &bucket : nullptr, options.sample);
        std::vector<std::string> prompts;
        for (const auto& f : group.frames) prompts.push_back(f.prompt);

        if (wanted(options, "text_sim")) put("text_sim", text_image_similarity(result.images, prompts, ToyTextImageEncoder()), n);
        if (n >= 2 && wanted(options, "frame_sim_clip_style"))
            put("frame_sim_clip_style", inter_frame_similarity(result.images, ToyHistogramEncoder()), n * (n - 1) / 2);
        if (n >= 2 && wanted(options, "frame_sim_dino_style"))
            put("frame_sim_dino_style", inter_frame_similarity(result.images, ToyGridEncoder()), n * (n - 1) / 2);

        if (wanted(options, "face_sim") || want_ref) {
            std::vector<Image> masks;
            for (const auto& m : group.masks) {
                if (m.empty() || m.front().pixels.empty())
                    throw std::invalid_argument("group " + group.group_id + " lacks character masks for face metrics");
                masks.push_back(m.front());
            }
            const auto crops = character_crops(result.images, masks, cfg.reference_size);
            const auto face = face_similarity(crops, options.with_reference ? &bucket.images : nullptr, ToyFaceEncoder());
            if (wanted(options, "face_sim") && n >= 2) put("face_sim", face.face_sim, n * (n - 1) / 2);
            if (want_ref) put("face_sim_ref", *face.face_sim_ref, n * static_cast<int>(bucket.images.size()));
        }
    }
    if (wanted(options, "dice")) {
        const auto sample = make_train_sample(group, cfg);
        put("dice",
            mean_map_dice(model, sample, options.dice_timesteps, options.dice_seed, options.sample.use_amsa),
            static_cast<int>(sample.masks.size() * options.dice_timesteps.size()));
    }
    r.validate();
    return r;
}

EvalReport evaluate_groups(StoryModel<float>& model, const std::vector<StoryGroup>& groups,
                           const EvalOptions& options) {
    if (groups.empty()) throw std::invalid_argument("evaluate_groups: no groups");
    std::vector<EvalReport> parts;
    for (const auto& g : groups) parts.push_back(evaluate_group(model, g, options));
    auto merged = merge_reports(options.run_id, parts);
    merged.validate();
    return merged;
}

}  // namespace storynizor
