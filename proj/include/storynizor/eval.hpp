#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "storynizor/diffusion.hpp"
#include "storynizor/image.hpp"

namespace storynizor {

using Embedding = std::vector<double>;

// Cosine similarity. Two zero vectors score 1, a zero against a non-zero 0.
double cosine_similarity(const Embedding& a, const Embedding& b);

// Encoders are plugins so that pretrained models can replace the toy ones.
class TextImageEncoder {
public:
    virtual ~TextImageEncoder() = default;
    virtual Embedding encode_text(const std::string& prompt) const = 0;
    virtual Embedding encode_image(const Image& image) const = 0;
};

class ImageEmbedder {
public:
    virtual ~ImageEmbedder() = default;
    virtual Embedding encode(const Image& image) const = 0;
};

// Joint space of named colours and backgrounds. An image is described by the
// fraction of pixels close to each palette colour and each background style;
// a prompt by the words it names.
class ToyTextImageEncoder : public TextImageEncoder {
public:
    Embedding encode_text(const std::string& prompt) const override;
    Embedding encode_image(const Image& image) const override;
};

// 4x4x4 RGB histogram, square-rooted. Global appearance, no layout.
class ToyHistogramEncoder : public ImageEmbedder {
public:
    Embedding encode(const Image& image) const override;
};

// 8x8 grid of mean colours with the image mean removed. Sensitive to layout.
class ToyGridEncoder : public ImageEmbedder {
public:
    Embedding encode(const Image& image) const override;
};

// Character crops: centre-weighted fine colour histogram, so the colours at
// the middle of the crop (body and accent) dominate the background.
class ToyFaceEncoder : public ImageEmbedder {
public:
    Embedding encode(const Image& image) const override;
};

double text_image_similarity(const std::vector<Image>& images, const std::vector<std::string>& prompts,
                             const TextImageEncoder& encoder);
// Mean cosine over all unordered pairs; needs at least 2 images.
double inter_frame_similarity(const std::vector<Image>& images, const ImageEmbedder& encoder);

struct FaceSimilarity {
    double face_sim = 0;
    std::optional<double> face_sim_ref;  // absent without a reference
};
// face_sim needs at least 2 crops; face_sim_ref averages over every
// (crop, reference) pair.
FaceSimilarity face_similarity(const std::vector<Image>& crops, const std::vector<Image>* reference,
                               const ImageEmbedder& encoder);

// Character crops of generated frames located by ground-truth masks.
std::vector<Image> character_crops(const std::vector<Image>& images, const std::vector<Image>& masks, int size);

inline const std::vector<std::string>& metric_names() {
    static const std::vector<std::string> names{"text_sim",  "frame_sim_clip_style", "frame_sim_dino_style",
                                                "face_sim",  "face_sim_ref",         "dice"};
    return names;
}

struct EvalReport {
    std::string run_id;
    std::map<std::string, double> metrics;
    std::map<std::string, int> counts;
    std::string config_hash;

    // Throws when a metric is unknown, out of range, or lacks a positive count.
    void validate() const;
    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
};

// Mean of per-story metrics; counts add up. Metrics missing from some
// stories are averaged over the stories that have them.
EvalReport merge_reports(const std::string& run_id, const std::vector<EvalReport>& parts);

enum class TableFormat { Text, Json };
// Rows are runs in the given order, columns the shared metric keys.
std::string ablation_table(const std::vector<EvalReport>& runs, TableFormat format = TableFormat::Text);

// Sampling-based evaluation of a model on story groups: each group's prompts
// are generated, its masks locate the character crops and its frames provide
// the reference bucket.
struct EvalOptions {
    std::string run_id = "run";
    SampleOptions sample;
    bool with_reference = false;
    std::vector<int64_t> dice_timesteps{100, 300, 500, 700, 900};
    uint64_t dice_seed = kDefaultSeed;
    std::vector<std::string> metrics;  // subset of metric_names(); empty means all
    std::string config_hash;
};

// `reference`, when given, replaces the group's own crops as the reference
// bucket, e.g. crops of the same identity taken from another story.
EvalReport evaluate_group(StoryModel<float>& model, const StoryGroup& group, const EvalOptions& options,
                          const IdBucket* reference = nullptr);
EvalReport evaluate_groups(StoryModel<float>& model, const std::vector<StoryGroup>& groups,
                           const EvalOptions& options);

}  // namespace storynizor
