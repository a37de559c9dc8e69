#pragma once

#include <string>
#include <vector>

#include "storynizor/config.hpp"
#include "storynizor/image.hpp"
#include "storynizor/nn.hpp"

namespace storynizor {

enum class Provenance { Real, Synthetic };

// Reference images of one identity. After shuffle_bucket, image n conditions
// frame n; source_frames[n] records which frame it was originally paired with.
struct IdBucket {
    std::string identity_id;
    std::vector<Image> images;
    std::vector<int> source_frames;
    Provenance provenance = Provenance::Synthetic;

    int size() const { return static_cast<int>(images.size()); }
};

// Uniform seeded permutation (Fisher-Yates). Fixed points are allowed.
IdBucket shuffle_bucket(const IdBucket& bucket, uint64_t seed);

// Reference images in a directory, ordered by filename.
IdBucket load_reference_dir(const std::string& dir, int reference_size);

template <typename T>
struct FaceCondition {
    Var<T> embeddings;  // [F, tokens, width]
    std::vector<bool> null_flags;
    int64_t frames() const { return embeddings.dim(0); }
};

// Pluggable encoders. Inputs are [F, R, R, 3] tensors in [-1, 1].
template <typename T>
class IdEncoder {
public:
    virtual ~IdEncoder() = default;
    // -> [F, D], unit-norm rows
    virtual Var<T> encode(const Var<T>& images) const = 0;
    virtual int feature_dim() const = 0;
};

template <typename T>
class ImageEncoder {
public:
    virtual ~ImageEncoder() = default;
    // -> [F, P, width]
    virtual Var<T> encode(const Var<T>& images) const = 0;
    virtual int tokens() const = 0;
};

// Three stride-2 convolutions and a linear head.
template <typename T>
class ToyIdEncoder : public IdEncoder<T> {
public:
    ToyIdEncoder(ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg, Rng& rng);
    Var<T> encode(const Var<T>& images) const override;
    int feature_dim() const override { return dim_; }

private:
    int size_, dim_;
    Conv2d<T> c1_, c2_, c3_;
    Linear<T> head_;
};

// Non-overlapping patches, linear projection, learned positions.
template <typename T>
class ToyPatchEncoder : public ImageEncoder<T> {
public:
    ToyPatchEncoder(ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg, Rng& rng);
    Var<T> encode(const Var<T>& images) const override;
    int tokens() const override { return grid_ * grid_; }

private:
    int size_, grid_;
    Conv2d<T> patchify_;
    Var<T> positions_;
};

// Learned latent queries cross-attending over [id token; patch tokens].
template <typename T>
class Resampler {
public:
    Resampler(ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg, int id_dim, Rng& rng);
    // id_features [F, D], image_features [F, P, width] -> [F, tokens, width]
    Var<T> operator()(const Var<T>& id_features, const Var<T>& image_features) const;

private:
    struct Block {
        LayerNorm<T> norm_q, norm_kv, norm_ff;
        Linear<T> q, k, v, out, ff1, ff2;
    };
    int tokens_, width_, heads_;
    Var<T> latents_;
    Linear<T> id_proj_, proj_out_;
    LayerNorm<T> norm_out_;
    std::vector<Block> blocks_;
};

// Extra cross-attention over identity tokens sharing the layer's queries,
// gated by a learned scale that starts at zero.
template <typename T>
class IdentityAttention {
public:
    IdentityAttention() = default;
    IdentityAttention(ParamStore<T>& store, const std::string& prefix, int query_dim, int cond_width, Rng& rng);
    // q [F, S, C], cond [F, tokens, width] -> [F, S, C]
    Var<T> operator()(const Var<T>& q, const Var<T>& cond, int heads) const;
    const Var<T>& scale() const { return scale_; }

private:
    Linear<T> k_, v_;
    Var<T> scale_;
};

// Encoders, resampler and learned null tokens, all under "injector.".
template <typename T>
class IdInjector {
public:
    IdInjector(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng);

    Var<T> encode_id(const Var<T>& images) const;
    Var<T> encode_image(const Var<T>& images) const;
    FaceCondition<T> resample(const Var<T>& id_features, const Var<T>& image_features) const;
    // Full path from reference images [F, R, R, 3].
    FaceCondition<T> condition(const Var<T>& images) const;
    FaceCondition<T> null_condition(int64_t frames) const;
    const Var<T>& null_tokens() const { return null_tokens_; }

private:
    int size_;
    ToyIdEncoder<T> id_encoder_;
    ToyPatchEncoder<T> image_encoder_;
    Resampler<T> resampler_;
    Var<T> null_tokens_;
};

struct DropFlags {
    std::vector<bool> text;
    std::vector<bool> face;
};

// Independent Bernoulli(p) draws per frame for each condition.
DropFlags draw_drop_flags(int64_t frames, double p, Rng& rng);

// Replaces dropped rows of text_emb [F, L, D] with null_text [1, L, D] and of
// the face condition with the learned null tokens.
template <typename T>
Var<T> apply_text_drop(const Var<T>& text_emb, const Var<T>& null_text, const std::vector<bool>& dropped);
template <typename T>
FaceCondition<T> apply_face_drop(const FaceCondition<T>& cond, const Var<T>& null_tokens,
                                 const std::vector<bool>& dropped);

template <typename T>
struct DroppedConditions {
    Var<T> text;
    FaceCondition<T> face;
    DropFlags flags;
};

// Draws the flags and applies both replacements. A missing face condition
// (no embeddings) is passed through untouched.
template <typename T>
DroppedConditions<T> drop_conditions(const Var<T>& text_emb, const Var<T>& null_text, const FaceCondition<T>& face,
                                     const Var<T>& null_tokens, double p, Rng& rng);

}  // namespace storynizor
