#include "storynizor/injector.hpp"

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <stdexcept>

namespace storynizor {

namespace {

template <typename T>
void require_images(const Var<T>& images, int size, const char* who) {
    const auto& s = images.shape();
    if (s.size() != 4 || s[1] != size || s[2] != size || s[3] != 3)
        throw std::invalid_argument(std::string(who) + ": expected [F, " + std::to_string(size) + ", " +
                                    std::to_string(size) + ", 3] images, got " + shape_str(s));
}

template <typename T>
Var<T> broadcast_rows(const Var<T>& p, int64_t frames) {
    Shape s{frames};
    s.insert(s.end(), p.shape().begin(), p.shape().end());
    return ag::add_leading(Var<T>(Tensor<T>(s)), p);
}

}  // namespace

IdBucket shuffle_bucket(const IdBucket& bucket, uint64_t seed) {
    std::vector<int> order(bucket.images.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order.begin(), order.end());
    IdBucket out;
    out.identity_id = bucket.identity_id;
    out.provenance = bucket.provenance;
    for (int i : order) {
        out.images.push_back(bucket.images[static_cast<size_t>(i)]);
        out.source_frames.push_back(bucket.source_frames.empty() ? i : bucket.source_frames[static_cast<size_t>(i)]);
    }
    return out;
}

IdBucket load_reference_dir(const std::string& dir, int reference_size) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw std::runtime_error("reference directory not found: " + dir);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("no .png reference images in " + dir);
    IdBucket b;
    b.identity_id = fs::path(dir).filename().string();
    b.provenance = Provenance::Real;
    for (size_t i = 0; i < files.size(); ++i) {
        Image im = read_png(files[i].string());
        if (im.channels == 1) {
            Image rgb(im.width, im.height, 3);
            for (int y = 0; y < im.height; ++y)
                for (int x = 0; x < im.width; ++x)
                    for (int c = 0; c < 3; ++c) rgb.at(x, y, c) = im.at(x, y);
            im = std::move(rgb);
        }
        if (im.width != reference_size || im.height != reference_size)
            im = resize_bilinear(im, reference_size, reference_size);
        b.images.push_back(std::move(im));
        b.source_frames.push_back(static_cast<int>(i));
    }
    return b;
}

template <typename T>
ToyIdEncoder<T>::ToyIdEncoder(ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg, Rng& rng)
    : size_(cfg.reference_size), dim_(cfg.id_feature_dim) {
    if (size_ % 8 != 0) throw std::invalid_argument("reference_size must be divisible by 8");
    c1_ = Conv2d<T>(store, prefix + ".conv1", 3, 16, 3, 2, 1, rng);
    c2_ = Conv2d<T>(store, prefix + ".conv2", 16, 32, 3, 2, 1, rng);
    c3_ = Conv2d<T>(store, prefix + ".conv3", 32, 64, 3, 2, 1, rng);
    head_ = Linear<T>(store, prefix + ".head", (size_ / 8) * (size_ / 8) * 64, dim_, rng);
}

template <typename T>
Var<T> ToyIdEncoder<T>::encode(const Var<T>& images) const {
    require_images(images, size_, "encode_id");
    auto h = ag::silu(c1_(images));
    h = ag::silu(c2_(h));
    h = ag::silu(c3_(h));
    h = ag::reshape(h, {images.dim(0), h.numel() / images.dim(0)});
    return ag::l2_normalize_rows(head_(h), T(1e-12));
}

template <typename T>
ToyPatchEncoder<T>::ToyPatchEncoder(ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg,
                                    Rng& rng)
    : size_(cfg.reference_size), grid_(cfg.reference_size / cfg.patch_size) {
    patchify_ = Conv2d<T>(store, prefix + ".patchify", 3, cfg.resampler_width(), cfg.patch_size, cfg.patch_size, 0, rng);
    positions_ = store.create(prefix + ".positions",
                              uniform_init<T>({grid_ * grid_, cfg.resampler_width()}, 0.02, rng));
}

template <typename T>
Var<T> ToyPatchEncoder<T>::encode(const Var<T>& images) const {
    require_images(images, size_, "encode_image");
    auto p = patchify_(images);
    p = ag::reshape(p, {images.dim(0), static_cast<int64_t>(grid_) * grid_, p.dim(-1)});
    return ag::add_leading(p, positions_);
}

template <typename T>
Resampler<T>::Resampler(ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg, int id_dim, Rng& rng)
    : tokens_(cfg.resampler_tokens), width_(cfg.resampler_width()), heads_(cfg.heads) {
    latents_ = store.create(prefix + ".latents", uniform_init<T>({tokens_, width_}, 1.0, rng));
    id_proj_ = Linear<T>(store, prefix + ".id_proj", id_dim, width_, rng);
    for (int b = 0; b < cfg.resampler_blocks; ++b) {
        const std::string p = prefix + ".blocks." + std::to_string(b);
        Block blk;
        blk.norm_q = LayerNorm<T>(store, p + ".norm_q", width_);
        blk.norm_kv = LayerNorm<T>(store, p + ".norm_kv", width_);
        blk.norm_ff = LayerNorm<T>(store, p + ".norm_ff", width_);
        blk.q = Linear<T>(store, p + ".q", width_, width_, rng, false);
        blk.k = Linear<T>(store, p + ".k", width_, width_, rng, false);
        blk.v = Linear<T>(store, p + ".v", width_, width_, rng, false);
        blk.out = Linear<T>(store, p + ".out", width_, width_, rng);
        blk.ff1 = Linear<T>(store, p + ".ff1", width_, 4 * width_, rng);
        blk.ff2 = Linear<T>(store, p + ".ff2", 4 * width_, width_, rng);
        blocks_.push_back(std::move(blk));
    }
    norm_out_ = LayerNorm<T>(store, prefix + ".norm_out", width_);
    proj_out_ = Linear<T>(store, prefix + ".proj_out", width_, width_, rng);
}

template <typename T>
Var<T> Resampler<T>::operator()(const Var<T>& id_features, const Var<T>& image_features) const {
    const int64_t f = id_features.dim(0);
    if (image_features.dim(0) != f)
        throw std::invalid_argument("resample: " + std::to_string(f) + " id vectors but " +
                                    std::to_string(image_features.dim(0)) + " image feature grids");
    if (image_features.shape().size() != 3 || image_features.dim(2) != width_)
        throw std::invalid_argument("resample: image features must be [F, P, " + std::to_string(width_) + "]");
    const int64_t p = image_features.dim(1);
    auto id_tok = id_proj_(id_features);
    auto ctx = ag::reshape(ag::concat_last(id_tok, ag::reshape(image_features, {f, p * width_})), {f, p + 1, width_});

    auto x = broadcast_rows(latents_, f);
    for (const auto& b : blocks_) {
        auto qn = b.norm_q(x);
        auto kv = b.norm_kv(ctx);
        x = ag::add(x, b.out(dot_product_attention(b.q(qn), b.k(kv), b.v(kv), heads_)));
        x = ag::add(x, b.ff2(ag::gelu(b.ff1(b.norm_ff(x)))));
    }
    return proj_out_(norm_out_(x));
}

template <typename T>
IdentityAttention<T>::IdentityAttention(ParamStore<T>& store, const std::string& prefix, int query_dim,
                                        int cond_width, Rng& rng) {
    k_ = Linear<T>(store, prefix + ".k", cond_width, query_dim, rng, false);
    v_ = Linear<T>(store, prefix + ".v", cond_width, query_dim, rng, false);
    scale_ = store.create(prefix + ".scale", Tensor<T>({1}, T(0)));
}

template <typename T>
Var<T> IdentityAttention<T>::operator()(const Var<T>& q, const Var<T>& cond, int heads) const {
    if (cond.dim(0) != q.dim(0))
        throw std::invalid_argument("identity attention: condition covers " + std::to_string(cond.dim(0)) +
                                    " frames, latents " + std::to_string(q.dim(0)));
    if (cond.dim(-1) != k_.weight().dim(0))
        throw std::invalid_argument("identity attention: condition width " + std::to_string(cond.dim(-1)) +
                                    " does not match " + std::to_string(k_.weight().dim(0)));
    return ag::mul_scalar_var(dot_product_attention(q, k_(cond), v_(cond), heads), scale_);
}

template <typename T>
IdInjector<T>::IdInjector(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng)
    : size_(cfg.reference_size),
      id_encoder_(store, "injector.id_encoder", cfg, rng),
      image_encoder_(store, "injector.image_encoder", cfg, rng),
      resampler_(store, "injector.resampler", cfg, cfg.id_feature_dim, rng) {
    null_tokens_ =
        store.create("injector.null_tokens", uniform_init<T>({cfg.resampler_tokens, cfg.resampler_width()}, 1.0, rng));
}

template <typename T>
Var<T> IdInjector<T>::encode_id(const Var<T>& images) const {
    return id_encoder_.encode(images);
}

template <typename T>
Var<T> IdInjector<T>::encode_image(const Var<T>& images) const {
    return image_encoder_.encode(images);
}

template <typename T>
FaceCondition<T> IdInjector<T>::resample(const Var<T>& id_features, const Var<T>& image_features) const {
    FaceCondition<T> c;
    c.embeddings = resampler_(id_features, image_features);
    c.null_flags.assign(static_cast<size_t>(id_features.dim(0)), false);
    return c;
}

template <typename T>
FaceCondition<T> IdInjector<T>::condition(const Var<T>& images) const {
    return resample(encode_id(images), encode_image(images));
}

template <typename T>
FaceCondition<T> IdInjector<T>::null_condition(int64_t frames) const {
    FaceCondition<T> c;
    c.embeddings = broadcast_rows(null_tokens_, frames);
    c.null_flags.assign(static_cast<size_t>(frames), true);
    return c;
}

DropFlags draw_drop_flags(int64_t frames, double p, Rng& rng) {
    if (p < 0 || p > 1) throw std::invalid_argument("dropout probability must lie in [0, 1]");
    DropFlags d;
    for (int64_t f = 0; f < frames; ++f) {
        d.text.push_back(rng.bernoulli(p));
        d.face.push_back(rng.bernoulli(p));
    }
    return d;
}

template <typename T>
Var<T> apply_text_drop(const Var<T>& text_emb, const Var<T>& null_text, const std::vector<bool>& dropped) {
    if (std::none_of(dropped.begin(), dropped.end(), [](bool b) { return b; })) return text_emb;
    const int64_t f = text_emb.dim(0);
    if (static_cast<int64_t>(dropped.size()) != f) throw std::invalid_argument("text drop flags do not match frames");
    Shape one = text_emb.shape();
    one[0] = 1;
    auto null_row = ag::reshape(null_text, one);
    std::vector<Var<T>> rows;
    for (int64_t i = 0; i < f; ++i) rows.push_back(dropped[static_cast<size_t>(i)] ? null_row : ag::slice0(text_emb, i, 1));
    return ag::concat0(std::span<const Var<T>>(rows));
}

template <typename T>
FaceCondition<T> apply_face_drop(const FaceCondition<T>& cond, const Var<T>& null_tokens,
                                 const std::vector<bool>& dropped) {
    if (!cond.embeddings || std::none_of(dropped.begin(), dropped.end(), [](bool b) { return b; })) return cond;
    const int64_t f = cond.frames();
    if (static_cast<int64_t>(dropped.size()) != f) throw std::invalid_argument("face drop flags do not match frames");
    Shape one = cond.embeddings.shape();
    one[0] = 1;
    auto null_row = ag::reshape(null_tokens, one);
    FaceCondition<T> out;
    std::vector<Var<T>> rows;
    for (int64_t i = 0; i < f; ++i) {
        const bool d = dropped[static_cast<size_t>(i)];
        rows.push_back(d ? null_row : ag::slice0(cond.embeddings, i, 1));
        out.null_flags.push_back(d || (i < static_cast<int64_t>(cond.null_flags.size()) && cond.null_flags[i]));
    }
    out.embeddings = ag::concat0(std::span<const Var<T>>(rows));
    return out;
}

template <typename T>
DroppedConditions<T> drop_conditions(const Var<T>& text_emb, const Var<T>& null_text, const FaceCondition<T>& face,
                                     const Var<T>& null_tokens, double p, Rng& rng) {
    DroppedConditions<T> out;
    out.flags = draw_drop_flags(text_emb.dim(0), p, rng);
    out.text = apply_text_drop(text_emb, null_text, out.flags.text);
    out.face = apply_face_drop(face, null_tokens, out.flags.face);
    return out;
}

#define STORYNIZOR_INSTANTIATE_INJECTOR(T)                                                                     \
    template class ToyIdEncoder<T>;                                                                            \
    template class ToyPatchEncoder<T>;                                                                         \
    template class Resampler<T>;                                                                               \
    template class IdentityAttention<T>;                                                                       \
    template class IdInjector<T>;                                                                              \
    template Var<T> apply_text_drop(const Var<T>&, const Var<T>&, const std::vector<bool>&);                   \
    template FaceCondition<T> apply_face_drop(const FaceCondition<T>&, const Var<T>&, const std::vector<bool>&); \
    template DroppedConditions<T> drop_conditions(const Var<T>&, const Var<T>&, const FaceCondition<T>&,       \
                                                  const Var<T>&, double, Rng&);

STORYNIZOR_INSTANTIATE_INJECTOR(float)
STORYNIZOR_INSTANTIATE_INJECTOR(double)

}  // namespace storynizor
