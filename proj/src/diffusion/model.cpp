#include <cmath>
#include <stdexcept>

#include "storynizor/diffusion.hpp"

namespace storynizor {

Tensor<float> encode_latents(const Tensor<float>& images, int factor) {
    if (images.rank() != 4) throw std::invalid_argument("encode_latents: expected [F, S, S, C]");
    const int64_t f = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
    if (h % factor || w % factor) throw std::invalid_argument("encode_latents: size not divisible by factor");
    const int64_t oh = h / factor, ow = w / factor, oc = c * factor * factor;
    Tensor<float> out({f, oh, ow, oc});
    for (int64_t n = 0; n < f; ++n)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                for (int64_t ch = 0; ch < c; ++ch) {
                    const int64_t sub = (y % factor) * factor + (x % factor);
                    out[((n * oh + y / factor) * ow + x / factor) * oc + sub * c + ch] =
                        images[((n * h + y) * w + x) * c + ch];
                }
    return out;
}

Tensor<float> decode_latents(const Tensor<float>& latents, int factor) {
    if (latents.rank() != 4) throw std::invalid_argument("decode_latents: expected [F, h, w, C]");
    const int64_t f = latents.dim(0), oh = latents.dim(1), ow = latents.dim(2), oc = latents.dim(3);
    if (oc % (factor * factor)) throw std::invalid_argument("decode_latents: channels not divisible by factor^2");
    const int64_t c = oc / (factor * factor), h = oh * factor, w = ow * factor;
    Tensor<float> out({f, h, w, c});
    for (int64_t n = 0; n < f; ++n)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                for (int64_t ch = 0; ch < c; ++ch) {
                    const int64_t sub = (y % factor) * factor + (x % factor);
                    out[((n * h + y) * w + x) * c + ch] = latents[((n * oh + y / factor) * ow + x / factor) * oc + sub * c + ch];
                }
    return out;
}

template <typename T>
TextEncoder<T>::TextEncoder(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng)
    : length_(cfg.text_length), width_(cfg.text_width), heads_(cfg.heads) {
    const int vocab = Vocabulary::builtin().size();
    tokens_ = store.create("text.tokens", uniform_init<T>({vocab, width_}, 1.0, rng));
    positions_ = store.create("text.positions", uniform_init<T>({length_, width_}, 0.1, rng));
    for (int l = 0; l < cfg.text_layers; ++l) {
        const std::string p = "text.layers." + std::to_string(l);
        Layer L;
        L.norm1 = LayerNorm<T>(store, p + ".norm1", width_);
        L.norm2 = LayerNorm<T>(store, p + ".norm2", width_);
        L.q = Linear<T>(store, p + ".q", width_, width_, rng, false);
        L.k = Linear<T>(store, p + ".k", width_, width_, rng, false);
        L.v = Linear<T>(store, p + ".v", width_, width_, rng, false);
        L.out = Linear<T>(store, p + ".out", width_, width_, rng);
        L.ff1 = Linear<T>(store, p + ".ff1", width_, 4 * width_, rng);
        L.ff2 = Linear<T>(store, p + ".ff2", 4 * width_, width_, rng);
        layers_.push_back(std::move(L));
    }
    norm_out_ = LayerNorm<T>(store, "text.norm_out", width_);
}

template <typename T>
Var<T> TextEncoder<T>::operator()(const std::vector<std::vector<int>>& ids) const {
    std::vector<int> flat;
    for (const auto& row : ids) {
        if (static_cast<int>(row.size()) != length_)
            throw std::invalid_argument("text encoder expects " + std::to_string(length_) + " ids per prompt");
        flat.insert(flat.end(), row.begin(), row.end());
    }
    const auto f = static_cast<int64_t>(ids.size());
    auto x = ag::reshape(ag::embedding(tokens_, std::span<const int>(flat)), {f, length_, width_});
    x = ag::add_leading(x, positions_);
    for (const auto& L : layers_) {
        auto n = L.norm1(x);
        x = ag::add(x, L.out(dot_product_attention(L.q(n), L.k(n), L.v(n), heads_)));
        x = ag::add(x, L.ff2(ag::gelu(L.ff1(L.norm2(x)))));
    }
    return norm_out_(x);
}

template <typename T>
typename UNet<T>::ResBlock UNet<T>::make_res(ParamStore<T>& store, const std::string& prefix, int in, int out,
                                             Rng& rng) {
    ResBlock rb;
    rb.norm1 = GroupNorm<T>(store, prefix + ".norm1", in, groups_);
    rb.conv1 = Conv2d<T>(store, prefix + ".conv1", in, out, 3, 1, 1, rng);
    rb.temb = Linear<T>(store, prefix + ".temb", 2 * cfg_.unet_channels[0], out, rng);
    rb.norm2 = GroupNorm<T>(store, prefix + ".norm2", out, groups_);
    rb.conv2 = Conv2d<T>(store, prefix + ".conv2", out, out, 3, 1, 1, rng);
    rb.has_skip = in != out;
    if (rb.has_skip) rb.skip = Conv2d<T>(store, prefix + ".skip", in, out, 1, 1, 0, rng);
    return rb;
}

template <typename T>
int UNet<T>::make_attn(ParamStore<T>& store, int channels, int resolution, Rng& rng) {
    AttnBlock ab;
    ab.index = static_cast<int>(attn_.size());
    ab.channels = channels;
    const std::string p = "unet.attn." + std::to_string(ab.index);
    const int d = cfg_.text_width;
    ab.norm = GroupNorm<T>(store, p + ".norm", channels, groups_);
    ab.proj_in = Linear<T>(store, p + ".proj_in", channels, channels, rng);
    ab.ln1 = LayerNorm<T>(store, p + ".ln1", channels);
    ab.ln2 = LayerNorm<T>(store, p + ".ln2", channels);
    ab.ln3 = LayerNorm<T>(store, p + ".ln3", channels);
    ab.q1 = Linear<T>(store, p + ".attn1.to_q", channels, channels, rng, false);
    ab.k1 = Linear<T>(store, p + ".attn1.to_k", channels, channels, rng, false);
    ab.v1 = Linear<T>(store, p + ".attn1.to_v", channels, channels, rng, false);
    ab.o1 = Linear<T>(store, p + ".attn1.to_out", channels, channels, rng);
    ab.q2 = Linear<T>(store, p + ".attn2.to_q", channels, channels, rng, false);
    ab.k2 = Linear<T>(store, p + ".attn2.to_k", d, channels, rng, false);
    ab.v2 = Linear<T>(store, p + ".attn2.to_v", d, channels, rng, false);
    ab.o2 = Linear<T>(store, p + ".attn2.to_out", channels, channels, rng);
    ab.ff1 = Linear<T>(store, p + ".ff1", channels, 4 * channels, rng);
    ab.ff2 = Linear<T>(store, p + ".ff2", 4 * channels, channels, rng);
    ab.proj_out = Linear<T>(store, p + ".proj_out", channels, channels, rng);
    ab.identity = IdentityAttention<T>(store, "injector.ida." + std::to_string(ab.index), channels,
                                       cfg_.resampler_width(), rng);
    attn_.push_back(std::move(ab));
    attn_res_.push_back(resolution);
    return attn_.back().index;
}

template <typename T>
UNet<T>::UNet(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng) : cfg_(cfg), groups_(cfg.norm_groups) {
    cfg.validate();
    const auto& ch = cfg.unet_channels;
    const int levels = cfg.levels();
    const int temb = 2 * ch[0];
    time1_ = Linear<T>(store, "unet.time.1", ch[0], temb, rng);
    time2_ = Linear<T>(store, "unet.time.2", temb, temb, rng);
    conv_in_ = Conv2d<T>(store, "unet.conv_in", cfg.latent_channels(), ch[0], 3, 1, 1, rng);
    levels_.resize(static_cast<size_t>(levels));

    int res = cfg.latent_size();
    int prev = ch[0];
    for (int l = 0; l < levels; ++l) {
        auto& L = levels_[static_cast<size_t>(l)];
        L.channels = ch[static_cast<size_t>(l)];
        const std::string p = "unet.down." + std::to_string(l);
        L.down_res = make_res(store, p + ".res", prev, L.channels, rng);
        if (cfg.has_attention(l)) L.down_attn = make_attn(store, L.channels, res, rng);
        if (l + 1 < levels) {
            L.downsample = Conv2d<T>(store, p + ".downsample", L.channels, L.channels, 3, 2, 1, rng);
            res /= 2;
        }
        prev = L.channels;
    }
    mid1_ = make_res(store, "unet.mid.res1", prev, prev, rng);
    if (cfg.has_attention(levels - 1)) mid_attn_ = make_attn(store, prev, res, rng);
    mid2_ = make_res(store, "unet.mid.res2", prev, prev, rng);
    for (int l = levels - 1; l >= 0; --l) {
        auto& L = levels_[static_cast<size_t>(l)];
        const std::string p = "unet.up." + std::to_string(l);
        L.up_res = make_res(store, p + ".res", prev + L.channels, L.channels, rng);
        if (cfg.has_attention(l)) L.up_attn = make_attn(store, L.channels, res, rng);
        if (l > 0) {
            L.upsample = Conv2d<T>(store, p + ".upsample", L.channels, L.channels, 3, 1, 1, rng);
            res *= 2;
        }
        prev = L.channels;
    }
    norm_out_ = GroupNorm<T>(store, "unet.norm_out", prev, groups_);
    conv_out_ = Conv2d<T>(store, "unet.conv_out", prev, cfg.latent_channels(), 3, 1, 1, rng, 0.1);
}

namespace {

template <typename T>
Var<T> norm_nhwc(const GroupNorm<T>& gn, const Var<T>& x) {
    const auto& s = x.shape();
    return ag::reshape(gn(ag::reshape(x, {s[0], s[1] * s[2], s[3]})), s);
}

template <typename T>
Tensor<T> timestep_features(const std::vector<int64_t>& timesteps, int dim) {
    const int half = dim / 2;
    Tensor<T> out({static_cast<int64_t>(timesteps.size()), dim});
    for (size_t i = 0; i < timesteps.size(); ++i)
        for (int j = 0; j < half; ++j) {
            const double freq = std::exp(-std::log(10000.0) * j / half);
            const double a = static_cast<double>(timesteps[i]) * freq;
            out[static_cast<int64_t>(i) * dim + j] = static_cast<T>(std::cos(a));
            out[static_cast<int64_t>(i) * dim + half + j] = static_cast<T>(std::sin(a));
        }
    return out;
}

}  // namespace

template <typename T>
Var<T> UNet<T>::res_forward(const ResBlock& rb, const Var<T>& x, const Var<T>& temb) const {
    auto h = rb.conv1(ag::silu(norm_nhwc(rb.norm1, x)));
    const auto& s = h.shape();
    h = ag::reshape(ag::add_rows(ag::reshape(h, {s[0], s[1] * s[2], s[3]}), rb.temb(temb)), s);
    h = rb.conv2(ag::silu(norm_nhwc(rb.norm2, h)));
    return ag::add(h, rb.has_skip ? rb.skip(x) : x);
}

template <typename T>
Var<T> UNet<T>::attn_forward(const AttnBlock& ab, const Var<T>& x, const Var<T>& text, const FaceCondition<T>* face,
                             int frames) const {
    const auto& s = x.shape();
    const int64_t f = s[0], height = s[1], width = s[2], c = s[3];
    const int heads = cfg_.heads;
    auto xin = ag::reshape(x, {f, height * width, c});
    auto h = ab.proj_in(ab.norm(xin));

    auto n1 = ab.ln1(h);
    auto q1 = ab.q1(n1), k1 = ab.k1(n1), v1 = ab.v1(n1);
    Var<T> a;
    if (auto* hooks = hooks_.get())
        a = hooks->self_attention(ab.index, q1, k1, v1, height, width, heads, frames);
    else if (plain_ == PlainAttention::Joint)
        a = joint_attention(q1, k1, v1, heads, frames);
    else
        a = dot_product_attention(q1, k1, v1, heads);
    h = ag::add(h, ab.o1(a));

    auto q2 = ab.q2(ab.ln2(h));
    auto probs = attention_probs(q2, ab.k2(text), heads);
    if (auto* hooks = hooks_.get()) hooks->cross_attention_probs(ab.index, probs, height, width, heads);
    auto cross = attend(probs, ab.v2(text), heads);
    if (face) cross = ag::add(cross, ab.identity(q2, face->embeddings, heads));
    h = ag::add(h, ab.o2(cross));

    h = ag::add(h, ab.ff2(ag::gelu(ab.ff1(ab.ln3(h)))));
    return ag::reshape(ag::add(ab.proj_out(h), xin), s);
}

template <typename T>
Var<T> UNet<T>::operator()(const Var<T>& z, const std::vector<int64_t>& timesteps, const Var<T>& text,
                           const FaceCondition<T>* face, int frames) const {
    const auto& s = z.shape();
    if (s.size() != 4 || s[1] != cfg_.latent_size() || s[2] != cfg_.latent_size() || s[3] != cfg_.latent_channels())
        throw std::invalid_argument("unet: latents must be [F, " + std::to_string(cfg_.latent_size()) + ", " +
                                    std::to_string(cfg_.latent_size()) + ", " + std::to_string(cfg_.latent_channels()) +
                                    "], got " + shape_str(s));
    const int64_t f = s[0];
    if (frames <= 0 || f % frames != 0)
        throw std::invalid_argument("unet: " + std::to_string(f) + " frames do not split into stories of " +
                                    std::to_string(frames));
    if (static_cast<int64_t>(timesteps.size()) != f) throw std::invalid_argument("unet: one timestep per frame");
    if (text.shape() != Shape{f, cfg_.text_length, cfg_.text_width})
        throw std::invalid_argument("unet: text embedding " + shape_str(text.shape()) + " does not match the batch");
    if (face && face->frames() != f) throw std::invalid_argument("unet: face condition does not match the batch");

    auto temb = Var<T>(timestep_features<T>(timesteps, cfg_.unet_channels[0]));
    temb = ag::silu(time2_(ag::silu(time1_(temb))));

    auto h = conv_in_(z);
    std::vector<Var<T>> skips;
    for (size_t l = 0; l < levels_.size(); ++l) {
        const auto& L = levels_[l];
        h = res_forward(L.down_res, h, temb);
        if (L.down_attn) h = attn_forward(attn_[static_cast<size_t>(*L.down_attn)], h, text, face, frames);
        skips.push_back(h);
        if (l + 1 < levels_.size()) h = L.downsample(h);
    }
    h = res_forward(mid1_, h, temb);
    if (mid_attn_) h = attn_forward(attn_[static_cast<size_t>(*mid_attn_)], h, text, face, frames);
    h = res_forward(mid2_, h, temb);
    for (size_t i = levels_.size(); i-- > 0;) {
        const auto& L = levels_[i];
        h = res_forward(L.up_res, ag::concat_last(h, skips[i]), temb);
        if (L.up_attn) h = attn_forward(attn_[static_cast<size_t>(*L.up_attn)], h, text, face, frames);
        if (i > 0) h = L.upsample(ag::upsample_nearest2x(h));
    }
    return conv_out_(ag::silu(norm_nhwc(norm_out_, h)));
}

template <typename T>
StoryModel<T>::StoryModel(const ModelConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(init_seed);
    text_ = std::make_unique<TextEncoder<T>>(store_, cfg_, rng);
    unet_ = std::make_unique<UNet<T>>(store_, cfg_, rng);
    injector_ = std::make_unique<IdInjector<T>>(store_, cfg_, rng);
}

template <typename T>
Var<T> StoryModel<T>::encode_prompts(const std::vector<std::string>& prompts) const {
    std::vector<std::vector<int>> ids;
    for (const auto& p : prompts) ids.push_back(encode_for_model(p, cfg_.text_length));
    return (*text_)(ids);
}

template <typename T>
Var<T> StoryModel<T>::null_text(int64_t frames) const {
    return (*text_)(std::vector<std::vector<int>>(static_cast<size_t>(frames), null_prompt_ids(cfg_.text_length)));
}

template class TextEncoder<float>;
template class TextEncoder<double>;
template class UNet<float>;
template class UNet<double>;
template class StoryModel<float>;
template class StoryModel<double>;

}  // namespace storynizor
