// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Usage: acceptance <path to storynizor binary> [work dir]
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "storynizor/data.hpp"
#include "storynizor/diffusion.hpp"
#include "storynizor/eval.hpp"
#include "storynizor/injector.hpp"
#include "storynizor/losses.hpp"
#include "storynizor/synchronizer.hpp"
#include "tiny.hpp"

using namespace storynizor;
using storynizor::testing::gradcheck;
using storynizor::testing::random_tensor;
using storynizor::testing::tiny_config;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path g_work;
std::string g_cli;

// Plain softmax attention over the keys of every frame of a story, no bias.
Tensor<double> full_sequence_attention(const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& v,
                                       int heads, int frames) {
    const int64_t bn = q.dim(0), s = q.dim(1), c = q.dim(2), d = c / heads;
    Tensor<double> out(q.shape);
    std::vector<double> w(static_cast<size_t>(frames * s));
    for (int64_t b = 0; b < bn / frames; ++b)
        for (int h = 0; h < heads; ++h)
            for (int64_t qi = b * frames * s; qi < (b + 1) * frames * s; ++qi) {
                double mx = -1e300;
                for (int64_t j = 0; j < frames * s; ++j) {
                    const int64_t kj = b * frames * s + j;
                    double dot = 0;
                    for (int64_t e = 0; e < d; ++e) dot += q[qi * c + h * d + e] * k[kj * c + h * d + e];
                    w[j] = dot / std::sqrt(double(d));
                    mx = std::max(mx, w[j]);
                }
                double z = 0;
                for (auto& x : w) z += (x = std::exp(x - mx));
                for (int64_t e = 0; e < d; ++e) {
                    double acc = 0;
                    for (int64_t j = 0; j < frames * s; ++j) acc += w[j] / z * v[(b * frames * s + j) * c + h * d + e];
                    out[qi * c + h * d + e] = acc;
                }
            }
    return out;
}

Outcome criterion1() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(101);
    double worst = 0;
    const int shapes = 24;
    for (int trial = 0; trial < shapes; ++trial) {
        const int heads = 1 + static_cast<int>(rng.uniform_int(3));
        const int frames = 1 + static_cast<int>(rng.uniform_int(4));
        const int stories = 1 + static_cast<int>(rng.uniform_int(2));
        const int64_t s = 1 + static_cast<int64_t>(rng.uniform_int(16));
        const int64_t c = heads * (1 + static_cast<int64_t>(rng.uniform_int(8)));
        const Shape shape{stories * frames, s, c};
        const auto q = random_tensor(shape, rng), k = random_tensor(shape, rng), v = random_tensor(shape, rng);
        Var<float> ones(Tensor<float>({stories * frames, s}, 1.0f));
        const auto got = amsa_attention(Var<float>(q.cast<float>()), Var<float>(k.cast<float>()),
                                        Var<float>(v.cast<float>()), ones, heads, frames)
                             .value();
        const auto want = full_sequence_attention(q, k, v, heads, frames);
        for (int64_t i = 0; i < got.numel(); ++i) worst = std::max(worst, std::abs(double(got[i]) - want[i]));
    }
    const double t = seconds_since(t0);
    return {worst <= 1e-5 && t < 60, fmt("%.0f shapes, max error %.2e (float32), %.2fs", double(shapes), worst, t)};
}

Outcome criterion2() {
    double worst = 0;
    for (double eps : {1e-6, 1e-3, 0.5}) {
        // One query in frame 0, its own key and one key in frame 1, equal logits.
        // Values one-hot on the own-frame key make the output the weight itself.
        Tensor<double> q({2, 1, 1}, 0.0), k({2, 1, 1}, 0.0), v({2, 1, 1}, std::vector<double>{1.0, 0.0});
        Tensor<double> m({2, 1}, std::vector<double>{1.0, eps});
        const auto out = amsa_attention(Var<double>(q), Var<double>(k), Var<double>(v), Var<double>(m), 1, 2).value();
        Tensor<double> v2({2, 1, 1}, std::vector<double>{0.0, 1.0});
        const auto other = amsa_attention(Var<double>(q), Var<double>(k), Var<double>(v2), Var<double>(m), 1, 2).value();
        worst = std::max(worst, std::abs(out[0] - 1.0 / (1.0 + eps)));
        worst = std::max(worst, std::abs(other[0] - eps / (1.0 + eps)));
    }
    return {worst <= 1e-6, fmt("eps in {1e-6, 1e-3, 0.5}, max weight error %.2e", worst)};
}

Outcome criterion3() {
    Rng rng(303);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int64_t h = 1 + static_cast<int64_t>(rng.uniform_int(24)), w = 1 + static_cast<int64_t>(rng.uniform_int(24));
        Tensor<double> p({h, w}), g({h, w});
        for (auto& x : p.data) x = rng.uniform();
        for (auto& x : g.data) x = rng.bernoulli(0.4) ? 1.0 : 0.0;
        double inter = 0, pp = 0, gg = 0;
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                const double a = p[y * w + x], b = g[y * w + x];
                inter += a * b;
                pp += a * a;
                gg += b * b;
            }
        const double oracle = 1.0 - (2 * inter + kDiceSmoothing) / (pp + gg + kDiceSmoothing);
        worst = std::max(worst, std::abs(dice_term(Var<double>(p), g).item() - oracle));
    }
    Tensor<double> g({16, 16});
    for (int64_t i = 0; i < g.numel(); ++i) g[i] = (i % 3 == 0) ? 1.0 : 0.0;
    Tensor<double> inv(g.shape);
    for (int64_t i = 0; i < g.numel(); ++i) inv[i] = 1.0 - g[i];
    const double perfect = dice_term(Var<double>(g), g).item();
    const double disjoint = dice_term(Var<double>(inv), g).item();
    const bool ok = worst <= 1e-6 && std::abs(perfect) <= 1e-9 && std::abs(disjoint - 1.0) <= 1e-5;
    return {ok, fmt("100 pairs, max error %.2e; perfect %.2e; disjoint %.8f", worst, perfect, disjoint)};
}

TrainSample tiny_sample(const ModelConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    TrainSample s;
    s.group_id = "tiny";
    s.prompts = {"red circle hero running in forest", "red circle hero flying in city"};
    s.spans = {{{1, 3}}, {{1, 3}}};
    s.images = Tensor<float>({2, cfg.image_size, cfg.image_size, 3});
    for (auto& v : s.images.data) v = static_cast<float>(rng.uniform(-1, 1));
    const int r = map_resolution(cfg);
    for (int k = 0; k < 2; ++k) {
        Tensor<float> m({r, r});
        for (int y = 0; y < r; ++y)
            for (int x = 0; x < r; ++x) m[y * r + x] = (x >= 2 + k && x < 6 && y >= 2 && y < 6) ? 1.0f : 0.0f;
        s.masks.push_back(m);
    }
    s.bucket.identity_id = "tiny";
    for (int i = 0; i < 2; ++i) {
        Image im(cfg.reference_size, cfg.reference_size, 3);
        for (auto& p : im.pixels) p = static_cast<uint8_t>(rng.uniform_int(256));
        s.bucket.images.push_back(im);
        s.bucket.source_frames.push_back(i);
    }
    return s;
}

Outcome criterion4() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cfg = tiny_config();  // two UNet levels
    StoryModel<double> model(cfg, 404);
    const auto sample = tiny_sample(cfg, 404);
    Rng rng(404);
    const auto x0 = encode_latents(sample.images, cfg.latent_factor).cast<double>();
    const auto noise = random_tensor(x0.shape, rng);
    const auto zt = add_noise(x0, NoiseSchedule(cfg).alpha_bar(300), noise);
    std::vector<Tensor<double>> masks;
    for (const auto& m : sample.masks) masks.push_back(m.cast<double>());
    std::vector<std::vector<int>> ids;
    for (const auto& p : sample.prompts) ids.push_back(encode_for_model(p, cfg.text_length));
    const int r = map_resolution(cfg);

    Synchronizer<double> sync;
    model.unet().hooks().attach(&sync);
    auto loss = [&] {
        sync.begin_pass(sample.spans);
        auto eps = model.unet()(Var<double>(zt), {300, 300}, model.text_encoder()(ids), nullptr, 2);
        auto mpl = mask_perceptual_loss(sync.final_maps(r, r), masks);
        return total_loss(ldm_loss(eps, Var<double>(noise)), mpl, 0.5).value;
    };
    // The cross-attention query/key weights reach the loss through the maps.
    std::vector<Var<double>> params;
    for (const char* name : {"unet.attn.0.attn2.to_q.weight", "unet.attn.0.attn2.to_k.weight",
                             "unet.attn.2.attn2.to_k.weight", "unet.attn.1.attn1.to_q.weight",
                             "unet.attn.3.attn1.to_v.weight", "text.tokens", "unet.conv_in.weight"})
        params.push_back(model.params().get(name));
    for (auto& p : params) p.set_requires_grad(true);
    const auto res = gradcheck(loss, params, 4, 405, 1e-5);
    model.unet().hooks().detach();
    const double t = seconds_since(t0);
    return {res.checked >= 20 && res.max_rel_error < 1e-3 && t < 300,
            fmt("%.0f parameters, max relative error %.2e, %.1fs", double(res.checked), res.max_rel_error, t)};
}

Outcome criterion5() {
    IdBucket b;
    b.identity_id = "id";
    for (int i = 0; i < 4; ++i) {
        b.images.emplace_back(1, 1, 1, static_cast<uint8_t>(i));
        b.source_frames.push_back(i);
    }
    auto order = [](const IdBucket& x) {
        std::vector<int> o;
        for (const auto& im : x.images) o.push_back(im.pixels[0]);
        return o;
    };
    Rng seeds(505);
    bool multiset = true;
    for (int i = 0; i < 1000; ++i) {
        auto o = order(shuffle_bucket(b, seeds.next_u64()));
        std::sort(o.begin(), o.end());
        multiset = multiset && o == std::vector<int>{0, 1, 2, 3};
    }
    bool deterministic = true;
    for (uint64_t s = 0; s < 50; ++s) deterministic = deterministic && order(shuffle_bucket(b, s)) == order(shuffle_bucket(b, s));
    std::map<std::vector<int>, int> counts;
    const int trials = 48000;
    for (int i = 0; i < trials; ++i) counts[order(shuffle_bucket(b, seeds.next_u64()))]++;
    double worst = counts.size() == 24 ? 0.0 : 1.0;
    for (const auto& [p, c] : counts) worst = std::max(worst, std::abs(double(c) / trials - 1.0 / 24));
    return {multiset && deterministic && worst <= 0.02,
            std::string("multiset ") + (multiset ? "ok" : "broken") + ", deterministic " +
                (deterministic ? "yes" : "no") + fmt(", %.0f permutations seen, max frequency deviation %.4f",
                                                     double(counts.size()), worst)};
}

Outcome criterion6() {
    const auto cfg = tiny_config();
    StoryModel<float> model(cfg, 606);
    Rng rng(606);
    const auto z = random_tensor({2, cfg.latent_size(), cfg.latent_size(), cfg.latent_channels()}, rng).cast<float>();
    Tensor<float> refs({2, cfg.reference_size, cfg.reference_size, 3});
    for (auto& v : refs.data) v = static_cast<float>(rng.uniform(-1, 1));
    const std::vector<std::string> prompts{"red circle hero running in forest", "red circle hero flying in city"};
    auto forward = [&](const FaceCondition<float>* face) {
        NoGradGuard ng;
        return model.unet()(Var<float>(z), {400, 400}, model.encode_prompts(prompts), face, 2).value();
    };
    const auto face = model.injector().condition(Var<float>(refs));
    const auto plain = forward(nullptr);
    const auto gated = forward(&face);
    double noop = 0;
    for (int64_t i = 0; i < plain.numel(); ++i) noop = std::max(noop, double(std::abs(plain[i] - gated[i])));

    // Open the gates, then change only frame 1's reference.
    for (auto [name, p] : model.params().all())
        if (name.find(".scale") != std::string::npos) p.mutable_value()[0] = 1.0f;
    const auto a = forward(&face);
    const int64_t per = refs.numel() / 2;
    for (int64_t i = per; i < 2 * per; ++i) refs[i] = -refs[i];
    const auto face_b = model.injector().condition(Var<float>(refs));
    const auto b = forward(&face_b);
    const int64_t half = a.numel() / 2;
    bool frame0_same = true;
    double frame1_change = 0;
    for (int64_t i = 0; i < half; ++i) frame0_same = frame0_same && a[i] == b[i];
    for (int64_t i = half; i < a.numel(); ++i) frame1_change = std::max(frame1_change, double(std::abs(a[i] - b[i])));
    const bool ok = noop <= 1e-6 && frame0_same && frame1_change > 0;
    return {ok, fmt("zero-gate change %.2e; frame 0 bit-identical: ", noop) + (frame0_same ? "yes" : "no") +
                    fmt("; frame 1 change %.2e", frame1_change)};
}

Outcome criterion7() {
    const auto cfg = tiny_config();
    const auto sample = tiny_sample(cfg, 707);
    std::string detail;
    bool ok = true;
    for (auto stage : {TrainingStage::Synchronizer, TrainingStage::Injector}) {
        StoryModel<float> model(cfg, 707);
        // Open the gates so injector training reaches every adapter weight.
        for (auto [name, p] : model.params().all())
            if (name.find(".scale") != std::string::npos) p.mutable_value()[0] = 0.1f;
        std::map<std::string, Tensor<float>> before;
        for (const auto& [n, v] : model.params().all()) before[n] = v.value();
        {
            auto opts = default_train_options(cfg);
            opts.lr = 1e-3;
            TrainState<float> st(model, stage, opts, 708);
            for (int i = 0; i < 10; ++i) train_step(model, st, sample);
        }
        int frozen = 0, frozen_moved = 0, trained_moved = 0;
        for (const auto& [n, v] : model.params().all()) {
            const bool moved = v.value().data != before.at(n).data;
            if (trainable_in_stage(stage, n)) {
                trained_moved += moved;
            } else {
                ++frozen;
                frozen_moved += moved;
            }
        }
        ok = ok && frozen_moved == 0 && trained_moved > 0;
        detail += to_string(stage) + ": " + std::to_string(frozen_moved) + "/" + std::to_string(frozen) +
                  " frozen moved, " + std::to_string(trained_moved) + " trainable moved; ";
    }
    return {ok, detail};
}

Outcome criterion8() {
    const auto t0 = std::chrono::steady_clock::now();
    ModelConfig cfg;  // 64x64, four frames
    Rng pick(808);
    const auto group = generate_synthetic_group(random_character(pick), 4, 809, "overfit");
    const auto sample = make_train_sample(group, cfg);
    const std::vector<int64_t> probe_t{100, 300, 500, 700, 900};
    StoryModel<float> model(cfg, 810);
    const double dice_untrained = mean_map_dice(model, sample, probe_t, 811, true);
    // Denoising warm-up of the backbone, which the synchronizer stage assumes.
    {
        auto opts = default_train_options(cfg);
        TrainState<float> st(model, TrainingStage::Base, opts, 812);
        for (int i = 0; i < 300; ++i) train_step(model, st, sample);
    }
    auto opts = default_train_options(cfg);
    opts.lr = 1e-3;
    TrainState<float> st(model, TrainingStage::Synchronizer, opts, 813);
    std::vector<double> total;
    for (int i = 0; i < 500; ++i) total.push_back(train_step(model, st, sample).total);
    const double ma10 = std::accumulate(total.begin(), total.begin() + 10, 0.0) / 10;
    const double last50 = std::accumulate(total.end() - 50, total.end(), 0.0) / 50;
    const double dice_trained = mean_map_dice(model, sample, probe_t, 811, true);
    const double drop = 1.0 - last50 / ma10;
    const double gain = dice_trained - dice_untrained;
    const bool ok = drop >= 0.5 && gain >= 0.2;
    return {ok, fmt("total loss step-10 MA %.4f -> last-50 MA %.4f (-%.1f%%); ", ma10, last50, 100 * drop) +
                    fmt("Dice %.3f -> %.3f (%+.3f); %.0fs", dice_untrained, dice_trained, gain,
                        seconds_since(t0))};
}

// Shared by criteria 9 to 11: a 32x32 dataset, base backbone and synchronizer runs.
struct Ablation {
    ModelConfig cfg;
    std::vector<StoryGroup> train;
    std::vector<TrainSample> data;
    std::vector<StoryGroup> held;       // new identities
    std::vector<IdBucket> held_refs;    // crops of the same identities from other stories
    std::string base_ckpt;
    std::map<std::string, std::string> sync_ckpt;
};

Ablation& ablation() {
    static Ablation a = [] {
        Ablation a;
        a.cfg.image_size = 32;
        a.cfg.reference_size = 16;
        a.cfg.validate();
        Rng r(2024);
        for (int g = 0; g < 32; ++g)
            a.train.push_back(generate_synthetic_group(random_character(r), 4, r.next_u64(), "t" + std::to_string(g), 32));
        for (const auto& g : a.train) a.data.push_back(make_train_sample(g, a.cfg));
        Rng hr(99);
        for (int g = 0; g < 8; ++g) {
            const auto c = random_character(hr);
            a.held.push_back(generate_synthetic_group(c, 4, hr.next_u64(), "h" + std::to_string(g), 32));
            a.held_refs.push_back(make_id_bucket(generate_synthetic_group(c, 4, hr.next_u64(), "r", 32), 16));
        }
        RunOptions bo;
        bo.stage = TrainingStage::Base;
        bo.steps = 1500;
        bo.seed = 7;
        bo.out_dir = (g_work / "base").string();
        bo.train = default_train_options(a.cfg);
        bo.quiet = true;
        run_training(a.cfg, a.data, bo);
        a.base_ckpt = (g_work / "base" / "checkpoint.ckpt").string();
        return a;
    }();
    return a;
}

EvalReport evaluate_checkpoint(const Checkpoint& ck, const std::string& run_id, bool amsa,
                               const std::vector<const IdBucket*>& refs = {}) {
    auto& a = ablation();
    StoryModel<float> model(a.cfg, 1);
    load_parameters(model, ck);
    EvalOptions eo;
    eo.run_id = run_id;
    eo.sample.steps = 20;
    eo.sample.guidance = a.cfg.guidance_scale;
    eo.sample.use_amsa = amsa;
    eo.sample.seed = 123;
    eo.with_reference = !refs.empty();
    if (eo.with_reference) eo.metrics = {"face_sim_ref", "face_sim", "text_sim"};
    std::vector<EvalReport> parts;
    for (size_t i = 0; i < a.held.size(); ++i)
        parts.push_back(evaluate_group(model, a.held[i], eo, refs.empty() ? nullptr : refs[i]));
    return merge_reports(run_id, parts);
}

Outcome criterion9() {
    const auto t0 = std::chrono::steady_clock::now();
    auto& a = ablation();
    struct Variant {
        const char* id;
        bool amsa;
        double alpha;
    };
    std::vector<EvalReport> rows;
    for (const Variant v : {Variant{"-AMSA-MPL", false, 0.0}, Variant{"+AMSA-MPL", true, 0.0},
                            Variant{"+AMSA+MPL", true, 0.1}}) {
        RunOptions so;
        so.stage = TrainingStage::Synchronizer;
        so.steps = 300;
        so.seed = 8;
        so.out_dir = (g_work / v.id).string();
        so.init_checkpoint = a.base_ckpt;
        so.quiet = true;
        so.train = default_train_options(a.cfg);
        so.train.use_amsa = v.amsa;
        so.train.mask_loss_weight = v.alpha;
        so.train.lr = 1e-3;
        const auto ck = run_training(a.cfg, a.data, so);
        a.sync_ckpt[v.id] = (g_work / v.id / "checkpoint.ckpt").string();
        rows.push_back(evaluate_checkpoint(ck, v.id, v.amsa));
    }
    std::cout << ablation_table(rows);
    auto get = [&](int i, const char* m) { return rows[static_cast<size_t>(i)].metrics.at(m); };
    const bool dice_ok = get(2, "dice") >= get(1, "dice") && get(1, "dice") >= get(0, "dice");
    const bool sim_ok = get(2, "frame_sim_clip_style") >= get(1, "frame_sim_clip_style") &&
                        get(1, "frame_sim_clip_style") >= get(0, "frame_sim_clip_style");
    return {dice_ok && sim_ok,
            fmt("dice %.4f <= %.4f <= %.4f: ", get(0, "dice"), get(1, "dice"), get(2, "dice")) +
                (dice_ok ? "yes" : "no") +
                fmt("; inter-frame %.4f <= %.4f <= %.4f: ", get(0, "frame_sim_clip_style"),
                    get(1, "frame_sim_clip_style"), get(2, "frame_sim_clip_style")) +
                (sim_ok ? "yes" : "no") + fmt("; %.0fs", seconds_since(t0))};
}

Outcome criterion10() {
    const auto t0 = std::chrono::steady_clock::now();
    auto& a = ablation();
    if (!a.sync_ckpt.count("+AMSA+MPL")) return {false, "needs the synchronizer checkpoint of criterion 9"};
    std::vector<const IdBucket*> refs;
    for (const auto& b : a.held_refs) refs.push_back(&b);
    std::vector<EvalReport> rows;
    for (bool srs : {false, true}) {
        RunOptions so;
        so.stage = TrainingStage::Injector;
        so.steps = 400;
        so.seed = 9;
        so.init_checkpoint = a.sync_ckpt.at("+AMSA+MPL");
        so.quiet = true;
        so.train = default_train_options(a.cfg);
        so.train.shuffle_references = srs;
        so.train.lr = 1e-3;
        const auto ck = run_training(a.cfg, a.data, so);
        rows.push_back(evaluate_checkpoint(ck, srs ? "SRS" : "Stacked-ID", true, refs));
    }
    std::cout << ablation_table(rows);
    const double stacked = rows[0].metrics.at("face_sim_ref"), srs = rows[1].metrics.at("face_sim_ref");
    return {srs >= stacked, fmt("face_sim_ref on 8 held-out identities: SRS %.4f vs Stacked-ID %.4f; %.0fs", srs,
                                stacked, seconds_since(t0))};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome criterion11() {
    auto& a = ablation();
    std::string ckpt;
    if (a.sync_ckpt.count("+AMSA+MPL")) {
        ckpt = a.sync_ckpt.at("+AMSA+MPL");
    } else {
        ckpt = a.base_ckpt;
    }
    const auto prompts = g_work / "story.txt";
    std::ofstream(prompts) << "[green star hero] running in forest\n[green star hero] sleeping on beach\n"
                              "[green star hero] jumping in city\n[green star hero] sitting in snow\n";
    std::vector<fs::path> outs{g_work / "sample_a", g_work / "sample_b"};
    for (const auto& o : outs) {
        fs::remove_all(o);
        const std::string cmd = "\"" + g_cli + "\" sample --checkpoint \"" + ckpt + "\" --prompts \"" +
                                prompts.string() + "\" --out \"" + o.string() + "\" --seed 31 --steps 10 > /dev/null";
        if (std::system(cmd.c_str()) != 0) return {false, "sample command failed: " + cmd};
    }
    int files = 0;
    bool same = true;
    for (const auto& e : fs::directory_iterator(outs[0])) {
        if (e.path().extension() != ".png") continue;
        ++files;
        same = same && slurp(e.path()) == slurp(outs[1] / e.path().filename());
    }
    return {same && files == 4, std::to_string(files) + " PNGs, byte-identical across two invocations: " +
                                    (same ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::cerr << "usage: acceptance <storynizor binary> [work dir]\n";
        return 2;
    }
    g_cli = argv[1];
    g_work = argc > 2 ? fs::path(argv[2]) : fs::temp_directory_path() / "storynizor_acceptance";
    fs::remove_all(g_work);
    fs::create_directories(g_work);

    const std::vector<std::function<Outcome()>> criteria{criterion1, criterion2, criterion3, criterion4,
                                                         criterion5, criterion6, criterion7, criterion8,
                                                         criterion9, criterion10, criterion11};
    int failed = 0;
    for (size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i]();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << "criterion " << i + 1 << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
    }
    std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
    return failed == 0 ? 0 : 1;
}
