#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "storynizor/synchronizer.hpp"

using namespace storynizor;
using storynizor::testing::gradcheck;
using storynizor::testing::random_tensor;

namespace {

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    REQUIRE(a.shape == b.shape);
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

Tensor<float> random_f(Shape s, Rng& rng, double scale = 1.0) { return random_tensor(std::move(s), rng, scale).cast<float>(); }

// Full-sequence attention over the frames of each story, written as loops.
Tensor<double> loop_attention(const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& v,
                              const Tensor<double>& masks, int heads, int frames) {
    const int64_t bn = q.dim(0), s = q.dim(1), c = q.dim(2), d = c / heads;
    Tensor<double> out(q.shape);
    for (int64_t b = 0; b < bn / frames; ++b)
        for (int h = 0; h < heads; ++h)
            for (int64_t fq = 0; fq < frames; ++fq)
                for (int64_t i = 0; i < s; ++i) {
                    const int64_t qi = (b * frames + fq) * s + i;
                    std::vector<double> logits;
                    for (int64_t fk = 0; fk < frames; ++fk)
                        for (int64_t j = 0; j < s; ++j) {
                            const int64_t kj = (b * frames + fk) * s + j;
                            double dot = 0;
                            for (int64_t e = 0; e < d; ++e) dot += q[qi * c + h * d + e] * k[kj * c + h * d + e];
                            dot /= std::sqrt(double(d));
                            if (fk != fq) dot += std::log(masks[kj]);
                            logits.push_back(dot);
                        }
                    const double mx = *std::max_element(logits.begin(), logits.end());
                    double z = 0;
                    for (auto& l : logits) z += (l = std::exp(l - mx));
                    for (int64_t e = 0; e < d; ++e) {
                        double acc = 0;
                        for (int64_t kk = 0; kk < frames * s; ++kk) {
                            const int64_t kj = (b * frames) * s + kk;
                            acc += logits[static_cast<size_t>(kk)] / z * v[kj * c + h * d + e];
                        }
                        out[qi * c + h * d + e] = acc;
                    }
                }
    return out;
}

}  // namespace

TEST_CASE("AMSA with unit masks equals joint attention on random shapes") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const int heads = 1 + static_cast<int>(rng.uniform_int(3));
        const int frames = 1 + static_cast<int>(rng.uniform_int(4));
        const int stories = 1 + static_cast<int>(rng.uniform_int(2));
        const int64_t s = 1 + static_cast<int64_t>(rng.uniform_int(12));
        const int64_t c = heads * (1 + static_cast<int64_t>(rng.uniform_int(6)));
        const Shape shape{stories * frames, s, c};
        Var<float> q(random_f(shape, rng)), k(random_f(shape, rng)), v(random_f(shape, rng));
        Var<float> ones(Tensor<float>({stories * frames, s}, 1.0f));
        const auto amsa = amsa_attention(q, k, v, ones, heads, frames).value();
        const auto joint = joint_attention(q, k, v, heads, frames).value();
        CHECK(max_abs_diff(amsa, joint) <= 1e-5);
    }
}

TEST_CASE("AMSA matches a loop oracle with random masks") {
    Rng rng(5);
    for (int trial = 0; trial < 5; ++trial) {
        const int heads = 2, frames = 3;
        const Shape shape{frames * 2, 5, 4};
        auto q = random_tensor(shape, rng), k = random_tensor(shape, rng), v = random_tensor(shape, rng);
        Tensor<double> m({frames * 2, 5});
        for (auto& x : m.data) x = rng.uniform(1e-3, 1.0);
        const auto got = amsa_attention(Var<double>(q), Var<double>(k), Var<double>(v), Var<double>(m), heads, frames);
        CHECK(max_abs_diff(got.value(), loop_attention(q, k, v, m, heads, frames)) < 1e-12);
    }
}

TEST_CASE("two equal-logit keys split as 1/(1+eps) and eps/(1+eps)") {
    for (double eps : {1e-6, 1e-3, 0.5}) {
        // Query in frame 0; key 0 is its own frame, key 1 sits in frame 1 with mask eps.
        Tensor<double> q({2, 1, 1}, 0.0), k({2, 1, 1}, 0.0), v({2, 1, 1}, std::vector<double>{1.0, 0.0});
        Tensor<double> m({2, 1}, std::vector<double>{1.0, eps});
        const auto out = amsa_attention(Var<double>(q), Var<double>(k), Var<double>(v), Var<double>(m), 1, 2).value();
        CHECK(std::abs(out[0] - 1.0 / (1.0 + eps)) <= 1e-6);
        // The other-frame weight is what remains.
        CHECK(std::abs((1.0 - out[0]) - eps / (1.0 + eps)) <= 1e-6);

        Tensor<float> qf({2, 1, 1}, 0.0f), vf({2, 1, 1}, std::vector<float>{1.0f, 0.0f});
        Tensor<float> mf({2, 1}, std::vector<float>{1.0f, static_cast<float>(eps)});
        const auto of = amsa_attention(Var<float>(qf), Var<float>(qf), Var<float>(vf), Var<float>(mf), 1, 2).value();
        CHECK(std::abs(of[0] - 1.0 / (1.0 + eps)) <= 1e-6);
    }
}

TEST_CASE("single-frame AMSA reduces to per-frame attention") {
    Rng rng(3);
    const Shape shape{3, 6, 8};
    Var<float> q(random_f(shape, rng)), k(random_f(shape, rng)), v(random_f(shape, rng));
    Tensor<float> m({3, 6});
    for (auto& x : m.data) x = static_cast<float>(rng.uniform(0.01, 1));
    const auto a = amsa_attention(q, k, v, Var<float>(m), 2, 1).value();
    CHECK(max_abs_diff(a, dot_product_attention(q, k, v, 2).value()) <= 1e-6);
}

TEST_CASE("AMSA is equivariant to frame permutation") {
    Rng rng(8);
    const int frames = 3;
    const int64_t s = 4, c = 4;
    auto q = random_tensor({frames, s, c}, rng), k = random_tensor({frames, s, c}, rng),
         v = random_tensor({frames, s, c}, rng);
    Tensor<double> m({frames, s});
    for (auto& x : m.data) x = rng.uniform(0.05, 1);
    const int perm[frames] = {2, 0, 1};
    auto permute = [&](const Tensor<double>& t, int64_t row) {
        Tensor<double> out(t.shape);
        for (int f = 0; f < frames; ++f)
            std::copy_n(t.ptr() + perm[f] * row, row, out.ptr() + f * row);
        return out;
    };
    const auto base = amsa_attention(Var<double>(q), Var<double>(k), Var<double>(v), Var<double>(m), 2, frames).value();
    const auto shuffled = amsa_attention(Var<double>(permute(q, s * c)), Var<double>(permute(k, s * c)),
                                         Var<double>(permute(v, s * c)), Var<double>(permute(m, s)), 2, frames)
                              .value();
    CHECK(max_abs_diff(shuffled, permute(base, s * c)) < 1e-12);
}

TEST_CASE("AMSA rejects masks outside (0, 1]") {
    Tensor<float> q({2, 2, 2}, 0.5f);
    for (float bad : {0.0f, -0.1f, 1.5f}) {
        Tensor<float> m({2, 2}, 1.0f);
        m[3] = bad;
        CHECK_THROWS_AS(amsa_attention(Var<float>(q), Var<float>(q), Var<float>(q), Var<float>(m), 1, 2),
                        std::invalid_argument);
    }
    Tensor<float> m({2, 2}, 1.0f);
    CHECK_THROWS(amsa_attention(Var<float>(q), Var<float>(q), Var<float>(q), Var<float>(m), 1, 3));
}

TEST_CASE("mask gradients flow through the attention bias") {
    Rng rng(21);
    const Shape shape{2, 3, 4};
    Var<double> q(random_tensor(shape, rng), true), k(random_tensor(shape, rng), true), v(random_tensor(shape, rng), true);
    Tensor<double> mt({2, 3});
    for (auto& x : mt.data) x = rng.uniform(0.2, 1.0);
    Var<double> m(mt, true);
    Var<double> w(random_tensor(shape, rng));
    auto loss = [&] { return ag::sum(ag::mul(amsa_attention(q, k, v, m, 2, 2), w)); };
    const auto r = gradcheck(loss, {q, k, v, m}, 6);
    CHECK(r.max_rel_error < 1e-6);
    CHECK(r.checked == 24);
}

TEST_CASE("cross-attention maps average span tokens and heads") {
    // 2 frames, 2 heads, 4 query pixels (2x2), 5 tokens.
    Tensor<double> p({4, 4, 5});
    for (int64_t i = 0; i < p.numel(); ++i) p[i] = 0.01 * static_cast<double>(i % 97);
    const FrameSpans spans{{{1, 2}}, {{3, 3}, {0, 1}}};
    const auto maps = record_cross_attention_map(Var<double>(p), 2, 2, 2, spans).value();
    REQUIRE(maps.shape == Shape{3, 2, 2});
    auto oracle = [&](int frame, TokenSpan sp, int pix) {
        double acc = 0;
        for (int h = 0; h < 2; ++h)
            for (int t = sp.first; t <= sp.last; ++t) acc += p[((frame * 2 + h) * 4 + pix) * 5 + t];
        return acc / (2.0 * sp.length());
    };
    for (int pix = 0; pix < 4; ++pix) {
        CHECK(maps[pix] == doctest::Approx(oracle(0, {1, 2}, pix)));
        CHECK(maps[4 + pix] == doctest::Approx(oracle(1, {3, 3}, pix)));
        CHECK(maps[8 + pix] == doctest::Approx(oracle(1, {0, 1}, pix)));
    }
    CHECK_THROWS(record_cross_attention_map(Var<double>(p), 2, 2, 2, FrameSpans{{{0, 5}}, {}}));
    CHECK_THROWS(record_cross_attention_map(Var<double>(p), 2, 2, 2, FrameSpans{{{0, 1}}}));
    CHECK_THROWS(record_cross_attention_map(Var<double>(p), 2, 3, 2, spans));
}

TEST_CASE("accumulation sums earlier layers then max-normalizes") {
    const FrameSpans spans{{{1, 1}}, {{2, 2}}};
    AttentionMaskStack<double> stack(spans);
    CHECK_THROWS_AS(stack.accumulate(0, 2, 2), std::logic_error);

    Tensor<double> a({2, 2, 2}, std::vector<double>{1, 2, 3, 4, 0, 0, 0, 0});
    Tensor<double> b({2, 1, 1}, std::vector<double>{1, 0.5});
    stack.record(0, Var<double>(a));
    stack.record(1, Var<double>(b));
    CHECK_FALSE(stack.has_layers_before(0));
    CHECK(stack.has_layers_before(1));
    CHECK_THROWS_AS(stack.accumulate(0, 2, 2), std::logic_error);

    const auto only_first = stack.accumulate(1, 2, 2).value();
    for (int i = 0; i < 4; ++i) CHECK(only_first[i] == doctest::Approx((i + 1) / 4.0));
    for (int i = 4; i < 8; ++i) CHECK(only_first[i] == 0.0);  // all-zero rows stay zero

    // Layer 1 is a constant per map, so resizing keeps it constant.
    const auto both = stack.accumulate_all(2, 2).value();
    for (int i = 0; i < 4; ++i) CHECK(both[i] == doctest::Approx((i + 2) / 5.0));
    for (int i = 4; i < 8; ++i) CHECK(both[i] == doctest::Approx(1.0));

    CHECK_THROWS(stack.record(2, Var<double>(Tensor<double>({3, 1, 1}))));
}

TEST_CASE("frame masks are the clamped union over characters") {
    const FrameSpans spans{{{1, 1}, {2, 2}}, {}, {{3, 3}}};
    Tensor<double> acc({3, 1, 2}, std::vector<double>{0.2, 0.0, 0.7, 0.1, 2.0, 0.3});
    AmsaConfig cfg;
    cfg.eps = 1e-3;
    const auto m = build_frame_mask(Var<double>(acc), spans, cfg).value();
    REQUIRE(m.shape == Shape{3, 2});
    CHECK(m[0] == doctest::Approx(0.7));
    CHECK(m[1] == doctest::Approx(0.1));
    CHECK(m[2] == 1.0);  // frame without characters
    CHECK(m[3] == 1.0);
    CHECK(m[4] == 1.0);  // clamped from above
    CHECK(m[5] == doctest::Approx(0.3));

    Tensor<double> zeros({3, 1, 2}, 0.0);
    const auto z = build_frame_mask(Var<double>(zeros), spans, cfg).value();
    CHECK(z[0] == doctest::Approx(1e-3));

    AmsaConfig bad;
    bad.eps = 0;
    CHECK_THROWS(bad.validate());
    CHECK_THROWS(build_frame_mask(Var<double>(acc), FrameSpans{{{1, 1}}}, cfg));
}

TEST_CASE("synchronizer falls back to per-frame attention before any map exists") {
    Rng rng(2);
    const Shape shape{2, 4, 4};
    Var<float> q(random_f(shape, rng)), k(random_f(shape, rng)), v(random_f(shape, rng));
    Synchronizer<float> sync;
    sync.begin_pass(FrameSpans{{{1, 1}}, {{1, 1}}});
    const auto first = sync.self_attention(0, q, k, v, 2, 2, 2, 2).value();
    CHECK(max_abs_diff(first, dot_product_attention(q, k, v, 2).value()) <= 1e-6);

    SynchronizerOptions unit;
    unit.force_unit_masks = true;
    sync.set_options(unit);
    const auto joint = sync.self_attention(0, q, k, v, 2, 2, 2, 2).value();
    CHECK(max_abs_diff(joint, joint_attention(q, k, v, 2, 2).value()) <= 1e-6);

    SynchronizerOptions off;
    off.amsa = false;
    sync.set_options(off);
    const auto local = sync.self_attention(3, q, k, v, 2, 2, 2, 2).value();
    CHECK(max_abs_diff(local, dot_product_attention(q, k, v, 2).value()) <= 1e-6);
}

TEST_CASE("hook slot holds one hook object") {
    HookSlot<float> slot;
    Synchronizer<float> a, b;
    attach_synchronizer(slot, a);
    CHECK_THROWS_AS(attach_synchronizer(slot, b), std::logic_error);
    slot.detach();
    attach_synchronizer(slot, b);
    CHECK(slot.get() == &b);
}
