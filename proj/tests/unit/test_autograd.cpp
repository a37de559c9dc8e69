#include <cmath>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "storynizor/autograd.hpp"

using namespace storynizor;
using storynizor::testing::gradcheck;
using storynizor::testing::random_tensor;

namespace {

Var<double> param(Shape s, Rng& rng, double scale = 1.0) { return Var<double>(random_tensor(std::move(s), rng, scale), true); }

// Weighted sum so every output element has a distinct sensitivity.
Var<double> probe(const Var<double>& y, uint64_t seed = 99) {
    Rng rng(seed);
    return ag::sum(ag::mul_const(y, random_tensor(y.shape(), rng)));
}

constexpr double kTol = 1e-6;

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
    Rng rng(1);
    auto a = param({3, 4}, rng);
    auto b = param({3, 4}, rng);
    auto pos = Var<double>(Tensor<double>({3, 4}, std::vector<double>(12, 0.0)), true);
    for (int i = 0; i < 12; ++i) pos.mutable_value()[i] = 0.5 + rng.uniform();

    CHECK(gradcheck([&] { return probe(ag::add(a, b)); }, {a, b}, 12).max_rel_error < kTol);
    CHECK(gradcheck([&] { return probe(ag::sub(a, b)); }, {a, b}, 12).max_rel_error < kTol);
    CHECK(gradcheck([&] { return probe(ag::mul(a, b)); }, {a, b}, 12).max_rel_error < kTol);
    CHECK(gradcheck([&] { return probe(ag::div(a, pos)); }, {a, pos}, 12).max_rel_error < kTol);
    CHECK(gradcheck([&] { return probe(ag::maximum(a, b)); }, {a, b}, 12).max_rel_error < kTol);
    CHECK(gradcheck([&] { return probe(ag::scale(a, 2.5)); }, {a}, 12).max_rel_error < kTol);
    CHECK(gradcheck([&] { return probe(ag::square(a)); }, {a}, 12).max_rel_error < kTol);
    CHECK(gradcheck([&] { return probe(ag::log(pos)); }, {pos}, 12).max_rel_error < kTol);
    CHECK(gradcheck([&] { return probe(ag::clamp(a, -0.5, 0.5)); }, {a}, 12).max_rel_error < kTol);
    CHECK(gradcheck([&] { return probe(ag::silu(a)); }, {a}, 12).max_rel_error < kTol);
    CHECK(gradcheck([&] { return probe(ag::gelu(a)); }, {a}, 12).max_rel_error < kTol);
    CHECK(gradcheck([&] { return ag::mean(ag::square(a)); }, {a}, 12).max_rel_error < kTol);
    CHECK(gradcheck([&] { return ag::mse(a, b); }, {a, b}, 12).max_rel_error < kTol);

    auto s = param({1}, rng);
    CHECK(gradcheck([&] { return probe(ag::mul_scalar_var(a, s)); }, {a, s}, 12).max_rel_error < kTol);
}

TEST_CASE("shape ops route gradients") {
    Rng rng(2);
    auto a = param({2, 3, 4}, rng);
    auto b = param({1, 3, 4}, rng);
    auto c = param({2, 3, 2}, rng);
    std::vector<Var<double>> parts{a, b};
    CHECK(gradcheck([&] { return probe(ag::concat0(std::span<const Var<double>>(parts))); }, {a, b}, 24).max_rel_error < kTol);
    CHECK(gradcheck([&] { return probe(ag::slice0(a, 1, 1)); }, {a}, 24).max_rel_error < kTol);
    CHECK(gradcheck([&] { return probe(ag::concat_last(a, c)); }, {a, c}, 24).max_rel_error < kTol);
    CHECK(gradcheck([&] { return probe(ag::reshape(a, {6, 4})); }, {a}, 24).max_rel_error < kTol);

    auto bias = param({4}, rng);
    auto rows = param({2, 4}, rng);
    auto lead = param({3, 4}, rng);
    CHECK(gradcheck([&] { return probe(ag::add_bias(a, bias)); }, {a, bias}, 24).max_rel_error < kTol);
    CHECK(gradcheck([&] { return probe(ag::add_rows(a, rows)); }, {a, rows}, 24).max_rel_error < kTol);
    CHECK(gradcheck([&] { return probe(ag::add_leading(a, lead)); }, {a, lead}, 24).max_rel_error < kTol);
    CHECK(gradcheck([&] { return probe(ag::mean_last(a)); }, {a}, 24).max_rel_error < kTol);
}

TEST_CASE("linear algebra ops") {
    Rng rng(3);
    auto x = param({2, 3, 5}, rng);
    auto w = param({5, 4}, rng);
    auto bias = param({4}, rng);
    CHECK(gradcheck([&] { return probe(ag::linear(x, w, &bias)); }, {x, w, bias}, 20).max_rel_error < kTol);

    auto a = param({2, 3, 5}, rng);
    auto b = param({2, 5, 4}, rng);
    auto bt = param({2, 4, 5}, rng);
    CHECK(gradcheck([&] { return probe(ag::bmm(a, b)); }, {a, b}, 20).max_rel_error < kTol);
    CHECK(gradcheck([&] { return probe(ag::bmm_nt(a, bt)); }, {a, bt}, 20).max_rel_error < kTol);
    CHECK(gradcheck([&] { return probe(ag::softmax_last(a)); }, {a}, 30).max_rel_error < kTol);

    auto h = param({2, 3, 8}, rng);
    CHECK(gradcheck([&] { return probe(ag::merge_heads(ag::split_heads(h, 2), 2)); }, {h}, 20).max_rel_error < kTol);
    auto sh = ag::split_heads(h, 2);
    CHECK(sh.shape() == Shape{4, 3, 4});
    // head 1 of batch 0 holds channels 4..7
    CHECK(sh.value()[(1 * 3 + 0) * 4 + 0] == h.value()[4]);
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(4);
    auto x = Var<double>(random_tensor({5, 7}, rng, 10.0));
    auto p = ag::softmax_last(x);
    for (int r = 0; r < 5; ++r) {
        double s = 0;
        for (int c = 0; c < 7; ++c) s += p.value()[r * 7 + c];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("conv2d matches a direct loop and finite differences") {
    Rng rng(5);
    auto x = param({2, 5, 5, 3}, rng);
    auto w = param({3, 3, 3, 4}, rng);
    auto b = param({4}, rng);
    for (int stride : {1, 2}) {
        auto y = ag::conv2d(x, w, &b, stride, 1);
        const int64_t oh = y.dim(1), ow = y.dim(2);
        CHECK(oh == (5 + 2 - 3) / stride + 1);
        double max_err = 0;
        for (int n = 0; n < 2; ++n)
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j)
                    for (int co = 0; co < 4; ++co) {
                        double acc = b.value()[co];
                        for (int ki = 0; ki < 3; ++ki)
                            for (int kj = 0; kj < 3; ++kj) {
                                const int yi = i * stride - 1 + ki, xj = j * stride - 1 + kj;
                                if (yi < 0 || yi >= 5 || xj < 0 || xj >= 5) continue;
                                for (int ci = 0; ci < 3; ++ci)
                                    acc += x.value()[((n * 5 + yi) * 5 + xj) * 3 + ci] *
                                           w.value()[((ki * 3 + kj) * 3 + ci) * 4 + co];
                            }
                        max_err = std::max(max_err, std::abs(acc - y.value()[((n * oh + i) * ow + j) * 4 + co]));
                    }
        CHECK(max_err < 1e-12);
        CHECK(gradcheck([&] { return probe(ag::conv2d(x, w, &b, stride, 1)); }, {x, w, b}, 25).max_rel_error < kTol);
    }
}

TEST_CASE("normalization layers") {
    Rng rng(6);
    auto x = param({2, 6, 8}, rng);
    auto g = param({8}, rng);
    auto b = param({8}, rng);
    CHECK(gradcheck([&] { return probe(ag::group_norm(x, g, b, 4, 1e-5)); }, {x, g, b}, 30).max_rel_error < 1e-5);
    CHECK(gradcheck([&] { return probe(ag::layer_norm(x, g, b, 1e-5)); }, {x, g, b}, 30).max_rel_error < 1e-5);
    auto v = param({3, 4}, rng);
    CHECK(gradcheck([&] { return probe(ag::l2_normalize_rows(v, 1e-12)); }, {v}, 12).max_rel_error < kTol);
    auto n = ag::l2_normalize_rows(v, 1e-12);
    for (int r = 0; r < 3; ++r) {
        double s = 0;
        for (int c = 0; c < 4; ++c) s += n.value()[r * 4 + c] * n.value()[r * 4 + c];
        CHECK(std::sqrt(s) == doctest::Approx(1.0));
    }
}

TEST_CASE("upsample and embedding") {
    Rng rng(7);
    auto x = param({1, 2, 3, 2}, rng);
    auto up = ag::upsample_nearest2x(x);
    CHECK(up.shape() == Shape{1, 4, 6, 2});
    CHECK(up.value()[((0 * 4 + 3) * 6 + 5) * 2 + 1] == x.value()[((0 * 2 + 1) * 3 + 2) * 2 + 1]);
    CHECK(gradcheck([&] { return probe(ag::upsample_nearest2x(x)); }, {x}, 12).max_rel_error < kTol);

    auto table = param({5, 3}, rng);
    std::vector<int> ids{4, 0, 4};
    CHECK(gradcheck([&] { return probe(ag::embedding(table, std::span<const int>(ids))); }, {table}, 15).max_rel_error <
          kTol);
}

TEST_CASE("attention map helpers") {
    Rng rng(8);
    auto probs = param({4, 6, 5}, rng);  // B=2, heads=2
    CHECK(gradcheck([&] { return probe(ag::head_mean(probs, 2)); }, {probs}, 30).max_rel_error < kTol);
    auto hm = ag::head_mean(probs, 2);
    CHECK(hm.value()[(1 * 6 + 2) * 5 + 3] ==
          doctest::Approx(0.5 * (probs.value()[(2 * 6 + 2) * 5 + 3] + probs.value()[(3 * 6 + 2) * 5 + 3])));

    auto x = param({2, 6, 5}, rng);
    CHECK(gradcheck([&] { return probe(ag::column_span_mean(x, 1, 1, 3)); }, {x}, 60).max_rel_error < kTol);
    auto cs = ag::column_span_mean(x, 1, 1, 3);
    const auto* row = &x.value()[(6 + 4) * 5];
    CHECK(cs.value()[4] == doctest::Approx((row[1] + row[2] + row[3]) / 3.0));

    auto m = param({2, 3, 4}, rng);
    CHECK(gradcheck([&] { return probe(ag::bilinear_resize(m, 6, 8)); }, {m}, 24).max_rel_error < kTol);
    CHECK(gradcheck([&] { return probe(ag::bilinear_resize(m, 3, 4)); }, {m}, 24).max_rel_error < kTol);

    auto r = param({3, 7}, rng);
    for (auto& v : r.mutable_value().data) v = std::abs(v) + 0.1;
    CHECK(gradcheck([&] { return probe(ag::max_normalize_rows(r)); }, {r}, 21).max_rel_error < kTol);
    CHECK(gradcheck([&] { return probe(ag::max_over_rows(r)); }, {r}, 21).max_rel_error < kTol);

    auto logits = param({4, 6, 6}, rng);
    auto lm = param({2, 6}, rng);
    CHECK(gradcheck([&] { return probe(ag::add_cross_frame_key_bias(logits, lm, 2, 3)); }, {logits, lm}, 40)
              .max_rel_error < kTol);
}

TEST_CASE("bilinear resize: identity at equal size and constant preservation") {
    Rng rng(9);
    auto m = Var<double>(random_tensor({1, 4, 4}, rng));
    auto same = ag::bilinear_resize(m, 4, 4);
    for (int64_t i = 0; i < 16; ++i) CHECK(same.value()[i] == doctest::Approx(m.value()[i]));
    auto c = Var<double>(Tensor<double>({1, 3, 5}, 0.7));
    auto up = ag::bilinear_resize(c, 7, 9);
    for (double v : up.value().data) CHECK(v == doctest::Approx(0.7));
}

TEST_CASE("max_normalize_rows zero rows stay zero") {
    auto x = Var<double>(Tensor<double>({2, 3}, std::vector<double>{0, 0, 0, 1, 4, 2}));
    auto y = ag::max_normalize_rows(x);
    CHECK(y.value().data == std::vector<double>{0, 0, 0, 0.25, 1, 0.5});
}

TEST_CASE("NoGradGuard records no graph") {
    Rng rng(10);
    auto a = param({2, 2}, rng);
    Var<double> y;
    {
        NoGradGuard ng;
        y = ag::square(a);
    }
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->parents.empty());
    CHECK(grad_enabled());
}
