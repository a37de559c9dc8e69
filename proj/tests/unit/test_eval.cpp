#include <cmath>

#include "doctest.h"
#include "storynizor/data.hpp"
#include "storynizor/eval.hpp"

using namespace storynizor;

namespace {

Image noise_image(int size, Rng& rng) {
    Image im(size, size, 3);
    for (auto& p : im.pixels) p = static_cast<uint8_t>(rng.uniform_int(256));
    return im;
}

double loop_cosine(const Embedding& a, const Embedding& b) {
    double ab = 0, aa = 0, bb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / std::sqrt(aa * bb);
}

EvalReport report(const std::string& id, std::map<std::string, double> m) {
    EvalReport r;
    r.run_id = id;
    r.metrics = std::move(m);
    for (const auto& [k, v] : r.metrics) r.counts[k] = 4;
    return r;
}

}  // namespace

TEST_CASE("cosine similarity conventions") {
    CHECK(cosine_similarity({1, 0}, {0, 1}) == doctest::Approx(0.0));
    CHECK(cosine_similarity({2, 2}, {1, 1}) == doctest::Approx(1.0));
    CHECK(cosine_similarity({1, 0}, {-3, 0}) == doctest::Approx(-1.0));
    CHECK(cosine_similarity({0, 0}, {0, 0}) == 1.0);
    CHECK(cosine_similarity({0, 0}, {1, 0}) == 0.0);
    CHECK_THROWS(cosine_similarity({1}, {1, 2}));
}

TEST_CASE("inter-frame similarity matches the pairwise loop") {
    Rng rng(3);
    ToyHistogramEncoder hist;
    ToyGridEncoder grid;
    std::vector<Image> frames;
    for (int i = 0; i < 4; ++i) frames.push_back(noise_image(24, rng));
    for (const ImageEmbedder* enc : {static_cast<const ImageEmbedder*>(&hist), static_cast<const ImageEmbedder*>(&grid)}) {
        double sum = 0;
        int pairs = 0;
        for (int i = 0; i < 4; ++i)
            for (int j = i + 1; j < 4; ++j, ++pairs) sum += loop_cosine(enc->encode(frames[i]), enc->encode(frames[j]));
        CHECK(pairs == 6);
        CHECK(inter_frame_similarity(frames, *enc) == doctest::Approx(sum / pairs).epsilon(1e-12));
        const std::vector<Image> two(frames.begin(), frames.begin() + 2);
        CHECK(inter_frame_similarity(two, *enc) ==
              doctest::Approx(loop_cosine(enc->encode(two[0]), enc->encode(two[1]))));
        // Order of frames does not matter.
        std::vector<Image> rev(frames.rbegin(), frames.rend());
        CHECK(inter_frame_similarity(rev, *enc) == doctest::Approx(inter_frame_similarity(frames, *enc)));
    }
    CHECK(inter_frame_similarity(std::vector<Image>(3, frames[0]), hist) == doctest::Approx(1.0));
    CHECK_THROWS(inter_frame_similarity({frames[0]}, hist));
}

TEST_CASE("encoders are insensitive to image scale") {
    Rng rng(8);
    // Blocky image so nearest-colour content survives resizing.
    Image small(8, 8, 3);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            const auto c = palette_rgb(static_cast<int>((x / 4) + 2 * (y / 4)));
            for (int k = 0; k < 3; ++k) small.at(x, y, k) = c[k];
        }
    Image big(32, 32, 3);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            for (int k = 0; k < 3; ++k) big.at(x, y, k) = small.at(x / 4, y / 4, k);
    ToyHistogramEncoder hist;
    ToyTextImageEncoder clip;
    CHECK(cosine_similarity(hist.encode(small), hist.encode(big)) == doctest::Approx(1.0));
    CHECK(cosine_similarity(clip.encode_image(small), clip.encode_image(big)) == doctest::Approx(1.0));
}

TEST_CASE("text-image similarity rewards the named colours") {
    ToyTextImageEncoder enc;
    const auto& names = palette_names();
    std::vector<Image> imgs;
    std::vector<std::string> right, wrong;
    for (int c = 0; c < 3; ++c) {
        const auto rgb = palette_rgb(c);
        Image im(16, 16, 3);
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x)
                for (int k = 0; k < 3; ++k) im.at(x, y, k) = rgb[k];
        imgs.push_back(im);
        right.push_back("a " + names[c] + " circle hero");
        wrong.push_back("a " + names[(c + 4) % names.size()] + " circle hero");
    }
    double loop = 0;
    for (int i = 0; i < 3; ++i) loop += loop_cosine(enc.encode_image(imgs[i]), enc.encode_text(right[i]));
    CHECK(text_image_similarity(imgs, right, enc) == doctest::Approx(loop / 3));
    CHECK(text_image_similarity(imgs, right, enc) > text_image_similarity(imgs, wrong, enc));
    CHECK_THROWS(text_image_similarity(imgs, {right[0]}, enc));
    CHECK_THROWS(text_image_similarity({}, {}, enc));
}

TEST_CASE("face similarity with and without a reference") {
    Rng rng(11);
    ToyFaceEncoder enc;
    std::vector<Image> crops, refs;
    for (int i = 0; i < 3; ++i) crops.push_back(noise_image(16, rng));
    for (int i = 0; i < 2; ++i) refs.push_back(noise_image(16, rng));

    const auto none = face_similarity(crops, nullptr, enc);
    CHECK_FALSE(none.face_sim_ref.has_value());
    CHECK(none.face_sim == doctest::Approx(inter_frame_similarity(crops, enc)));

    double loop = 0;
    for (const auto& c : crops)
        for (const auto& r : refs) loop += loop_cosine(enc.encode(c), enc.encode(r));
    const auto with = face_similarity(crops, &refs, enc);
    REQUIRE(with.face_sim_ref.has_value());
    CHECK(*with.face_sim_ref == doctest::Approx(loop / 6));

    const std::vector<Image> empty;
    CHECK_THROWS(face_similarity(crops, &empty, enc));
}

TEST_CASE("character crops follow the masks") {
    Image frame(32, 32, 3, 0);
    Image mask(32, 32, 1, 0);
    for (int y = 10; y < 20; ++y)
        for (int x = 4; x < 14; ++x) {
            mask.at(x, y) = 1;
            frame.at(x, y, 0) = 255;
        }
    const auto crops = character_crops({frame}, {mask}, 12);
    REQUIRE(crops.size() == 1);
    CHECK(crops[0].width == 12);
    CHECK(crops[0].at(6, 6, 0) == 255);  // centre of the crop is the character
    CHECK_THROWS(character_crops({frame}, {Image(32, 32, 1, 0)}, 12));
    CHECK_THROWS(character_crops({frame, frame}, {mask}, 12));
}

TEST_CASE("reports validate and survive json") {
    auto r = report("full", {{"dice", 0.5}, {"face_sim", 0.9}});
    r.config_hash = "abc";
    CHECK_NOTHROW(r.validate());
    const auto back = EvalReport::from_json(r.to_json());
    CHECK(back.run_id == "full");
    CHECK(back.metrics == r.metrics);
    CHECK(back.counts == r.counts);
    CHECK(back.config_hash == "abc");

    CHECK_THROWS(report("x", {{"bogus", 0.1}}).validate());
    CHECK_THROWS(report("x", {{"dice", -0.2}}).validate());
    CHECK_THROWS(report("x", {{"text_sim", 1.5}}).validate());
    auto nocount = report("x", {{"dice", 0.2}});
    nocount.counts.clear();
    CHECK_THROWS(nocount.validate());
}

TEST_CASE("merging averages stories and adds counts") {
    auto a = report("a", {{"dice", 0.2}, {"face_sim", 0.6}});
    auto b = report("b", {{"dice", 0.4}});
    const auto m = merge_reports("m", {a, b});
    CHECK(m.run_id == "m");
    CHECK(m.metrics.at("dice") == doctest::Approx(0.3));
    CHECK(m.metrics.at("face_sim") == doctest::Approx(0.6));
    CHECK(m.counts.at("dice") == 8);
    CHECK(m.counts.at("face_sim") == 4);
    CHECK_THROWS(merge_reports("m", {}));
}

TEST_CASE("ablation tables") {
    const std::vector<EvalReport> runs{report("baseline", {{"dice", 0.1}, {"frame_sim_clip_style", 0.5}}),
                                       report("amsa", {{"dice", 0.2}, {"frame_sim_clip_style", 0.6}}),
                                       report("amsa+mpl", {{"dice", 0.3}, {"frame_sim_clip_style", 0.7}})};
    const auto text = ablation_table(runs);
    int lines = 0;
    for (char c : text) lines += c == '\n';
    CHECK(lines == 4);
    CHECK(text.find("0.3000") != std::string::npos);
    CHECK(text.find("amsa+mpl") != std::string::npos);
    // Columns follow the canonical metric order.
    CHECK(text.find("frame_sim_clip_style") < text.find("dice"));

    CHECK_NOTHROW(ablation_table({runs[0], runs[1]}));
    CHECK_THROWS(ablation_table({runs[0]}));
    CHECK_THROWS(ablation_table({runs[0], report("odd", {{"dice", 0.1}})}));

    const auto j = nlohmann::json::parse(ablation_table(runs, TableFormat::Json));
    REQUIRE(j["rows"].size() == 3);
    CHECK(j["rows"][2]["run"] == "amsa+mpl");
    CHECK(j["rows"][1]["dice"].get<double>() == doctest::Approx(0.2));
    CHECK(j["columns"].size() == 2);
}
