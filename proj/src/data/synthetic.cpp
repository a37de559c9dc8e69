#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "storynizor/data.hpp"

namespace storynizor {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct BackgroundStyle {
    std::array<uint8_t, 3> sky, ground, texture;
};

// Same order as background_names().
const BackgroundStyle kBackgrounds[] = {
    {{120, 170, 210}, {40, 90, 40}, {20, 60, 25}},       // forest
    {{230, 200, 140}, {200, 160, 90}, {170, 130, 70}},   // desert
    {{150, 200, 240}, {30, 70, 150}, {90, 140, 210}},    // ocean
    {{170, 170, 190}, {90, 90, 100}, {60, 60, 70}},      // city
    {{210, 220, 235}, {245, 245, 250}, {200, 210, 225}}, // snow
    {{15, 20, 50}, {30, 30, 45}, {230, 230, 200}},       // night
    {{240, 140, 80}, {110, 60, 60}, {250, 190, 120}},    // sunset
    {{140, 200, 240}, {110, 180, 80}, {240, 230, 90}},   // meadow
    {{60, 50, 45}, {90, 75, 60}, {40, 32, 28}},          // cave
    {{140, 210, 240}, {235, 215, 160}, {210, 190, 130}}, // beach
};

bool inside_shape(int shape, double u, double v) {
    const double rho = std::hypot(u, v);
    switch (shape) {
        case 0:  // circle
            return rho <= 1.0;
        case 1:  // square
            return std::max(std::abs(u), std::abs(v)) <= 0.8;
        case 2: {  // triangle (apex up)
            const double ax = 0, ay = -1, bx = -0.95, by = 0.75, cx = 0.95, cy = 0.75;
            auto edge = [&](double x0, double y0, double x1, double y1) {
                return (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0);
            };
            const double e0 = edge(ax, ay, bx, by), e1 = edge(bx, by, cx, cy), e2 = edge(cx, cy, ax, ay);
            return (e0 <= 0 && e1 <= 0 && e2 <= 0) || (e0 >= 0 && e1 >= 0 && e2 >= 0);
        }
        case 3:  // diamond
            return std::abs(u) + std::abs(v) <= 1.0;
        case 4: {  // star
            const double theta = std::atan2(v, u);
            return rho <= 0.62 + 0.38 * std::cos(5 * theta + kPi / 2);
        }
        case 5:  // cross
            return (std::abs(u) <= 0.32 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.32 && std::abs(u) <= 1.0);
        case 6:  // ring
            return rho <= 1.0 && rho >= 0.55;
        case 7: {  // hexagon
            const double s3 = std::sqrt(3.0);
            return std::abs(v) <= s3 / 2 && s3 * std::abs(u) + std::abs(v) <= s3;
        }
        default:
            throw std::invalid_argument("unknown shape index " + std::to_string(shape));
    }
}

// 0 = background, 1 = body, 2 = accent.
int character_pixel(const CharacterSpec& c, const ScenePose& pose, int x, int y) {
    const double dx = x + 0.5 - pose.cx, dy = y + 0.5 - pose.cy;
    const double cs = std::cos(-pose.rotation), sn = std::sin(-pose.rotation);
    const double u = (cs * dx - sn * dy) / c.radius, v = (sn * dx + cs * dy) / c.radius;
    if (std::hypot(u, v) <= 0.38) return 2;
    return inside_shape(c.shape, u, v) ? 1 : 0;
}

void paint_background(Image& im, const ScenePose& pose) {
    const auto& style = kBackgrounds[pose.background];
    Rng rng(pose.texture_seed);
    const int horizon = im.height * 5 / 8 + static_cast<int>(rng.uniform_int(7)) - 3;
    for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x) {
            const auto& col = y < horizon ? style.sky : style.ground;
            for (int ch = 0; ch < 3; ++ch) im.at(x, y, ch) = col[ch];
        }
    const int dots = 24 + static_cast<int>(rng.uniform_int(16));
    for (int i = 0; i < dots; ++i) {
        const int x0 = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(im.width - 1)));
        const int y0 = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(im.height - 1)));
        for (int y = y0; y < y0 + 2; ++y)
            for (int x = x0; x < x0 + 2; ++x)
                for (int ch = 0; ch < 3; ++ch) im.at(x, y, ch) = style.texture[ch];
    }
}

}  // namespace

const std::vector<std::string>& palette_names() {
    static const std::vector<std::string> v{"red",   "green", "blue", "yellow", "purple", "orange",
                                            "pink",  "cyan",  "white", "black", "gray",   "brown"};
    return v;
}

const std::vector<std::string>& shape_names() {
    static const std::vector<std::string> v{"circle", "square", "triangle", "diamond",
                                            "star",   "cross",  "ring",     "hexagon"};
    return v;
}

const std::vector<std::string>& action_names() {
    static const std::vector<std::string> v{"running", "jumping", "sitting", "standing",
                                            "flying",  "walking", "dancing", "sleeping"};
    return v;
}

const std::vector<std::string>& background_names() {
    static const std::vector<std::string> v{"forest", "desert", "ocean",  "city", "snow",
                                            "night",  "sunset", "meadow", "cave", "beach"};
    return v;
}

std::array<std::array<uint8_t, 3>, 3> background_rgb(int i) {
    if (i < 0 || i >= static_cast<int>(std::size(kBackgrounds)))
        throw std::out_of_range("background index " + std::to_string(i));
    const auto& b = kBackgrounds[i];
    return {b.sky, b.ground, b.texture};
}

std::array<uint8_t, 3> palette_rgb(int i) {
    static const std::array<uint8_t, 3> rgb[] = {
        {220, 40, 40},  {40, 180, 60},   {40, 80, 220},   {240, 220, 40}, {140, 50, 190}, {245, 140, 30},
        {245, 130, 190}, {40, 210, 220}, {250, 250, 250}, {15, 15, 15},   {128, 128, 128}, {130, 80, 40}};
    if (i < 0 || i >= 12) throw std::invalid_argument("palette index out of range");
    return rgb[i];
}

std::string CharacterSpec::description() const {
    return palette_names().at(static_cast<size_t>(color)) + " " + shape_names().at(static_cast<size_t>(shape)) +
           " hero";
}

std::string CharacterSpec::id() const {
    return palette_names().at(static_cast<size_t>(color)) + "-" + shape_names().at(static_cast<size_t>(shape)) + "-" +
           palette_names().at(static_cast<size_t>(accent)) + "-r" + std::to_string(radius);
}

Image rasterize_character(const CharacterSpec& character, const ScenePose& pose, int size) {
    Image mask(size, size, 1);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) mask.at(x, y) = character_pixel(character, pose, x, y) ? 1 : 0;
    return mask;
}

RenderedScene render_scene(const CharacterSpec& character, const ScenePose& pose, int size) {
    RenderedScene s{Image(size, size, 3), Image(size, size, 1)};
    paint_background(s.image, pose);
    const auto body = palette_rgb(character.color), accent = palette_rgb(character.accent);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const int p = character_pixel(character, pose, x, y);
            if (!p) continue;
            const auto& col = p == 2 ? accent : body;
            for (int ch = 0; ch < 3; ++ch) s.image.at(x, y, ch) = col[ch];
            s.mask.at(x, y) = 1;
        }
    return s;
}

CharacterSpec random_character(Rng& rng) {
    CharacterSpec c;
    c.color = static_cast<int>(rng.uniform_int(8));
    c.shape = static_cast<int>(rng.uniform_int(8));
    do {
        c.accent = static_cast<int>(rng.uniform_int(12));
    } while (c.accent == c.color);
    c.radius = 9 + static_cast<int>(rng.uniform_int(5));
    return c;
}

StoryGroup generate_synthetic_group(const CharacterSpec& character, int frames, uint64_t seed,
                                    const std::string& group_id, int size) {
    if (frames < 1) throw std::invalid_argument("a story group needs at least one frame");
    Rng rng(seed);
    std::vector<int> backgrounds(background_names().size()), actions(action_names().size());
    std::iota(backgrounds.begin(), backgrounds.end(), 0);
    std::iota(actions.begin(), actions.end(), 0);
    rng.shuffle(backgrounds.begin(), backgrounds.end());
    rng.shuffle(actions.begin(), actions.end());

    StoryGroup g;
    g.group_id = group_id;
    g.identity_id = character.id();
    g.character = character;
    g.shared_description = character.description();
    const double scale = size / 64.0;
    for (int n = 0; n < frames; ++n) {
        ScenePose pose;
        pose.background = backgrounds[static_cast<size_t>(n) % backgrounds.size()];
        pose.action = actions[static_cast<size_t>(n) % actions.size()];
        const double margin = character.radius * scale + 2;
        pose.cx = rng.uniform(margin, size - margin);
        const std::string& act = action_names()[static_cast<size_t>(pose.action)];
        double lo = 0.40, hi = 0.70;
        if (act == "flying" || act == "jumping") lo = 0.25, hi = 0.45;
        if (act == "sleeping" || act == "sitting") lo = 0.60, hi = 0.80;
        pose.cy = std::clamp(rng.uniform(lo, hi) * size, margin, size - margin);
        pose.rotation = (act == "sleeping" ? kPi / 2 : 0.0) + rng.uniform(-0.4, 0.4);
        pose.texture_seed = rng.derive_seed();

        CharacterSpec scaled = character;
        scaled.radius = static_cast<int>(std::lround(character.radius * scale));
        auto scene = render_scene(scaled, pose, size);

        FrameRecord f;
        f.image_file = "frame" + std::to_string(n) + ".png";
        f.prompt = g.shared_description + " " + act + " in " + background_names()[static_cast<size_t>(pose.background)];
        f.characters.push_back({g.shared_description, locate_span(f.prompt, g.shared_description),
                                "frame" + std::to_string(n) + "_char0.png"});
        g.frames.push_back(std::move(f));
        g.images.push_back(std::move(scene.image));
        g.masks.push_back({std::move(scene.mask)});
    }
    return g;
}

StoryPrompt StoryGroup::story_prompt() const {
    StoryPrompt sp;
    for (const auto& f : frames) {
        FramePrompt fp{f.prompt, {}};
        for (const auto& c : f.characters) fp.characters.push_back({c.description, "", c.span});
        sp.frames.push_back(std::move(fp));
    }
    return sp;
}

SharedDescription extract_shared_description(const std::vector<std::string>& prompts) {
    if (prompts.size() < 2) throw std::invalid_argument("shared description needs at least two prompts");
    std::vector<std::vector<std::string>> words;
    for (const auto& p : prompts) words.push_back(split_words(p));
    const auto& first = words.front();
    for (size_t len = first.size(); len >= 1; --len)
        for (size_t start = 0; start + len <= first.size(); ++start) {
            const auto b = first.begin() + static_cast<std::ptrdiff_t>(start);
            const auto e = b + static_cast<std::ptrdiff_t>(len);
            SharedDescription out;
            bool everywhere = true;
            for (const auto& w : words) {
                auto it = std::search(w.begin(), w.end(), b, e);
                if (it == w.end()) {
                    everywhere = false;
                    break;
                }
                const int s = static_cast<int>(it - w.begin());
                out.spans.push_back({s, s + static_cast<int>(len) - 1});
            }
            if (!everywhere) continue;
            for (auto it = b; it != e; ++it) out.text += (it == b ? "" : " ") + *it;
            return out;
        }
    throw std::invalid_argument("prompts share no common token; group is not compliant");
}

IdBucket make_id_bucket(const StoryGroup& group, int reference_size) {
    IdBucket b;
    b.identity_id = group.identity_id;
    b.provenance = group.provenance;
    for (int n = 0; n < group.frame_count(); ++n) {
        const auto& masks = group.masks.at(static_cast<size_t>(n));
        if (masks.empty() || masks.front().pixels.empty())
            throw std::invalid_argument("frame " + std::to_string(n) + " of group " + group.group_id +
                                        " has no character");
        const auto box = mask_bounds(masks.front());
        if (box.empty())
            throw std::invalid_argument("frame " + std::to_string(n) + " of group " + group.group_id +
                                        " has an empty character mask");
        b.images.push_back(crop_resize(group.images.at(static_cast<size_t>(n)), box, 2, reference_size));
        b.source_frames.push_back(n);
    }
    return b;
}

}  // namespace storynizor
