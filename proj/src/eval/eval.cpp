#include "storynizor/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <stdexcept>

#include "storynizor/data.hpp"
#include "storynizor/tokenizer.hpp"

namespace storynizor {

double cosine_similarity(const Embedding& a, const Embedding& b) {
    if (a.size() != b.size()) throw std::invalid_argument("embedding sizes differ");
    double ab = 0, aa = 0, bb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    // Two featureless inputs count as identical, one featureless input as unrelated.
    if (aa == 0 || bb == 0) return aa == bb ? 1.0 : 0.0;
    return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

namespace {

int palette_size() { return static_cast<int>(palette_names().size()); }
int background_count() { return static_cast<int>(background_names().size()); }

double rgb_dist2(const uint8_t* p, const std::array<uint8_t, 3>& c) {
    double d = 0;
    for (int k = 0; k < 3; ++k) d += (double(p[k]) - c[k]) * (double(p[k]) - c[k]);
    return d;
}

void require_rgb(const Image& im) {
    if (im.channels != 3 || im.pixels.empty()) throw std::invalid_argument("encoder expects a non-empty RGB image");
}

void sqrt_normalize(Embedding& e, double total) {
    for (auto& v : e) v = total > 0 ? std::sqrt(v / total) : 0.0;
}

}  // namespace

Embedding ToyTextImageEncoder::encode_text(const std::string& prompt) const {
    Embedding e(static_cast<size_t>(palette_size() + background_count()), 0.0);
    const auto& colors = palette_names();
    const auto& bgs = background_names();
    for (const auto& w : split_words(prompt)) {
        if (auto it = std::find(colors.begin(), colors.end(), w); it != colors.end())
            e[static_cast<size_t>(it - colors.begin())] += 0.2;
        if (auto it = std::find(bgs.begin(), bgs.end(), w); it != bgs.end())
            e[static_cast<size_t>(palette_size() + (it - bgs.begin()))] += 0.8;
    }
    return e;
}

Embedding ToyTextImageEncoder::encode_image(const Image& image) const {
    require_rgb(image);
    const int np = palette_size(), nb = background_count();
    Embedding e(static_cast<size_t>(np + nb), 0.0);
    constexpr double kMaxDist2 = 60.0 * 60.0;
    const size_t count = static_cast<size_t>(image.width) * image.height;
    for (size_t i = 0; i < count; ++i) {
        const uint8_t* p = &image.pixels[i * 3];
        double best = kMaxDist2;
        int slot = -1;
        for (int c = 0; c < np; ++c)
            if (double d = rgb_dist2(p, palette_rgb(c)); d < best) best = d, slot = c;
        for (int b = 0; b < nb; ++b)
            for (const auto& c : background_rgb(b))
                if (double d = rgb_dist2(p, c); d < best) best = d, slot = np + b;
        if (slot >= 0) e[static_cast<size_t>(slot)] += 1.0;
    }
    for (auto& v : e) v /= static_cast<double>(count);
    return e;
}

Embedding ToyHistogramEncoder::encode(const Image& image) const {
    require_rgb(image);
    Embedding e(64, 0.0);
    const size_t count = static_cast<size_t>(image.width) * image.height;
    for (size_t i = 0; i < count; ++i) {
        const uint8_t* p = &image.pixels[i * 3];
        e[static_cast<size_t>((p[0] / 64) * 16 + (p[1] / 64) * 4 + p[2] / 64)] += 1.0;
    }
    sqrt_normalize(e, static_cast<double>(count));
    return e;
}

Embedding ToyGridEncoder::encode(const Image& image) const {
    require_rgb(image);
    constexpr int g = 8;
    Embedding e(g * g * 3, 0.0);
    std::vector<double> n(g * g, 0.0);
    double mean[3] = {0, 0, 0};
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) {
            const int cell = (y * g / image.height) * g + x * g / image.width;
            n[static_cast<size_t>(cell)] += 1;
            for (int c = 0; c < 3; ++c) {
                const double v = image.at(x, y, c) / 255.0;
                e[static_cast<size_t>(cell * 3 + c)] += v;
                mean[c] += v;
            }
        }
    const double total = static_cast<double>(image.width) * image.height;
    for (int cell = 0; cell < g * g; ++cell)
        for (int c = 0; c < 3; ++c) {
            auto& v = e[static_cast<size_t>(cell * 3 + c)];
            v = (n[static_cast<size_t>(cell)] > 0 ? v / n[static_cast<size_t>(cell)] : mean[c] / total) - mean[c] / total;
        }
    return e;
}

Embedding ToyFaceEncoder::encode(const Image& image) const {
    require_rgb(image);
    constexpr int bins = 6;
    Embedding e(bins * bins * bins, 0.0);
    const double cx = image.width / 2.0, cy = image.height / 2.0;
    const double sigma = 0.3 * std::max(image.width, image.height);
    double total = 0;
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) {
            const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            const double w = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
            const int r = image.at(x, y, 0) * bins / 256, gg = image.at(x, y, 1) * bins / 256,
                      b = image.at(x, y, 2) * bins / 256;
            e[static_cast<size_t>((r * bins + gg) * bins + b)] += w;
            total += w;
        }
    sqrt_normalize(e, total);
    return e;
}

double text_image_similarity(const std::vector<Image>& images, const std::vector<std::string>& prompts,
                             const TextImageEncoder& encoder) {
    if (images.size() != prompts.size())
        throw std::invalid_argument("text_image_similarity: " + std::to_string(images.size()) + " images but " +
                                    std::to_string(prompts.size()) + " prompts");
    if (images.empty()) throw std::invalid_argument("text_image_similarity: no images");
    double s = 0;
    for (size_t i = 0; i < images.size(); ++i)
        s += cosine_similarity(encoder.encode_image(images[i]), encoder.encode_text(prompts[i]));
    return s / static_cast<double>(images.size());
}

double inter_frame_similarity(const std::vector<Image>& images, const ImageEmbedder& encoder) {
    if (images.size() < 2) throw std::invalid_argument("inter_frame_similarity needs at least 2 images");
    std::vector<Embedding> e;
    for (const auto& im : images) e.push_back(encoder.encode(im));
    double s = 0;
    int pairs = 0;
    for (size_t i = 0; i < e.size(); ++i)
        for (size_t j = i + 1; j < e.size(); ++j, ++pairs) s += cosine_similarity(e[i], e[j]);
    return s / pairs;
}

FaceSimilarity face_similarity(const std::vector<Image>& crops, const std::vector<Image>* reference,
                               const ImageEmbedder& encoder) {
    FaceSimilarity out;
    out.face_sim = inter_frame_similarity(crops, encoder);
    if (reference) {
        if (reference->empty()) throw std::invalid_argument("face_similarity: reference set is empty");
        double s = 0;
        for (const auto& r : *reference) {
            const auto er = encoder.encode(r);
            for (const auto& c : crops) s += cosine_similarity(encoder.encode(c), er);
        }
        out.face_sim_ref = s / static_cast<double>(crops.size() * reference->size());
    }
    return out;
}

std::vector<Image> character_crops(const std::vector<Image>& images, const std::vector<Image>& masks, int size) {
    if (images.size() != masks.size()) throw std::invalid_argument("character_crops: one mask per image required");
    std::vector<Image> out;
    for (size_t i = 0; i < images.size(); ++i) {
        const auto box = mask_bounds(masks[i]);
        if (box.empty()) throw std::invalid_argument("character_crops: frame " + std::to_string(i) + " has an empty mask");
        out.push_back(crop_resize(images[i], box, 2, size));
    }
    return out;
}

void EvalReport::validate() const {
    const auto& known = metric_names();
    for (const auto& [name, v] : metrics) {
        if (std::find(known.begin(), known.end(), name) == known.end())
            throw std::invalid_argument("unknown metric '" + name + "'");
        const double lo = name == "dice" ? 0.0 : -1.0;
        if (!std::isfinite(v) || v < lo - 1e-9 || v > 1.0 + 1e-9)
            throw std::invalid_argument("metric " + name + " out of range: " + std::to_string(v));
        auto c = counts.find(name);
        if (c == counts.end() || c->second <= 0) throw std::invalid_argument("metric " + name + " has no samples");
    }
}

nlohmann::json EvalReport::to_json() const {
    return {{"run_id", run_id}, {"metrics", metrics}, {"counts", counts}, {"config_hash", config_hash}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    EvalReport r;
    r.run_id = j.at("run_id").get<std::string>();
    r.metrics = j.at("metrics").get<std::map<std::string, double>>();
    r.counts = j.at("counts").get<std::map<std::string, int>>();
    r.config_hash = j.value("config_hash", "");
    r.validate();
    return r;
}

EvalReport merge_reports(const std::string& run_id, const std::vector<EvalReport>& parts) {
    if (parts.empty()) throw std::invalid_argument("merge_reports: nothing to merge");
    EvalReport out;
    out.run_id = run_id;
    out.config_hash = parts.front().config_hash;
    std::map<std::string, int> stories;
    for (const auto& p : parts)
        for (const auto& [name, v] : p.metrics) {
            out.metrics[name] += v;
            out.counts[name] += p.counts.count(name) ? p.counts.at(name) : 1;
            ++stories[name];
        }
    for (auto& [name, v] : out.metrics) v /= stories[name];
    return out;
}

std::string ablation_table(const std::vector<EvalReport>& runs, TableFormat format) {
    if (runs.size() < 2) throw std::invalid_argument("ablation_table needs at least 2 runs, got " + std::to_string(runs.size()));
    std::set<std::string> keys;
    for (const auto& [k, v] : runs.front().metrics) keys.insert(k);
    for (const auto& r : runs) {
        std::set<std::string> mine;
        for (const auto& [k, v] : r.metrics) mine.insert(k);
        if (mine != keys)
            throw std::invalid_argument("ablation_table: run '" + r.run_id + "' reports different metrics than '" +
                                        runs.front().run_id + "'");
    }
    std::vector<std::string> columns;
    for (const auto& name : metric_names())
        if (keys.count(name)) columns.push_back(name);

    if (format == TableFormat::Json) {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& r : runs) {
            nlohmann::json row{{"run", r.run_id}};
            for (const auto& c : columns) row[c] = r.metrics.at(c);
            rows.push_back(row);
        }
        return nlohmann::json{{"columns", columns}, {"rows", rows}}.dump(2) + "\n";
    }

    size_t run_w = 3;
    for (const auto& r : runs) run_w = std::max(run_w, r.run_id.size());
    std::string out = "run" + std::string(run_w - 3, ' ');
    for (const auto& c : columns) out += "  " + std::string(c.size() < 8 ? 8 - c.size() : 0, ' ') + c;
    out += '\n';
    for (const auto& r : runs) {
        out += r.run_id + std::string(run_w - r.run_id.size(), ' ');
        for (const auto& c : columns) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.4f", r.metrics.at(c));
            const std::string cell(buf);
            out += "  " + std::string(std::max<size_t>(c.size(), 8) - cell.size(), ' ') + cell;
        }
        out += '\n';
    }
    return out;
}

}  // namespace storynizor
