#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "storynizor/data.hpp"

namespace storynizor {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string provenance_name(Provenance p) { return p == Provenance::Real ? "real" : "synthetic"; }

Provenance parse_provenance(const std::string& s) {
    if (s == "real") return Provenance::Real;
    if (s == "synthetic") return Provenance::Synthetic;
    throw std::runtime_error("unknown provenance '" + s + "'");
}

}  // namespace

void write_story_group(const StoryGroup& group, const std::string& dir) {
    fs::create_directories(dir);
    json m;
    m["format"] = "storynizor-group";
    m["version"] = kManifestVersion;
    m["group_id"] = group.group_id;
    m["identity_id"] = group.identity_id;
    m["provenance"] = provenance_name(group.provenance);
    m["shared_description"] = group.shared_description;
    m["character"] = {{"color", group.character.color},
                      {"shape", group.character.shape},
                      {"accent", group.character.accent},
                      {"radius", group.character.radius}};
    json frames = json::array();
    for (size_t n = 0; n < group.frames.size(); ++n) {
        const auto& f = group.frames[n];
        json jf{{"image", f.image_file}, {"prompt", f.prompt}};
        json chars = json::array();
        for (size_t c = 0; c < f.characters.size(); ++c) {
            const auto& ch = f.characters[c];
            json jc{{"description", ch.description}, {"span", {ch.span.first, ch.span.last}}};
            if (!ch.mask_file.empty()) jc["mask"] = ch.mask_file;
            chars.push_back(jc);
            if (!ch.mask_file.empty() && n < group.masks.size() && c < group.masks[n].size() &&
                !group.masks[n][c].pixels.empty())
                write_mask_png((fs::path(dir) / ch.mask_file).string(), group.masks[n][c]);
        }
        jf["characters"] = chars;
        frames.push_back(jf);
        if (n < group.images.size()) write_png((fs::path(dir) / f.image_file).string(), group.images[n]);
    }
    m["frames"] = frames;
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw std::runtime_error("cannot write manifest in " + dir);
    out << m.dump(2) << '\n';
}

StoryGroup load_story_group(const std::string& dir) {
    const auto manifest = fs::path(dir) / "manifest.json";
    std::ifstream in(manifest);
    if (!in) throw std::runtime_error("missing manifest: " + manifest.string());
    json m;
    try {
        in >> m;
    } catch (const json::exception& e) {
        throw std::runtime_error("malformed manifest " + manifest.string() + ": " + e.what());
    }
    if (m.value("format", "") != "storynizor-group")
        throw std::runtime_error("not a story group manifest: " + manifest.string());
    if (m.value("version", 0) != kManifestVersion)
        throw std::runtime_error("unsupported manifest version in " + manifest.string());

    StoryGroup g;
    g.group_id = m.at("group_id").get<std::string>();
    g.identity_id = m.at("identity_id").get<std::string>();
    g.provenance = parse_provenance(m.value("provenance", "synthetic"));
    g.shared_description = m.value("shared_description", "");
    if (m.contains("character")) {
        const auto& c = m["character"];
        g.character = {c.at("color").get<int>(), c.at("shape").get<int>(), c.at("accent").get<int>(),
                       c.at("radius").get<int>()};
    }
    std::vector<std::string> missing;
    for (const auto& jf : m.at("frames")) {
        FrameRecord f;
        f.image_file = jf.at("image").get<std::string>();
        f.prompt = jf.at("prompt").get<std::string>();
        for (const auto& jc : jf.value("characters", json::array())) {
            CharacterEntry c;
            c.description = jc.at("description").get<std::string>();
            c.span = {jc.at("span").at(0).get<int>(), jc.at("span").at(1).get<int>()};
            c.mask_file = jc.value("mask", "");
            f.characters.push_back(c);
        }
        g.frames.push_back(f);
    }
    for (const auto& f : g.frames) {
        if (!fs::exists(fs::path(dir) / f.image_file)) missing.push_back(f.image_file);
        for (const auto& c : f.characters)
            if (!c.mask_file.empty() && !fs::exists(fs::path(dir) / c.mask_file)) missing.push_back(c.mask_file);
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& s : missing) list += (list.empty() ? "" : ", ") + s;
        throw std::runtime_error("group " + g.group_id + " is missing files: " + list);
    }
    for (const auto& f : g.frames) {
        g.images.push_back(read_png((fs::path(dir) / f.image_file).string()));
        std::vector<Image> masks;
        for (const auto& c : f.characters)
            masks.push_back(c.mask_file.empty() ? Image() : read_mask_png((fs::path(dir) / c.mask_file).string()));
        g.masks.push_back(std::move(masks));
    }
    return g;
}

std::vector<std::string> validate_group(const StoryGroup& group) {
    std::vector<std::string> v;
    const int n = group.frame_count();
    if (n < 1) v.push_back("group has no frames");
    if (group.provenance == Provenance::Real && (n < 5 || n > 12))
        v.push_back("real groups need 5 to 12 images, found " + std::to_string(n));
    if (static_cast<int>(group.images.size()) != n) v.push_back("image count does not match frame count");

    std::vector<std::string> prompts;
    for (const auto& f : group.frames) prompts.push_back(f.prompt);
    const auto desc_words = split_words(group.shared_description);
    if (desc_words.empty()) v.push_back("shared description is empty");

    for (int i = 0; i < n; ++i) {
        const auto& f = group.frames[static_cast<size_t>(i)];
        const std::string tag = "frame " + std::to_string(i);
        const auto words = split_words(f.prompt);
        if (!desc_words.empty() &&
            std::search(words.begin(), words.end(), desc_words.begin(), desc_words.end()) == words.end())
            v.push_back(tag + ": prompt does not contain the shared description '" + group.shared_description + "'");
        for (size_t c = 0; c < f.characters.size(); ++c) {
            const auto& ch = f.characters[c];
            const std::string ctag = tag + " character " + std::to_string(c);
            if (ch.span.first < 0 || ch.span.last >= static_cast<int>(words.size()) || ch.span.length() < 1) {
                v.push_back(ctag + ": span outside the prompt");
            } else {
                std::vector<std::string> got(words.begin() + ch.span.first, words.begin() + ch.span.last + 1);
                if (got != split_words(ch.description)) v.push_back(ctag + ": span does not cover its description");
            }
            const Image* mask = nullptr;
            if (static_cast<size_t>(i) < group.masks.size() && c < group.masks[static_cast<size_t>(i)].size())
                mask = &group.masks[static_cast<size_t>(i)][c];
            if (ch.mask_file.empty() || !mask || mask->pixels.empty()) {
                v.push_back(ctag + ": missing mask");
                continue;
            }
            if (static_cast<size_t>(i) < group.images.size()) {
                const auto& im = group.images[static_cast<size_t>(i)];
                if (mask->width != im.width || mask->height != im.height)
                    v.push_back(ctag + ": mask size does not match the image");
            }
            for (uint8_t p : mask->pixels)
                if (p > 1) {
                    v.push_back(ctag + ": mask is not binary");
                    break;
                }
        }
    }
    if (n >= 2) {
        try {
            const auto shared = extract_shared_description(prompts);
            if (split_words(shared.text).size() < desc_words.size())
                v.push_back("longest shared token run '" + shared.text + "' is shorter than the shared description");
        } catch (const std::invalid_argument&) {
            v.push_back("prompts share no common token");
        }
    }
    return v;
}

DatasetSummary generate_dataset(const std::string& root, int groups, int frames, uint64_t seed) {
    Rng rng(seed);
    DatasetSummary s;
    std::set<std::string> identities;
    for (int g = 0; g < groups; ++g) {
        const auto character = random_character(rng);
        char id[32];
        std::snprintf(id, sizeof id, "g%04d", g);
        const auto group = generate_synthetic_group(character, frames, rng.derive_seed(), id);
        write_story_group(group, (fs::path(root) / "groups" / id).string());
        identities.insert(group.identity_id);
        s.groups++;
        s.images += group.frame_count();
        for (const auto& m : group.masks) s.masks += static_cast<int>(m.size());
    }
    s.identities = static_cast<int>(identities.size());
    return s;
}

std::vector<std::string> list_groups(const std::string& root) {
    const auto dir = fs::path(root) / "groups";
    if (!fs::is_directory(dir)) throw std::runtime_error("no groups/ directory under " + root);
    std::vector<std::string> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory() && fs::exists(e.path() / "manifest.json")) out.push_back(e.path().string());
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace storynizor
