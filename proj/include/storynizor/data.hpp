#pragma once

#include <array>
#include <string>
#include <vector>

#include "storynizor/image.hpp"
#include "storynizor/injector.hpp"
#include "storynizor/prompt.hpp"

namespace storynizor {

inline constexpr int kManifestVersion = 1;

// Word tables shared with the vocabulary. Indices are stable.
const std::vector<std::string>& palette_names();
const std::vector<std::string>& shape_names();
const std::vector<std::string>& action_names();
const std::vector<std::string>& background_names();
// RGB of palette entry i.
std::array<uint8_t, 3> palette_rgb(int i);
// Sky, ground and texture colours of background i.
std::array<std::array<uint8_t, 3>, 3> background_rgb(int i);

// What stays fixed across a story. The accent colour is never named in
// prompts, so only the pixels (or a reference image) reveal it.
struct CharacterSpec {
    int color = 0;
    int shape = 0;
    int accent = 0;
    int radius = 11;

    std::string description() const;  // "<color> <shape> hero"
    std::string id() const;
    bool operator==(const CharacterSpec&) const = default;
};

struct ScenePose {
    int background = 0;
    int action = 0;
    double cx = 32, cy = 32;
    double rotation = 0;  // radians
    uint64_t texture_seed = 0;
};

struct CharacterEntry {
    std::string description;
    TokenSpan span;
    std::string mask_file;  // relative to the group directory; empty when absent
    bool operator==(const CharacterEntry&) const = default;
};

struct FrameRecord {
    std::string image_file;
    std::string prompt;
    std::vector<CharacterEntry> characters;
    bool operator==(const FrameRecord&) const = default;
};

struct StoryGroup {
    std::string group_id;
    std::string identity_id;
    Provenance provenance = Provenance::Synthetic;
    std::string shared_description;
    CharacterSpec character;
    std::vector<FrameRecord> frames;
    std::vector<Image> images;               // one per frame
    std::vector<std::vector<Image>> masks;   // [frame][character]; empty Image when absent

    int frame_count() const { return static_cast<int>(frames.size()); }
    StoryPrompt story_prompt() const;
    bool operator==(const StoryGroup&) const = default;
};

// Scene rendering. The mask is the exact set of painted character pixels.
struct RenderedScene {
    Image image;
    Image mask;
};
RenderedScene render_scene(const CharacterSpec& character, const ScenePose& pose, int size = 64);
// Character membership test used by the renderer, exposed for re-rasterization.
Image rasterize_character(const CharacterSpec& character, const ScenePose& pose, int size = 64);

CharacterSpec random_character(Rng& rng);

// N frames of one character with distinct actions and backgrounds.
StoryGroup generate_synthetic_group(const CharacterSpec& character, int frames, uint64_t seed,
                                    const std::string& group_id, int size = 64);

struct SharedDescription {
    std::string text;
    std::vector<TokenSpan> spans;  // one per prompt, word-token indices
};
// Longest token run present contiguously in every prompt; ties go to the
// earliest start in the first prompt. Throws when no token is shared.
SharedDescription extract_shared_description(const std::vector<std::string>& prompts);

void write_story_group(const StoryGroup& group, const std::string& dir);
// Throws listing every referenced file that is missing.
StoryGroup load_story_group(const std::string& dir);
// Human-readable violations; an empty list means the group is compliant.
std::vector<std::string> validate_group(const StoryGroup& group);

IdBucket make_id_bucket(const StoryGroup& group, int reference_size);

struct DatasetSummary {
    int groups = 0;
    int images = 0;
    int masks = 0;
    int identities = 0;
};

// Writes groups/{group_id}/ under root for `groups` random identities.
DatasetSummary generate_dataset(const std::string& root, int groups, int frames, uint64_t seed);
std::vector<std::string> list_groups(const std::string& root);

}  // namespace storynizor
