#include "storynizor/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <vector>

namespace storynizor {

namespace {

constexpr std::array<char, 8> kMagic{'S', 'T', 'R', 'Y', 'N', 'Z', 'R', '\0'};

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
void put_le(std::ostream& out, U value) {
    std::array<char, sizeof(U)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    out.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& in) {
    std::array<char, sizeof(U)> bytes;
    if (!in.read(bytes.data(), bytes.size())) throw std::runtime_error("checkpoint: unexpected end of file");
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    U value;
    std::memcpy(&value, bytes.data(), sizeof(U));
    return value;
}

void put_string(std::ostream& out, const std::string& s) {
    put_le<uint32_t>(out, static_cast<uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
    const auto n = get_le<uint32_t>(in);
    std::string s(n, '\0');
    if (n && !in.read(s.data(), n)) throw std::runtime_error("checkpoint: truncated string");
    return s;
}

void put_tensors(std::ostream& out, const TensorMap& tensors) {
    put_le<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put_string(out, name);
        put_le<uint32_t>(out, static_cast<uint32_t>(t.shape.size()));
        for (int64_t d : t.shape) put_le<int64_t>(out, d);
        for (float v : t.data) put_le<float>(out, v);
    }
}

TensorMap get_tensors(std::istream& in) {
    TensorMap tensors;
    const auto count = get_le<uint32_t>(in);
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = get_string(in);
        Shape shape(get_le<uint32_t>(in));
        for (auto& d : shape) d = get_le<int64_t>(in);
        Tensor<float> t(shape);
        for (auto& v : t.data) v = get_le<float>(in);
        tensors.emplace(std::move(name), std::move(t));
    }
    return tensors;
}

}  // namespace

std::string to_string(TrainingStage stage) {
    switch (stage) {
        case TrainingStage::Base: return "base";
        case TrainingStage::Synchronizer: return "synchronizer";
        case TrainingStage::Injector: return "injector";
    }
    return "unknown";
}

TrainingStage parse_stage(const std::string& name) {
    if (name == "base") return TrainingStage::Base;
    if (name == "synchronizer") return TrainingStage::Synchronizer;
    if (name == "injector") return TrainingStage::Injector;
    throw std::invalid_argument("unknown training stage '" + name + "' (expected base, synchronizer or injector)");
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    out.write(kMagic.data(), kMagic.size());
    put_le<uint32_t>(out, kCheckpointFormatVersion);
    put_string(out, ckpt.config.to_json().dump());
    put_le<uint32_t>(out, static_cast<uint32_t>(ckpt.stage));
    put_le<int64_t>(out, ckpt.step);
    put_le<int64_t>(out, ckpt.optimizer_step);
    put_string(out, ckpt.rng_state);
    put_tensors(out, ckpt.parameters);
    put_tensors(out, ckpt.optimizer);
    if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path);
    std::array<char, 8> magic{};
    if (!in.read(magic.data(), magic.size()) || magic != kMagic)
        throw CheckpointVersionError("not a checkpoint file: " + path);
    const auto version = get_le<uint32_t>(in);
    if (version != kCheckpointFormatVersion)
        throw CheckpointVersionError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                                     std::to_string(kCheckpointFormatVersion) + ")");
    Checkpoint ckpt;
    ckpt.config = ModelConfig::from_json(nlohmann::json::parse(get_string(in)));
    const auto stage = get_le<uint32_t>(in);
    if (stage > static_cast<uint32_t>(TrainingStage::Injector)) throw CheckpointVersionError("unknown stage tag");
    ckpt.stage = static_cast<TrainingStage>(stage);
    ckpt.step = get_le<int64_t>(in);
    ckpt.optimizer_step = get_le<int64_t>(in);
    ckpt.rng_state = get_string(in);
    ckpt.parameters = get_tensors(in);
    ckpt.optimizer = get_tensors(in);
    return ckpt;
}

Checkpoint load_checkpoint(const std::string& path, const ModelConfig& expected) {
    Checkpoint ckpt = load_checkpoint(path);
    const auto diff = expected.structural_differences(ckpt.config);
    if (!diff.empty()) {
        std::string fields;
        for (const auto& f : diff) fields += (fields.empty() ? "" : ", ") + f;
        throw CheckpointVersionError("checkpoint " + path + " was written for a different model config (" + fields + ")");
    }
    return ckpt;
}

std::string file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<uint8_t>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

}  // namespace storynizor
