#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "storynizor/config.hpp"
#include "storynizor/tensor.hpp"

namespace storynizor {

// `Base` trains the plain text-to-image backbone that the two adapter stages
// start from.
enum class TrainingStage { Base, Synchronizer, Injector };

std::string to_string(TrainingStage stage);
TrainingStage parse_stage(const std::string& name);

using TensorMap = std::map<std::string, Tensor<float>>;

struct Checkpoint {
    ModelConfig config;
    TrainingStage stage = TrainingStage::Base;
    int64_t step = 0;
    std::string rng_state;
    TensorMap parameters;  // keyed by canonical module path
    TensorMap optimizer;   // "m/<param>" and "v/<param>" moments
    int64_t optimizer_step = 0;
};

// Raised when a checkpoint's format version or config snapshot does not match.
class CheckpointVersionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr uint32_t kCheckpointFormatVersion = 1;

// Layout: magic "STRYNZR\0", u32 format version, u32+bytes config JSON,
// u32 stage, i64 step, i64 optimizer step, u32+bytes RNG state, then the
// parameter and optimizer tensor tables. All integers and float32 payloads
// are little-endian.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
// Also refuses snapshots whose structural config differs from `expected`.
Checkpoint load_checkpoint(const std::string& path, const ModelConfig& expected);

// FNV-1a 64 of a file's bytes, hex encoded.
std::string file_hash(const std::string& path);

}  // namespace storynizor
