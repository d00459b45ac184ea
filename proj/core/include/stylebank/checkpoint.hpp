#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stylebank/loss.hpp"
#include "stylebank/network.hpp"

namespace stylebank {

// Binary container: magic "SBNK", u16 version, u32 entry count, then per entry
// u16 name length + UTF-8 name, u8 dtype tag, u8 rank, u32 dims[rank], payload.
// All integers little-endian.

inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class EntryType : std::uint8_t {
    F32 = 0,   ///< little-endian float32 tensor
    Bytes = 1, ///< opaque bytes (rank 1), used for meta/config JSON
};

struct CheckpointEntry {
    std::string name;
    EntryType type = EntryType::F32;
    std::vector<std::uint32_t> dims;
    std::vector<std::uint8_t> payload;

    static CheckpointEntry from_tensor(std::string name, const Tensor& tensor);
    static CheckpointEntry from_text(std::string name, const std::string& text);
    Tensor to_tensor() const;
    std::string to_text() const;
};

struct Checkpoint {
    std::vector<CheckpointEntry> entries;

    const CheckpointEntry* find(const std::string& name) const;
    std::vector<std::uint8_t> serialize() const;
    static Checkpoint parse(std::span<const std::uint8_t> bytes);
};

Checkpoint to_checkpoint(const StyleBankModel& model);
/// Rebuilds and fully validates a model; no partial model escapes on error.
StyleBankModel model_from_checkpoint(const Checkpoint& checkpoint);

Checkpoint to_checkpoint(const FeatureExtractor& extractor);
FeatureExtractor extractor_from_checkpoint(const Checkpoint& checkpoint);

void save_model(const std::filesystem::path& path, const StyleBankModel& model);
StyleBankModel load_model(const std::filesystem::path& path);

void save_extractor(const std::filesystem::path& path, const FeatureExtractor& extractor);
FeatureExtractor load_extractor(const std::filesystem::path& path);

} // namespace stylebank
