#pragma once

#include "dirmag/model.hpp"
#include "dirmag/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dirmag {

// Container layout on disk:
//   "GPTC1\n" | u64 little-endian header length | UTF-8 JSON header | payload
// Header: {"metadata": {...}, "tensors": {name: {"dtype": "f32", "shape": [...],
//          "byte_offset": n, "byte_length": n}}}; offsets are relative to the
// start of the payload. The writer emits compact JSON with sorted keys.
inline constexpr char kContainerMagic[] = "GPTC1\n";
inline constexpr std::size_t kContainerMagicSize = 6;

struct ContainerEntry {
    std::vector<std::size_t> shape;
    std::uint64_t byte_offset = 0;
    std::uint64_t byte_length = 0;
};

class TensorContainer {
public:
    TensorContainer() = default;

    // Lays tensors out back to back in name order.
    static TensorContainer from_tensors(std::map<std::string, Tensor> tensors,
                                        nlohmann::json metadata = nlohmann::json::object());

    const std::map<std::string, Tensor>& tensors() const noexcept { return tensors_; }
    std::map<std::string, Tensor> take_tensors() { return std::move(tensors_); }
    const std::map<std::string, ContainerEntry>& layout() const noexcept { return layout_; }
    const nlohmann::json& metadata() const noexcept { return metadata_; }
    std::uint64_t payload_size() const noexcept { return payload_size_; }

    friend TensorContainer parse_container(std::span<const std::uint8_t> bytes);

private:
    nlohmann::json metadata_ = nlohmann::json::object();
    std::map<std::string, Tensor> tensors_;
    std::map<std::string, ContainerEntry> layout_;
    std::uint64_t payload_size_ = 0;
};

TensorContainer parse_container(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> serialize_container(const TensorContainer& container);

TensorContainer load_container(const std::filesystem::path& path);
void save_container(const std::filesystem::path& path, const TensorContainer& container);

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

// Model containers carry the config under metadata["config"].
Model load_model(const std::filesystem::path& path);
void save_model(const std::filesystem::path& path, const Model& model);

struct MinimalPair {
    std::vector<int> good_tokens;
    std::vector<int> bad_tokens;
};

struct DatasetRecord {
    std::string id;
    std::vector<int> tokens;
    std::optional<std::string> text;
    std::optional<std::vector<int>> pos;    // coarse POS class 0..5 per token
    std::optional<std::vector<int>> depth;  // dependency depth per token, root = 0
    std::optional<MinimalPair> pair;

    bool is_pair() const { return pair.has_value(); }
};

inline constexpr int kPosClasses = 6;

struct TokenizedDataset {
    std::vector<DatasetRecord> records;

    std::size_t size() const { return records.size(); }
    // Throws InputError naming the first record with an id >= vocab_size.
    void validate_vocab(std::size_t vocab_size) const;
};

// Newline-delimited JSON; one record per line. Violations raise DatasetError
// with the offending line number.
TokenizedDataset parse_dataset(std::istream& in);
TokenizedDataset load_dataset(const std::filesystem::path& path);
void save_dataset(const std::filesystem::path& path, const TokenizedDataset& dataset);
nlohmann::json record_to_json(const DatasetRecord& record);

} // namespace dirmag
