#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vitprune/model.hpp"

namespace vitprune {

/// Layout: 8-byte magic "NUWAVIT1", u32 little-endian header length, UTF-8
/// JSON header, then every tensor as little-endian float32 in header order.
///
/// The header holds format_version, config, class_ids, tensors
/// [{name, shape, byte_offset}], payload_bytes, payload_crc32 and
/// header_crc32. The header is written in canonical form (sorted keys, no
/// whitespace) and must re-serialize to the exact stored bytes on load;
/// header_crc32 covers the header with that field removed. Together these
/// reject any single-byte change in the header region.
///
/// Depth probes are stored after the network tensors as probes.{l}.ln.gamma,
/// probes.{l}.ln.beta, probes.{l}.weight and probes.{l}.bias.
inline constexpr char kContainerMagic[8] = {'N', 'U', 'W', 'A', 'V', 'I', 'T', '1'};
inline constexpr int kContainerVersion = 1;

void to_json(nlohmann::json& j, const ModelConfig& config);
void from_json(const nlohmann::json& j, ModelConfig& config);

std::vector<std::uint8_t> serialize_model(const VitModel& model);

/// Throws FormatError naming the offending field.
VitModel deserialize_model(std::span<const std::uint8_t> bytes);

void save_model(const VitModel& model, const std::filesystem::path& path);
VitModel load_model(const std::filesystem::path& path);

/// Size in bytes of the magic, length field and JSON header of a container.
std::size_t container_header_size(std::span<const std::uint8_t> bytes);

}  // namespace vitprune
