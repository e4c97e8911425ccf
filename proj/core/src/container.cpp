#include "vitprune/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "vitprune/errors.hpp"

namespace vitprune {

static_assert(std::endian::native == std::endian::little,
              "the container stores little-endian floats and is written by memcpy");

void to_json(nlohmann::json& j, const ModelConfig& c) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerConfig& l : c.layers) {
    layers.push_back({{"heads", l.heads},
                      {"qk_size", l.qk_size},
                      {"value_size", l.value_size},
                      {"expansion_size", l.expansion_size}});
  }
  j = nlohmann::json{{"image_size", c.image_size},
                     {"patch_size", c.patch_size},
                     {"embed_dim", c.embed_dim},
                     {"num_classes", c.num_classes},
                     {"layernorm_eps", c.layernorm_eps},
                     {"depth", c.depth()},
                     {"layers", layers}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.image_size = j.at("image_size").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.layernorm_eps = j.at("layernorm_eps").get<double>();
  c.layers.clear();
  for (const auto& l : j.at("layers")) {
    c.layers.push_back({l.at("heads").get<int>(), l.at("qk_size").get<int>(),
                        l.at("value_size").get<int>(), l.at("expansion_size").get<int>()});
  }
  if (j.at("depth").get<int>() != c.depth()) {
    throw FormatError("config.depth does not match the number of layers");
  }
}

namespace {

struct Entry {
  std::string name;
  const Tensor* tensor;
};

std::vector<Entry> entries_of(const VitModel& model) {
  std::vector<Entry> out;
  for (const auto& nt : named_tensors(model.params)) out.push_back({nt.name, nt.tensor});
  for (std::size_t l = 0; l < model.probes.size(); ++l) {
    const std::string pre = "probes." + std::to_string(l) + ".";
    const Probe& p = model.probes[l];
    out.push_back({pre + "ln.gamma", &p.ln_gamma});
    out.push_back({pre + "ln.beta", &p.ln_beta});
    out.push_back({pre + "weight", &p.weight});
    out.push_back({pre + "bias", &p.bias});
  }
  return out;
}

std::uint32_t crc32_of(const void* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (size > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t header_digest(nlohmann::json header) {
  header.erase("header_crc32");
  const std::string s = header.dump();
  return crc32_of(s.data(), s.size());
}

[[noreturn]] void bad(const std::string& field, const std::string& why) {
  throw FormatError("container field '" + field + "': " + why);
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const VitModel& model) {
  model.validate();
  const std::vector<Entry> entries = entries_of(model);
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  std::vector<std::uint8_t> payload;
  for (const Entry& e : entries) {
    tensors.push_back({{"name", e.name}, {"shape", e.tensor->shape()}, {"byte_offset", offset}});
    const std::size_t bytes = e.tensor->numel() * sizeof(float);
    const auto* src = reinterpret_cast<const std::uint8_t*>(e.tensor->data());
    payload.insert(payload.end(), src, src + bytes);
    offset += bytes;
  }
  nlohmann::json header{{"format_version", kContainerVersion},
                        {"config", model.config},
                        {"class_ids", model.class_ids},
                        {"probe_layers", model.probes.size()},
                        {"tensors", tensors},
                        {"payload_bytes", payload.size()},
                        {"payload_crc32", crc32_of(payload.data(), payload.size())}};
  header["header_crc32"] = header_digest(header);
  const std::string text = header.dump();
  if (text.size() > 0xFFFFFFFFu) throw FormatError("header too large");
  const auto len = static_cast<std::uint32_t>(text.size());

  std::vector<std::uint8_t> out(12 + text.size() + payload.size());
  std::memcpy(out.data(), kContainerMagic, 8);
  for (int i = 0; i < 4; ++i) out[8 + i] = static_cast<std::uint8_t>(len >> (8 * i));
  std::memcpy(out.data() + 12, text.data(), text.size());
  if (!payload.empty()) std::memcpy(out.data() + 12 + text.size(), payload.data(), payload.size());
  return out;
}

std::size_t container_header_size(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12) bad("header_len", "file shorter than the fixed preamble");
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(bytes[8 + i]) << (8 * i);
  return 12 + static_cast<std::size_t>(len);
}

VitModel deserialize_model(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kContainerMagic, 8) != 0) {
    throw FormatError("bad magic");
  }
  const std::size_t header_end = container_header_size(bytes);
  if (header_end > bytes.size()) bad("header_len", "exceeds file size");
  const std::string text(bytes.begin() + 12, bytes.begin() + header_end);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    bad("header", std::string("invalid JSON: ") + e.what());
  }
  if (!header.is_object()) bad("header", "not a JSON object");
  if (header.dump() != text) bad("header", "not in canonical form");
  if (!header.contains("format_version") || !header["format_version"].is_number_integer()) {
    bad("format_version", "missing");
  }
  if (header["format_version"].get<int>() != kContainerVersion) {
    bad("format_version", "unsupported version " + header["format_version"].dump());
  }
  if (!header.contains("header_crc32") || !header["header_crc32"].is_number_unsigned()) {
    bad("header_crc32", "missing");
  }
  if (header["header_crc32"].get<std::uint32_t>() != header_digest(header)) {
    bad("header_crc32", "checksum mismatch");
  }

  VitModel model;
  try {
    model.config = header.at("config").get<ModelConfig>();
    model.class_ids = header.at("class_ids").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    bad("config", e.what());
  }
  try {
    model.config.validate();
  } catch (const ArgumentError& e) {
    bad("config", e.what());
  }
  model.params = make_params<float>(model.config);
  const std::size_t d = model.config.embed_dim;
  const std::size_t probe_layers = header.value("probe_layers", std::size_t{0});
  if (probe_layers > static_cast<std::size_t>(model.config.depth())) {
    bad("probe_layers", "more probes than layers");
  }
  const std::size_t C = model.config.num_classes;
  model.probes.assign(probe_layers, Probe{Tensor({d}), Tensor({d}), Tensor({C, d}), Tensor({C})});
  // A probe's class count may differ from the head's; shapes are taken from the header.
  std::vector<Entry> expected = entries_of(model);

  const auto& tensors = header.at("tensors");
  if (!tensors.is_array() || tensors.size() != expected.size()) {
    bad("tensors", "expected " + std::to_string(expected.size()) + " entries");
  }
  const std::uint64_t payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
  if (bytes.size() - header_end != payload_bytes) {
    bad("payload_bytes", "file holds " + std::to_string(bytes.size() - header_end) +
                             " payload bytes, header says " + std::to_string(payload_bytes));
  }
  const std::uint8_t* payload = bytes.data() + header_end;
  if (crc32_of(payload, payload_bytes) != header.at("payload_crc32").get<std::uint32_t>()) {
    bad("payload_crc32", "checksum mismatch");
  }

  std::uint64_t offset = 0;
  for (std::size_t t = 0; t < expected.size(); ++t) {
    const auto& e = tensors[t];
    const std::string name = e.at("name").get<std::string>();
    if (name != expected[t].name) {
      bad("tensors[" + std::to_string(t) + "].name",
          "expected '" + expected[t].name + "', found '" + name + "'");
    }
    const Shape shape = e.at("shape").get<Shape>();
    const bool probe = name.rfind("probes.", 0) == 0;
    if (shape != expected[t].tensor->shape() &&
        !(probe && (name.ends_with(".weight") || name.ends_with(".bias")))) {
      bad("tensors[" + std::to_string(t) + "].shape",
          name + " has shape " + shape_to_string(shape) + ", config implies " +
              shape_to_string(expected[t].tensor->shape()));
    }
    if (e.at("byte_offset").get<std::uint64_t>() != offset) {
      bad("tensors[" + std::to_string(t) + "].byte_offset",
          "expected " + std::to_string(offset) + " for contiguous layout");
    }
    const std::size_t n = shape_numel(shape);
    if (offset + n * sizeof(float) > payload_bytes) {
      bad("tensors[" + std::to_string(t) + "]", "extends past the payload");
    }
    std::vector<float> data(n);
    std::memcpy(data.data(), payload + offset, n * sizeof(float));
    *const_cast<Tensor*>(expected[t].tensor) = Tensor(shape, std::move(data));
    offset += n * sizeof(float);
  }
  if (offset != payload_bytes) bad("payload_bytes", "trailing bytes after the last tensor");
  for (std::size_t l = 0; l < model.probes.size(); ++l) {
    const Probe& p = model.probes[l];
    if (p.weight.rank() != 2 || p.weight.cols() != d || p.bias.numel() != p.weight.rows()) {
      bad("probes." + std::to_string(l), "inconsistent probe shapes");
    }
  }
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    bad("class_ids", e.what());
  }
  return model;
}

void save_model(const VitModel& model, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

VitModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open model file " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace vitprune
