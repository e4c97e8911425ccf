#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vitprune/tensor.hpp"

namespace vitprune {

/// Per-channel normalization x' = (x - mean) / std applied to pixels in [0, 1].
/// Defaults are the published CIFAR-10 training-set statistics.
struct Normalization {
  std::array<float, 3> mean{0.4914f, 0.4822f, 0.4465f};
  std::array<float, 3> std{0.2470f, 0.2435f, 0.2616f};
};

void to_json(nlohmann::json& j, const Normalization& n);

enum class Split : std::uint8_t { kTrain, kEval };

struct Dataset {
  int image_size = 32;
  std::vector<float> pixels;    // n x 3 x S x S, normalized
  std::vector<int> labels;      // label values in [0, class_ids.size())
  std::vector<Split> splits;
  std::vector<int> class_ids;   // label value -> original class id
  std::vector<std::string> class_names;  // indexed by label value
  Normalization normalization;

  std::size_t size() const { return labels.size(); }
  std::size_t image_elems() const {
    return 3 * static_cast<std::size_t>(image_size) * image_size;
  }

  /// Images of the given samples as [k x 3 x S x S].
  Tensor images(const std::vector<std::size_t>& ids) const;
  Tensor all_images() const;
  std::vector<std::size_t> indices(Split split) const;
  /// Sample subset, preserving order, label space and metadata.
  Dataset subset(const std::vector<std::size_t>& ids) const;
  /// Samples of one split.
  Dataset split(Split which) const;
};

/// Classes an edge model must recognize, as original class ids.
struct SubTask {
  std::vector<int> classes;
  std::string id;

  /// Position of an original class id in `classes`; throws if absent.
  int label_of(int class_id) const;
};

SubTask load_subtask(const std::filesystem::path& path);
void save_subtask(const SubTask& task, const std::filesystem::path& path);
void to_json(nlohmann::json& j, const SubTask& task);
void from_json(const nlohmann::json& j, SubTask& task);

/// CIFAR-10 binary version: data_batch_{1..5}.bin (train) and test_batch.bin
/// (eval). Each 3073-byte record is one label byte followed by 1024 R, 1024 G
/// and 1024 B bytes, each plane row-major 32x32.
Dataset load_cifar10(const std::filesystem::path& dir, const Normalization& norm = {});

/// One CIFAR-10 binary file, all records tagged with `split`.
Dataset load_cifar10_file(const std::filesystem::path& file, Split split,
                          const Normalization& norm = {});

/// Maps a normalized value back to its byte in [0, 255].
int denormalize_byte(float value, int channel, const Normalization& norm);

struct SyntheticSpec {
  std::uint64_t seed = 0;
  int num_classes = 10;
  int samples_per_class = 200;
  int image_size = 32;
  /// Fraction of each class held out for evaluation (last samples of the class).
  double eval_fraction = 0.2;
};

void to_json(nlohmann::json& j, const SyntheticSpec& spec);
void from_json(const nlohmann::json& j, SyntheticSpec& spec);

/// Deterministic class-conditioned textures: each class has its own background
/// colour, grating frequency and orientation, and blob position; samples jitter
/// these and add pixel noise.
Dataset make_synthetic(const SyntheticSpec& spec, const Normalization& norm = {});

struct SubTaskSplit {
  Dataset train;
  Dataset eval;
};

/// Restricts both splits to the sub-task's classes and relabels them by their
/// position in `task.classes`. Sample order is preserved.
SubTaskSplit build_subtask_split(const Dataset& dataset, const SubTask& task);

/// Restriction to the sub-task classes without touching the split tags.
Dataset filter_to_subtask(const Dataset& dataset, const SubTask& task);

/// A directory is read as CIFAR-10, a .json file as a SyntheticSpec.
Dataset load_dataset(const std::filesystem::path& source);

}  // namespace vitprune
