#include "vitprune/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>

#include <nlohmann/json.hpp>

#include "random.hpp"
#include "vitprune/errors.hpp"

namespace vitprune {

namespace fs = std::filesystem;

void to_json(nlohmann::json& j, const Normalization& n) {
  j = nlohmann::json{{"mean", n.mean}, {"std", n.std}};
}

Tensor Dataset::images(const std::vector<std::size_t>& ids) const {
  const std::size_t S = image_size, stride = image_elems();
  std::vector<float> data(ids.size() * stride);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= size()) throw ArgumentError("sample id out of range");
    std::copy_n(pixels.data() + ids[i] * stride, stride, data.data() + i * stride);
  }
  return Tensor({ids.size(), 3, S, S}, std::move(data));
}

Tensor Dataset::all_images() const {
  const std::size_t S = image_size;
  return Tensor({size(), 3, S, S}, pixels);
}

std::vector<std::size_t> Dataset::indices(Split which) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < size(); ++i) {
    if (splits[i] == which) out.push_back(i);
  }
  return out;
}

Dataset Dataset::subset(const std::vector<std::size_t>& ids) const {
  Dataset out;
  out.image_size = image_size;
  out.class_ids = class_ids;
  out.class_names = class_names;
  out.normalization = normalization;
  const std::size_t stride = image_elems();
  out.pixels.reserve(ids.size() * stride);
  for (std::size_t id : ids) {
    out.pixels.insert(out.pixels.end(), pixels.begin() + id * stride,
                      pixels.begin() + (id + 1) * stride);
    out.labels.push_back(labels[id]);
    out.splits.push_back(splits[id]);
  }
  return out;
}

Dataset Dataset::split(Split which) const { return subset(indices(which)); }

int SubTask::label_of(int class_id) const {
  const auto it = std::find(classes.begin(), classes.end(), class_id);
  if (it == classes.end()) {
    throw ArgumentError("class " + std::to_string(class_id) + " is not part of the sub-task");
  }
  return static_cast<int>(it - classes.begin());
}

void to_json(nlohmann::json& j, const SubTask& task) {
  j = nlohmann::json{{"classes", task.classes}};
  if (!task.id.empty()) j["id"] = task.id;
}

void from_json(const nlohmann::json& j, SubTask& task) {
  task.classes = j.at("classes").get<std::vector<int>>();
  task.id = j.value("id", "");
  if (task.classes.empty()) throw ArgumentError("sub-task has no classes");
  if (std::set<int>(task.classes.begin(), task.classes.end()).size() != task.classes.size()) {
    throw ArgumentError("sub-task lists a class more than once");
  }
}

SubTask load_subtask(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open sub-task file " + path.string());
  SubTask task = nlohmann::json::parse(in).get<SubTask>();
  if (task.id.empty()) task.id = path.stem().string();
  return task;
}

void save_subtask(const SubTask& task, const fs::path& path) {
  std::ofstream out(path);
  out << nlohmann::json(task).dump(2) << '\n';
}

namespace {

constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
constexpr std::size_t kCifarRecord = 1 + kCifarPixels;

const std::vector<std::string> kCifarNames = {"airplane", "automobile", "bird", "cat",
                                              "deer",     "dog",        "frog", "horse",
                                              "ship",     "truck"};

void append_cifar_file(Dataset& ds, const fs::path& file, Split split) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("cannot open CIFAR-10 file " + file.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                         std::istreambuf_iterator<char>());
  if (bytes.size() % kCifarRecord != 0) {
    const std::size_t offset = bytes.size() / kCifarRecord * kCifarRecord;
    throw FormatError(file.string() + ": length " + std::to_string(bytes.size()) +
                      " is not a multiple of " + std::to_string(kCifarRecord) +
                      "; truncated record at byte offset " + std::to_string(offset));
  }
  const Normalization& norm = ds.normalization;
  const std::size_t records = bytes.size() / kCifarRecord;
  ds.pixels.reserve(ds.pixels.size() + records * kCifarPixels);
  for (std::size_t r = 0; r < records; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecord;
    if (rec[0] >= 10) {
      throw FormatError(file.string() + ": label " + std::to_string(rec[0]) +
                        " out of range at byte offset " + std::to_string(r * kCifarRecord));
    }
    ds.labels.push_back(rec[0]);
    ds.splits.push_back(split);
    for (std::size_t i = 0; i < kCifarPixels; ++i) {
      const std::size_t c = i / (kCifarSide * kCifarSide);
      const float x = static_cast<float>(rec[1 + i]) / 255.0f;
      ds.pixels.push_back((x - norm.mean[c]) / norm.std[c]);
    }
  }
}

Dataset empty_cifar(const Normalization& norm) {
  Dataset ds;
  ds.image_size = kCifarSide;
  ds.normalization = norm;
  for (int c = 0; c < 10; ++c) ds.class_ids.push_back(c);
  ds.class_names = kCifarNames;
  return ds;
}

}  // namespace

Dataset load_cifar10_file(const fs::path& file, Split split, const Normalization& norm) {
  Dataset ds = empty_cifar(norm);
  append_cifar_file(ds, file, split);
  return ds;
}

Dataset load_cifar10(const fs::path& dir, const Normalization& norm) {
  Dataset ds = empty_cifar(norm);
  for (int i = 1; i <= 5; ++i) {
    append_cifar_file(ds, dir / ("data_batch_" + std::to_string(i) + ".bin"), Split::kTrain);
  }
  append_cifar_file(ds, dir / "test_batch.bin", Split::kEval);
  return ds;
}

int denormalize_byte(float value, int channel, const Normalization& norm) {
  const double x = static_cast<double>(value) * norm.std[channel] + norm.mean[channel];
  return static_cast<int>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0));
}

void to_json(nlohmann::json& j, const SyntheticSpec& spec) {
  j = nlohmann::json{{"seed", spec.seed},
                     {"num_classes", spec.num_classes},
                     {"samples_per_class", spec.samples_per_class},
                     {"image_size", spec.image_size},
                     {"eval_fraction", spec.eval_fraction}};
}

void from_json(const nlohmann::json& j, SyntheticSpec& spec) {
  SyntheticSpec d;
  spec.seed = j.value("seed", d.seed);
  spec.num_classes = j.value("num_classes", d.num_classes);
  spec.samples_per_class = j.value("samples_per_class", d.samples_per_class);
  spec.image_size = j.value("image_size", d.image_size);
  spec.eval_fraction = j.value("eval_fraction", d.eval_fraction);
}

namespace {

struct ClassStyle {
  std::array<double, 3> colour;
  std::array<double, 3> tint;
  double frequency;   // cycles per image
  double angle;       // grating orientation
  double blob_x, blob_y;
};

}  // namespace

Dataset make_synthetic(const SyntheticSpec& spec, const Normalization& norm) {
  if (spec.num_classes < 1 || spec.samples_per_class < 0 || spec.image_size < 1 ||
      spec.eval_fraction < 0.0 || spec.eval_fraction >= 1.0) {
    throw ArgumentError("invalid synthetic spec");
  }
  Dataset ds;
  ds.image_size = spec.image_size;
  ds.normalization = norm;
  const std::size_t S = spec.image_size;
  const std::size_t plane = S * S;

  detail::Rng style_rng(spec.seed * 0x9E3779B97F4A7C15ULL + 17);
  std::vector<ClassStyle> styles(spec.num_classes);
  for (int c = 0; c < spec.num_classes; ++c) {
    ds.class_ids.push_back(c);
    ds.class_names.push_back("synthetic_" + std::to_string(c));
    ClassStyle& st = styles[c];
    for (auto& x : st.colour) x = style_rng.uniform(0.3, 0.7);
    for (auto& x : st.tint) x = style_rng.uniform(-1.0, 1.0);
    st.frequency = 2.0 + static_cast<double>(style_rng.below(4));
    st.angle = style_rng.uniform(0.0, M_PI);
    st.blob_x = style_rng.uniform(0.25, 0.75) * static_cast<double>(S);
    st.blob_y = style_rng.uniform(0.25, 0.75) * static_cast<double>(S);
  }

  detail::Rng rng(spec.seed);
  const int eval_count =
      static_cast<int>(std::lround(spec.eval_fraction * spec.samples_per_class));
  ds.pixels.reserve(static_cast<std::size_t>(spec.num_classes) * spec.samples_per_class *
                    3 * plane);
  std::vector<double> img(3 * plane);
  for (int c = 0; c < spec.num_classes; ++c) {
    const ClassStyle& st = styles[c];
    for (int s = 0; s < spec.samples_per_class; ++s) {
      std::array<double, 3> colour;
      for (int ch = 0; ch < 3; ++ch) colour[ch] = st.colour[ch] + 0.08 * rng.normal();
      const double phase = rng.uniform(0.0, 2.0 * M_PI);
      const double angle = st.angle + 0.15 * rng.normal();
      const double freq = st.frequency * (1.0 + 0.08 * rng.normal());
      const double bx = st.blob_x + 2.5 * rng.normal();
      const double by = st.blob_y + 2.5 * rng.normal();
      const double amp = 0.18 * (1.0 + 0.2 * rng.normal());
      const double kx = std::cos(angle) * freq * 2.0 * M_PI / static_cast<double>(S);
      const double ky = std::sin(angle) * freq * 2.0 * M_PI / static_cast<double>(S);
      const double radius2 = std::pow(0.12 * static_cast<double>(S), 2);
      for (std::size_t y = 0; y < S; ++y) {
        for (std::size_t x = 0; x < S; ++x) {
          const double wave = std::sin(kx * x + ky * y + phase);
          const double dx = x - bx, dy = y - by;
          const double blob = std::exp(-(dx * dx + dy * dy) / (2.0 * radius2));
          for (int ch = 0; ch < 3; ++ch) {
            double v = colour[ch] + amp * wave * st.tint[ch] +
                       0.25 * blob * (ch == c % 3 ? 1.0 : -0.5) + 0.1 * rng.normal();
            img[ch * plane + y * S + x] = std::clamp(v, 0.0, 1.0);
          }
        }
      }
      for (std::size_t i = 0; i < img.size(); ++i) {
        const std::size_t ch = i / plane;
        ds.pixels.push_back(static_cast<float>((img[i] - norm.mean[ch]) / norm.std[ch]));
      }
      ds.labels.push_back(c);
      ds.splits.push_back(s >= spec.samples_per_class - eval_count ? Split::kEval
                                                                   : Split::kTrain);
    }
  }
  return ds;
}

Dataset filter_to_subtask(const Dataset& dataset, const SubTask& task) {
  if (task.classes.empty()) throw ArgumentError("sub-task has no classes");
  for (int c : task.classes) {
    if (std::find(dataset.class_ids.begin(), dataset.class_ids.end(), c) ==
        dataset.class_ids.end()) {
      throw ArgumentError("class " + std::to_string(c) + " is absent from the dataset");
    }
  }
  std::vector<std::size_t> keep;
  std::vector<int> new_labels;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const int original = dataset.class_ids[dataset.labels[i]];
    const auto it = std::find(task.classes.begin(), task.classes.end(), original);
    if (it != task.classes.end()) {
      keep.push_back(i);
      new_labels.push_back(static_cast<int>(it - task.classes.begin()));
    }
  }
  Dataset out = dataset.subset(keep);
  out.labels = std::move(new_labels);
  out.class_ids = task.classes;
  out.class_names.clear();
  for (int c : task.classes) {
    const auto pos = std::find(dataset.class_ids.begin(), dataset.class_ids.end(), c) -
                     dataset.class_ids.begin();
    out.class_names.push_back(static_cast<std::size_t>(pos) < dataset.class_names.size()
                                  ? dataset.class_names[pos]
                                  : std::to_string(c));
  }
  return out;
}

SubTaskSplit build_subtask_split(const Dataset& dataset, const SubTask& task) {
  const Dataset filtered = filter_to_subtask(dataset, task);
  return {filtered.split(Split::kTrain), filtered.split(Split::kEval)};
}

Dataset load_dataset(const fs::path& source) {
  if (fs::is_directory(source)) return load_cifar10(source);
  std::ifstream in(source);
  if (!in) throw ArgumentError("cannot open dataset source " + source.string());
  return make_synthetic(nlohmann::json::parse(in).get<SyntheticSpec>());
}

}  // namespace vitprune
