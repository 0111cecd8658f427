#pragma once

// Procedural vision-language data. Images are 2x2 grids of cells, each cell
// empty or holding one shape (square, circle, cross) with a color (rendered
// as a gray level on single-channel images) and a size. Captions,
// descriptions and question/answer instructions are generated from the same
// spec, so every target is exact ground truth.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ovis/patch.hpp"
#include "ovis/rng.hpp"
#include "ovis/sequence.hpp"
#include "ovis/vocab.hpp"

namespace ovis {

enum class DataKind { caption, description, instruction };

inline std::string kind_name(DataKind k) {
  switch (k) {
    case DataKind::caption: return "caption";
    case DataKind::description: return "description";
    case DataKind::instruction: return "instruction";
  }
  return "?";
}

inline DataKind parse_kind(const std::string& s) {
  if (s == "caption") return DataKind::caption;
  if (s == "description") return DataKind::description;
  if (s == "instruction") return DataKind::instruction;
  throw Error("unknown record kind '" + s + "'");
}

inline constexpr std::array<const char*, 3> kShapes = {"square", "circle", "cross"};
inline constexpr std::array<const char*, 3> kShapePlurals = {"squares", "circles", "crosses"};
inline constexpr std::array<const char*, 3> kColors = {"red", "green", "blue"};
inline constexpr std::array<float, 3> kColorLevels = {1.0f, 0.7f, 0.4f};
inline constexpr std::array<const char*, 2> kSizes = {"small", "large"};
inline constexpr std::array<const char*, 4> kCells = {"top left", "top right", "bottom left",
                                                      "bottom right"};

struct ObjectSpec {
  int shape = 0;  // index into kShapes
  int color = 0;  // index into kColors
  int cell = 0;   // 0..3, row-major over the 2x2 grid
  int size = 1;   // 0 small, 1 large

  bool operator==(const ObjectSpec&) const = default;
};

// Procedural objects, or a raw pixel block when `raw` is set.
struct ImageSpec {
  int width = 32;
  int height = 32;
  int channels = 1;
  std::vector<ObjectSpec> objects;  // sorted by cell, at most one per cell
  std::optional<ImageTensor> raw;
};

struct DatasetRecord {
  DataKind kind = DataKind::caption;
  ImageSpec image;
  std::string prompt;
  std::string target;
};

// Side length in pixels of an object of the given size inside a cell.
inline int object_extent(int cell_side, int size) { return size == 1 ? cell_side * 3 / 4 : cell_side / 2; }

inline ImageTensor render(const ImageSpec& spec) {
  if (spec.raw) {
    ImageTensor img = *spec.raw;
    img.clamp();
    return img;
  }
  auto img = ImageTensor::blank(spec.channels, spec.width, spec.height);
  const int cw = spec.width / 2, ch = spec.height / 2;
  for (const auto& o : spec.objects) {
    const int side = object_extent(std::min(cw, ch), o.size);
    const int x0 = (o.cell % 2) * cw + (cw - side) / 2;
    const int y0 = (o.cell / 2) * ch + (ch - side) / 2;
    const float level = kColorLevels.at(static_cast<std::size_t>(o.color));
    const double c = (side - 1) / 2.0;
    const int bar = std::max(1, side / 4);
    for (int dy = 0; dy < side; ++dy) {
      for (int dx = 0; dx < side; ++dx) {
        bool on = false;
        switch (o.shape) {
          case 0: on = true; break;
          case 1: on = (dx - c) * (dx - c) + (dy - c) * (dy - c) <= (side / 2.0) * (side / 2.0); break;
          case 2: {
            const int lo = (side - bar) / 2;
            on = (dx >= lo && dx < lo + bar) || (dy >= lo && dy < lo + bar);
            break;
          }
          default: throw Error("unknown shape index");
        }
        if (!on) continue;
        // The same level on every channel.
        for (int k = 0; k < spec.channels; ++k) img.at(k, y0 + dy, x0 + dx) = level;
      }
    }
  }
  return img;
}

// ----------------------------- text grammar -----------------------------

inline std::string object_phrase(const ObjectSpec& o) {
  return std::string(kColors[o.color]) + " " + kShapes[o.shape] + " " + kCells[o.cell];
}

inline std::string caption_text(const ImageSpec& spec) {
  std::string out;
  for (const auto& o : spec.objects) {
    if (!out.empty()) out += " and ";
    out += object_phrase(o);
  }
  return out;
}

inline std::string description_text(const ImageSpec& spec) {
  std::ostringstream os;
  const auto n = spec.objects.size();
  os << "there " << (n == 1 ? "is" : "are") << ' ' << n << ' ' << (n == 1 ? "object" : "objects")
     << " .";
  for (const auto& o : spec.objects) {
    os << " a " << kSizes[o.size] << ' ' << kColors[o.color] << ' ' << kShapes[o.shape] << " in the "
       << kCells[o.cell] << " .";
  }
  return os.str();
}

inline constexpr std::string_view kDescribePrompt = "<image> describe the image .";

struct QuestionAnswer {
  std::string question;
  std::string answer;
};

inline const ObjectSpec* object_at(const ImageSpec& spec, int cell) {
  for (const auto& o : spec.objects)
    if (o.cell == cell) return &o;
  return nullptr;
}

inline int count_shape(const ImageSpec& spec, int shape) {
  return static_cast<int>(std::count_if(spec.objects.begin(), spec.objects.end(),
                                        [&](const ObjectSpec& o) { return o.shape == shape; }));
}

// Question types: 0 count, 1 color at cell, 2 shape at cell, 3 location of a
// uniquely described object.
inline QuestionAnswer make_question(const ImageSpec& spec, Rng& rng) {
  for (;;) {
    const int type = rng.uniform_int(0, 3);
    if (type == 0) {
      const int shape = rng.uniform_int(0, 2);
      return {std::string("how many ") + kShapePlurals[shape] + " ?",
              std::to_string(count_shape(spec, shape))};
    }
    if (type == 1 || type == 2) {
      const int cell = rng.uniform_int(0, 3);
      const ObjectSpec* o = object_at(spec, cell);
      if (type == 1) {
        return {std::string("what color is the object in the ") + kCells[cell] + " ?",
                o ? kColors[o->color] : "nothing"};
      }
      return {std::string("what shape is in the ") + kCells[cell] + " ?",
              o ? kShapes[o->shape] : "nothing"};
    }
    const auto& o = spec.objects[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<int>(spec.objects.size()) - 1))];
    const auto same = std::count_if(spec.objects.begin(), spec.objects.end(), [&](const ObjectSpec& p) {
      return p.shape == o.shape && p.color == o.color;
    });
    if (same != 1) continue;
    return {std::string("where is the ") + kColors[o.color] + " " + kShapes[o.shape] + " ?",
            kCells[o.cell]};
  }
}

inline ImageSpec random_image(Rng& rng, int min_objects, int max_objects) {
  ImageSpec spec;
  const int n = rng.uniform_int(min_objects, max_objects);
  std::array<int, 4> cells = {0, 1, 2, 3};
  std::shuffle(cells.begin(), cells.end(), rng.engine());
  for (int i = 0; i < n; ++i) {
    ObjectSpec o;
    o.cell = cells[static_cast<std::size_t>(i)];
    o.shape = rng.uniform_int(0, 2);
    o.color = rng.uniform_int(0, 2);
    o.size = rng.uniform_int(0, 1);
    spec.objects.push_back(o);
  }
  std::sort(spec.objects.begin(), spec.objects.end(),
            [](const ObjectSpec& a, const ObjectSpec& b) { return a.cell < b.cell; });
  return spec;
}

// Record `index` of the given kind; depends only on (seed, stream, index).
inline DatasetRecord make_record(std::uint64_t seed, DataKind kind, std::uint64_t index,
                                 std::string_view stream) {
  Rng rng(seed, std::string(stream) + "." + kind_name(kind), index);
  DatasetRecord r;
  r.kind = kind;
  switch (kind) {
    case DataKind::caption:
      r.image = random_image(rng, 1, 2);
      r.prompt = std::string(kCaptionTemplate);
      r.target = caption_text(r.image);
      break;
    case DataKind::description:
      r.image = random_image(rng, 1, 3);
      r.prompt = std::string(kDescribePrompt);
      r.target = description_text(r.image);
      break;
    case DataKind::instruction: {
      r.image = random_image(rng, 1, 4);
      auto qa = make_question(r.image, rng);
      r.prompt = "<image> " + qa.question;
      r.target = qa.answer;
      break;
    }
  }
  return r;
}

// ----------------------------- serialization -----------------------------

inline nlohmann::json to_json(const DatasetRecord& r) {
  nlohmann::json image;
  image["width"] = r.image.width;
  image["height"] = r.image.height;
  image["channels"] = r.image.channels;
  if (r.image.raw) {
    image["pixels"] = r.image.raw->pixels;
  } else {
    auto objects = nlohmann::json::array();
    for (const auto& o : r.image.objects) {
      objects.push_back({{"shape", kShapes[o.shape]},
                         {"color", kColors[o.color]},
                         {"cell", kCells[o.cell]},
                         {"size", kSizes[o.size]}});
    }
    image["objects"] = objects;
  }
  return {{"kind", kind_name(r.kind)}, {"image", image}, {"prompt", r.prompt}, {"target", r.target}};
}

template <std::size_t N>
int index_of(const std::array<const char*, N>& names, const std::string& s, const char* what) {
  for (std::size_t i = 0; i < N; ++i)
    if (s == names[i]) return static_cast<int>(i);
  throw Error(std::string("unknown ") + what + " '" + s + "'");
}

inline DatasetRecord record_from_json(const nlohmann::json& j) {
  DatasetRecord r;
  r.kind = parse_kind(j.at("kind").get<std::string>());
  const auto& image = j.at("image");
  r.image.width = image.at("width").get<int>();
  r.image.height = image.at("height").get<int>();
  r.image.channels = image.at("channels").get<int>();
  if (image.contains("pixels")) {
    auto img = ImageTensor::blank(r.image.channels, r.image.width, r.image.height);
    img.pixels = image.at("pixels").get<std::vector<float>>();
    if (img.pixels.size() != static_cast<std::size_t>(img.channels) * img.width * img.height) {
      throw Error("raw pixel block has the wrong size");
    }
    r.image.raw = std::move(img);
  } else {
    for (const auto& o : image.at("objects")) {
      r.image.objects.push_back({index_of(kShapes, o.at("shape").get<std::string>(), "shape"),
                                 index_of(kColors, o.at("color").get<std::string>(), "color"),
                                 index_of(kCells, o.at("cell").get<std::string>(), "cell"),
                                 index_of(kSizes, o.at("size").get<std::string>(), "size")});
    }
  }
  r.prompt = j.at("prompt").get<std::string>();
  r.target = j.at("target").get<std::string>();
  if (r.target.empty()) throw Error("record has an empty target");
  return r;
}

inline std::string dataset_file_name(DataKind kind) { return kind_name(kind) + ".jsonl"; }
inline constexpr const char* kHeldoutFile = "heldout.jsonl";

inline void write_records(const std::filesystem::path& path, const std::vector<DatasetRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& r : records) out << to_json(r).dump() << '\n';
  if (!out) throw Error("write failed for " + path.string());
}

inline std::vector<DatasetRecord> read_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read dataset file " + path.string());
  std::vector<DatasetRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

struct DataCounts {
  std::size_t captions = 0;
  std::size_t descriptions = 0;
  std::size_t instructions = 0;
  std::size_t heldout = 256;
};

// Writes caption.jsonl, description.jsonl, instruction.jsonl and
// heldout.jsonl (instruction records from an independent stream).
inline void gen_data(std::uint64_t seed, const DataCounts& counts, const std::filesystem::path& dir) {
  if (counts.captions == 0 || counts.descriptions == 0 || counts.instructions == 0 || counts.heldout == 0) {
    throw Error("gen-data: every record count must be at least 1");
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
  auto emit = [&](DataKind kind, std::size_t n, std::string_view stream, const std::filesystem::path& file) {
    std::vector<DatasetRecord> records;
    records.reserve(n);
    for (std::size_t i = 0; i < n; ++i) records.push_back(make_record(seed, kind, i, stream));
    write_records(file, records);
  };
  emit(DataKind::caption, counts.captions, "train", dir / dataset_file_name(DataKind::caption));
  emit(DataKind::description, counts.descriptions, "train", dir / dataset_file_name(DataKind::description));
  emit(DataKind::instruction, counts.instructions, "train", dir / dataset_file_name(DataKind::instruction));
  emit(DataKind::instruction, counts.heldout, "heldout", dir / kHeldoutFile);
}

inline MultimodalSample to_sample(const DatasetRecord& r, const Vocabulary& vocab) {
  MultimodalSample s;
  s.prompt = vocab.encode(r.prompt);
  s.target = vocab.encode(r.target);
  s.target.push_back(vocab.special().eos);
  if (std::find(s.prompt.begin(), s.prompt.end(), vocab.special().image) != s.prompt.end()) {
    s.image = render(r.image);
  }
  return s;
}

}  // namespace ovis
