#include "hdca/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "hdca/netpbm.hpp"

namespace fs = std::filesystem;

namespace hdca {

void write_sample(const fs::path& image_path, const fs::path& label_path, const SceneSample& sample) {
  if (sample.image.rank() != 3 || sample.image.dim(1) != sample.labels.height ||
      sample.image.dim(2) != sample.labels.width) {
    throw ShapeError("write_sample: image " + to_string(sample.image.shape()) +
                     " does not match label map " + std::to_string(sample.labels.height) + "x" +
                     std::to_string(sample.labels.width));
  }
  write_ppm(image_path, sample.image);
  write_pgm(label_path, sample.labels);
}

SceneSample read_sample(const fs::path& image_path, const fs::path& label_path) {
  for (const auto& p : {image_path, label_path}) {
    if (!fs::is_regular_file(p)) throw DatasetError("missing file: " + p.string());
  }
  SceneSample s;
  s.image = read_ppm(image_path);
  s.labels = read_pgm(label_path);
  if (s.image.dim(1) != s.labels.height || s.image.dim(2) != s.labels.width) {
    throw DatasetError("shape mismatch: " + image_path.string() + " is " +
                       std::to_string(s.image.dim(1)) + "x" + std::to_string(s.image.dim(2)) +
                       " but " + label_path.string() + " is " + std::to_string(s.labels.height) +
                       "x" + std::to_string(s.labels.width));
  }
  return s;
}

namespace {

void write_index(const fs::path& dir, const std::vector<IndexEntry>& entries) {
  std::ofstream out(dir / kIndexFile, std::ios::trunc);
  if (!out) throw DatasetError("cannot write " + (dir / kIndexFile).string());
  for (const auto& e : entries) out << e.image << '\t' << e.label << '\n';
}

}  // namespace

std::vector<IndexEntry> build_index(const fs::path& dir) {
  std::vector<IndexEntry> entries;
  const fs::path images = dir / "images";
  if (fs::is_directory(images)) {
    for (const auto& item : fs::directory_iterator(images)) {
      if (!item.is_regular_file() || item.path().extension() != ".ppm") continue;
      const std::string stem = item.path().stem().string();
      const fs::path label = dir / "labels" / (stem + ".pgm");
      if (!fs::is_regular_file(label)) {
        throw DatasetError("missing file: " + label.string() + " (label for " + item.path().string() + ")");
      }
      entries.push_back({"images/" + stem + ".ppm", "labels/" + stem + ".pgm"});
    }
  }
  std::sort(entries.begin(), entries.end(),
            [](const IndexEntry& a, const IndexEntry& b) { return a.image < b.image; });
  write_index(dir, entries);
  return entries;
}

std::vector<IndexEntry> read_index(const fs::path& dir) {
  const fs::path path = dir / kIndexFile;
  std::ifstream in(path);
  if (!in) throw DatasetError("missing file: " + path.string());
  std::vector<IndexEntry> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw DatasetError(path.string() + ":" + std::to_string(line_no) +
                         ": expected \"image<TAB>label\"");
    }
    entries.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  return entries;
}

Dataset load_dataset(const fs::path& dir) {
  Dataset ds;
  ds.root = dir;
  ds.entries = read_index(dir);
  if (ds.entries.empty()) throw DatasetError("empty dataset: " + (dir / kIndexFile).string());
  ds.samples.reserve(ds.entries.size());
  for (const auto& e : ds.entries) ds.samples.push_back(read_sample(dir / e.image, dir / e.label));
  return ds;
}

std::vector<std::size_t> generate_corpus(const fs::path& dir, const SceneSpec& spec, std::size_t count) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (!ec) fs::create_directories(dir / "labels", ec);
  if (ec) throw DatasetError("cannot create corpus directory " + dir.string() + ": " + ec.message());
  std::vector<std::size_t> histogram(static_cast<std::size_t>(spec.classes), 0);
  std::vector<IndexEntry> entries;
  for (std::size_t i = 0; i < count; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "%06zu", i);
    const SceneSample s = generate_scene(spec, i);
    entries.push_back({"images/" + std::string(stem) + ".ppm", "labels/" + std::string(stem) + ".pgm"});
    write_sample(dir / entries.back().image, dir / entries.back().label, s);
    for (auto v : s.labels.values) {
      if (v < histogram.size()) ++histogram[v];
    }
  }
  // Only this run's samples are indexed, so stale files cannot leak in.
  write_index(dir, entries);
  return histogram;
}

}  // namespace hdca
