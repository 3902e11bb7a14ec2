#pragma once

// On-disk corpus: images/<stem>.ppm, labels/<stem>.pgm and a tab-separated
// index.txt listing the pairs relative to the corpus directory.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "hdca/synthdata.hpp"

namespace hdca {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kIndexFile = "index.txt";

void write_sample(const std::filesystem::path& image_path, const std::filesystem::path& label_path,
                  const SceneSample& sample);
SceneSample read_sample(const std::filesystem::path& image_path,
                        const std::filesystem::path& label_path);

struct IndexEntry {
  std::string image;
  std::string label;
};

/// Scans `dir`/images for .ppm files, pairs each with labels/<stem>.pgm and
/// writes the index in lexicographic order. Returns the entries written.
std::vector<IndexEntry> build_index(const std::filesystem::path& dir);
std::vector<IndexEntry> read_index(const std::filesystem::path& dir);

struct Dataset {
  std::filesystem::path root;
  std::vector<IndexEntry> entries;
  std::vector<SceneSample> samples;

  std::size_t size() const { return samples.size(); }
};

/// Loads every indexed pair, validating existence and image/label agreement.
Dataset load_dataset(const std::filesystem::path& dir);

/// Writes `count` generated scenes plus the index. Returns per-class pixel counts.
std::vector<std::size_t> generate_corpus(const std::filesystem::path& dir, const SceneSpec& spec,
                                         std::size_t count);

}  // namespace hdca
