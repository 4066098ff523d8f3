#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "retina/common.hpp"

namespace retina {

// Directory layout: <root>/{images,labels,fov}/<name>.png plus manifest.txt
// with one "name<TAB>split" line per image.
struct DatasetEntry {
  std::string name;
  std::string split;  // "train" | "test"
  std::string image_path;
  std::string label_path;
  std::string fov_path;  // empty when absent
};

struct DatasetIndex {
  std::string root;
  std::vector<DatasetEntry> entries;

  std::vector<const DatasetEntry*> split(const std::string& tag) const {
    std::vector<const DatasetEntry*> out;
    for (const auto& e : entries)
      if (tag == "all" || e.split == tag) out.push_back(&e);
    return out;
  }
};

inline DatasetIndex load_dataset(const std::string& root) {
  namespace fs = std::filesystem;
  DatasetIndex idx;
  idx.root = root;
  fs::path manifest = fs::path(root) / "manifest.txt";
  std::ifstream in(manifest);
  if (!in) fail("dataset: cannot open ", manifest.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      fail("dataset: ", manifest.string(), ":", lineno, ": expected name<TAB>split");
    DatasetEntry e;
    e.name = line.substr(0, tab);
    e.split = line.substr(tab + 1);
    if (e.split != "train" && e.split != "test")
      fail("dataset: ", manifest.string(), ":", lineno, ": unknown split '", e.split, "'");
    e.image_path = (fs::path(root) / "images" / (e.name + ".png")).string();
    e.label_path = (fs::path(root) / "labels" / (e.name + ".png")).string();
    fs::path fov = fs::path(root) / "fov" / (e.name + ".png");
    if (fs::exists(fov)) e.fov_path = fov.string();
    if (!fs::exists(e.image_path)) fail("dataset: missing image ", e.image_path);
    if (!fs::exists(e.label_path)) fail("dataset: missing label ", e.label_path);
    idx.entries.push_back(std::move(e));
  }
  if (idx.entries.empty()) fail("dataset: empty manifest ", manifest.string());
  return idx;
}

inline void write_manifest(const std::string& root, const std::vector<std::pair<std::string, std::string>>& rows) {
  namespace fs = std::filesystem;
  std::ofstream out(fs::path(root) / "manifest.txt");
  if (!out) fail("dataset: cannot write manifest under ", root);
  for (const auto& [name, split] : rows) out << name << '\t' << split << '\n';
}

}  // namespace retina
