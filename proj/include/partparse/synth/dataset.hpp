#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "partparse/synth/scene.hpp"

namespace partparse::synth {

// PPM (P6, 8-bit) image io. Values are clamped to [0,1] and quantized.
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);

// Label sidecar (JSON; masks run-length encoded over the row-major flat index).
void write_labels(const std::filesystem::path& path, const LabeledScene& scene);
void read_labels(const std::filesystem::path& path, LabeledScene& scene);

struct ManifestEntry {
    std::string split;
    std::string image_file;   // relative to the manifest directory
    std::string label_file;
    StyleId style = StyleId::natural;
    std::uint64_t seed = 0;
    int num_persons = 0;
};

struct SplitConfig {
    std::string name;
    int size = 0;
    std::vector<StyleId> styles;
    int persons_min = 1;
    int persons_max = 3;
};

struct DatasetConfig {
    int image_size = 128;
    std::uint64_t seed_base = 1000;
    std::vector<SplitConfig> splits;
};

DatasetConfig load_dataset_config(const std::filesystem::path& path);

// Generates all scenes and writes them plus manifest.jsonl under out_dir.
// Refuses to overwrite an existing manifest unless force is set.
std::filesystem::path make_dataset(const DatasetConfig& config,
                                   const std::filesystem::path& out_dir, bool force = false);

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest_path);

// Entries of one split (all entries when split is empty).
std::vector<ManifestEntry> filter_split(const std::vector<ManifestEntry>& entries,
                                        const std::string& split);

LabeledScene load_scene(const std::filesystem::path& manifest_dir, const ManifestEntry& entry);

}  // namespace partparse::synth
