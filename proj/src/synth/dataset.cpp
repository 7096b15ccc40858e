#include "partparse/synth/dataset.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>

namespace partparse::synth {

using nlohmann::json;
namespace fs = std::filesystem;

void write_ppm(const fs::path& path, const Tensor& image) {
    PP_CHECK(image.rank() == 3 && image.dim(0) == 3, "write_ppm: image must be [3,H,W]");
    int h = image.dim(1), w = image.dim(2);
    std::ofstream f(path, std::ios::binary);
    PP_CHECK(f.good(), "write_ppm: cannot open " + path.string());
    f << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> buf(static_cast<size_t>(h) * w * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                real v = image[(static_cast<long>(c) * h + y) * w + x];
                v = std::clamp(v, real(0), real(1));
                buf[(static_cast<size_t>(y) * w + x) * 3 + c] =
                    static_cast<unsigned char>(std::lround(v * 255));
            }
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    PP_CHECK(f.good(), "write_ppm: write failed for " + path.string());
}

Tensor read_ppm(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    PP_CHECK(f.good(), "read_ppm: cannot open " + path.string());
    std::string magic;
    f >> magic;
    PP_CHECK(magic == "P6", "read_ppm: not a P6 file: " + path.string());
    int w = 0, h = 0, maxval = 0;
    f >> w >> h >> maxval;
    PP_CHECK(w > 0 && h > 0 && maxval == 255, "read_ppm: unsupported header");
    f.get();  // single whitespace after header
    std::vector<unsigned char> buf(static_cast<size_t>(h) * w * 3);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    PP_CHECK(f.gcount() == static_cast<std::streamsize>(buf.size()), "read_ppm: truncated file");
    Tensor image({3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                image[(static_cast<long>(c) * h + y) * w + x] =
                    buf[(static_cast<size_t>(y) * w + x) * 3 + c] / real(255);
    return image;
}

namespace {

json rle_encode(const Mask& m) {
    json runs = json::array();
    long n = static_cast<long>(m.data.size());
    long i = 0;
    while (i < n) {
        if (!m.data[static_cast<size_t>(i)]) {
            ++i;
            continue;
        }
        long start = i;
        while (i < n && m.data[static_cast<size_t>(i)]) ++i;
        runs.push_back(json::array({start, i - start}));
    }
    return runs;
}

Mask rle_decode(const json& runs, int h, int w) {
    Mask m(h, w);
    for (const auto& run : runs) {
        long start = run.at(0).get<long>();
        long len = run.at(1).get<long>();
        PP_CHECK(start >= 0 && len > 0 && start + len <= static_cast<long>(m.data.size()),
                 "rle_decode: run out of bounds");
        for (long i = start; i < start + len; ++i) m.data[static_cast<size_t>(i)] = 1;
    }
    return m;
}

}  // namespace

void write_labels(const fs::path& path, const LabeledScene& scene) {
    json doc;
    doc["format_version"] = 1;
    doc["image_size"] = {scene.height(), scene.width()};
    doc["style"] = style_name(scene.style);
    doc["scene_seed"] = scene.scene_seed;
    json instances = json::array();
    for (const auto& inst : scene.instances) {
        json ji;
        ji["box"] = {inst.box.cx, inst.box.cy, inst.box.w, inst.box.h};
        json presence = json::array();
        json masks = json::array();
        for (int c = 0; c < kNumParts; ++c) {
            presence.push_back(static_cast<bool>(inst.part_presence[static_cast<size_t>(c)]));
            masks.push_back(rle_encode(inst.part_masks[static_cast<size_t>(c)]));
        }
        ji["part_presence"] = presence;
        ji["part_masks_rle"] = masks;
        instances.push_back(std::move(ji));
    }
    doc["instances"] = std::move(instances);
    std::ofstream f(path);
    PP_CHECK(f.good(), "write_labels: cannot open " + path.string());
    f << doc.dump() << "\n";
    PP_CHECK(f.good(), "write_labels: write failed");
}

void read_labels(const fs::path& path, LabeledScene& scene) {
    std::ifstream f(path);
    PP_CHECK(f.good(), "read_labels: cannot open " + path.string());
    json doc = json::parse(f);
    PP_CHECK(doc.at("format_version").get<int>() == 1, "read_labels: unsupported version");
    int h = doc.at("image_size").at(0).get<int>();
    int w = doc.at("image_size").at(1).get<int>();
    scene.style = style_from_name(doc.at("style").get<std::string>());
    scene.scene_seed = doc.at("scene_seed").get<std::uint64_t>();
    scene.instances.clear();
    for (const auto& ji : doc.at("instances")) {
        Instance inst;
        inst.box.cx = ji.at("box").at(0).get<real>();
        inst.box.cy = ji.at("box").at(1).get<real>();
        inst.box.w = ji.at("box").at(2).get<real>();
        inst.box.h = ji.at("box").at(3).get<real>();
        for (int c = 0; c < kNumParts; ++c) {
            inst.part_presence[static_cast<size_t>(c)] =
                ji.at("part_presence").at(static_cast<size_t>(c)).get<bool>();
            inst.part_masks[static_cast<size_t>(c)] =
                rle_decode(ji.at("part_masks_rle").at(static_cast<size_t>(c)), h, w);
        }
        scene.instances.push_back(std::move(inst));
    }
}

DatasetConfig load_dataset_config(const fs::path& path) {
    std::ifstream f(path);
    PP_CHECK(f.good(), "load_dataset_config: cannot open " + path.string());
    json doc = json::parse(f);
    DatasetConfig cfg;
    cfg.image_size = doc.value("image_size", 128);
    cfg.seed_base = doc.value("seed_base", std::uint64_t(1000));
    for (const auto& js : doc.at("splits")) {
        SplitConfig sc;
        sc.name = js.at("name").get<std::string>();
        sc.size = js.at("size").get<int>();
        for (const auto& s : js.at("styles"))
            sc.styles.push_back(style_from_name(s.get<std::string>()));
        if (js.contains("persons")) {
            sc.persons_min = js.at("persons").at(0).get<int>();
            sc.persons_max = js.at("persons").at(1).get<int>();
        }
        cfg.splits.push_back(std::move(sc));
    }
    return cfg;
}

fs::path make_dataset(const DatasetConfig& config, const fs::path& out_dir, bool force) {
    PP_CHECK(!config.splits.empty(), "make_dataset: no splits configured");
    for (const auto& sc : config.splits) {
        PP_CHECK(sc.size > 0, "make_dataset: split '" + sc.name + "' is empty");
        PP_CHECK(!sc.styles.empty(), "make_dataset: split '" + sc.name + "' has no styles");
        PP_CHECK(sc.persons_min >= 1 && sc.persons_max <= 4 && sc.persons_min <= sc.persons_max,
                 "make_dataset: persons range must lie in 1..4");
    }
    fs::path manifest_path = out_dir / "manifest.jsonl";
    PP_CHECK(force || !fs::exists(manifest_path),
             "make_dataset: manifest already exists (use force to overwrite): " +
                 manifest_path.string());
    fs::create_directories(out_dir);

    std::ostringstream manifest;
    std::uint64_t index = 0;
    for (const auto& sc : config.splits) {
        fs::create_directories(out_dir / sc.name);
        for (int i = 0; i < sc.size; ++i, ++index) {
            std::uint64_t seed = config.seed_base + index;
            StyleId style = sc.styles[static_cast<size_t>(i) % sc.styles.size()];
            Rng rng(mix_seed(seed, 0x9e05));
            int persons = sc.persons_min +
                          static_cast<int>(rng.next_index(
                              static_cast<std::uint64_t>(sc.persons_max - sc.persons_min + 1)));
            LabeledScene scene = generate_scene(persons, style, seed, config.image_size);
            char name[64];
            std::snprintf(name, sizeof name, "scene_%05llu",
                          static_cast<unsigned long long>(index));
            fs::path img_rel = fs::path(sc.name) / (std::string(name) + ".ppm");
            fs::path lab_rel = fs::path(sc.name) / (std::string(name) + ".json");
            write_ppm(out_dir / img_rel, scene.image);
            write_labels(out_dir / lab_rel, scene);

            json rec;
            rec["split"] = sc.name;
            rec["image"] = img_rel.generic_string();
            rec["label"] = lab_rel.generic_string();
            rec["style"] = style_name(style);
            rec["seed"] = seed;
            rec["num_persons"] = persons;
            manifest << rec.dump() << "\n";
        }
    }
    std::ofstream mf(manifest_path, std::ios::binary);
    PP_CHECK(mf.good(), "make_dataset: cannot open manifest for writing");
    mf << manifest.str();
    PP_CHECK(mf.good(), "make_dataset: manifest write failed");
    return manifest_path;
}

std::vector<ManifestEntry> read_manifest(const fs::path& manifest_path) {
    std::ifstream f(manifest_path);
    PP_CHECK(f.good(), "read_manifest: cannot open " + manifest_path.string());
    std::vector<ManifestEntry> entries;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json rec = json::parse(line);
        ManifestEntry e;
        e.split = rec.at("split").get<std::string>();
        e.image_file = rec.at("image").get<std::string>();
        e.label_file = rec.at("label").get<std::string>();
        e.style = style_from_name(rec.at("style").get<std::string>());
        e.seed = rec.at("seed").get<std::uint64_t>();
        e.num_persons = rec.at("num_persons").get<int>();
        entries.push_back(std::move(e));
    }
    return entries;
}

std::vector<ManifestEntry> filter_split(const std::vector<ManifestEntry>& entries,
                                        const std::string& split) {
    if (split.empty()) return entries;
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
        if (e.split == split) out.push_back(e);
    return out;
}

LabeledScene load_scene(const fs::path& manifest_dir, const ManifestEntry& entry) {
    LabeledScene scene;
    scene.image = read_ppm(manifest_dir / entry.image_file);
    read_labels(manifest_dir / entry.label_file, scene);
    return scene;
}

}  // namespace partparse::synth
