#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "partparse/common.hpp"
#include "partparse/tensor.hpp"

namespace partparse::synth {

// Part taxonomy: background is implicit class 0 everywhere downstream;
// the four foreground parts are indexed 0..3 here.
constexpr int kNumParts = 4;
enum PartId : int { kHead = 0, kTorso = 1, kLeftLimbs = 2, kRightLimbs = 3 };
extern const std::array<const char*, kNumParts> kPartNames;

enum class StyleId { natural, cartoon, sketch };
const char* style_name(StyleId s);
StyleId style_from_name(const std::string& name);
constexpr std::array<StyleId, 3> kAllStyles{StyleId::natural, StyleId::cartoon,
                                            StyleId::sketch};

// Binary mask stored row-major, one byte per pixel.
struct Mask {
    int h = 0, w = 0;
    std::vector<std::uint8_t> data;

    Mask() = default;
    Mask(int h_, int w_) : h(h_), w(w_), data(static_cast<size_t>(h_) * w_, 0) {}
    std::uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * w + x]; }
    std::uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * w + x]; }
    long count() const {
        long c = 0;
        for (auto v : data) c += v ? 1 : 0;
        return c;
    }
    bool any() const { return count() > 0; }
};

// Normalized center/size box.
struct Box {
    real cx = 0, cy = 0, w = 0, h = 0;
};

struct PersonSpec {
    real cx = 0.5, cy = 0.5;          // normalized body center
    real scale = 0.3;                 // in [0.1, 0.4], fraction of image height
    std::array<real, 6> pose{};       // arm_l, arm_r, leg_l, leg_r, head_tilt, torso_lean
    std::uint64_t palette_seed = 0;
};

struct Instance {
    std::array<Mask, kNumParts> part_masks;
    Box box;
    std::array<bool, kNumParts> part_presence{};
};

struct LabeledScene {
    Tensor image;  // [3,H,W], values in [0,1]
    std::vector<Instance> instances;
    StyleId style = StyleId::natural;
    std::uint64_t scene_seed = 0;

    int height() const { return image.dim(1); }
    int width() const { return image.dim(2); }
};

enum class InterventionKind { content_only, random_mask, random_style };
const char* intervention_name(InterventionKind k);
InterventionKind intervention_from_name(const std::string& name);

struct InterventionSpec {
    InterventionKind kind = InterventionKind::random_style;
    std::vector<int> target_part_group{kLeftLimbs, kRightLimbs};
    std::uint64_t seed = 0;
};

// Deterministic scene synthesis. Geometry (masks, boxes) depends only on
// (num_persons, seed, image_size); the style affects pixels alone. Instances
// are ordered back to front; overlapping pixels belong to the front instance.
LabeledScene generate_scene(int num_persons, StyleId style, std::uint64_t seed,
                            int image_size = 128);

LabeledScene apply_intervention(const LabeledScene& scene, const InterventionSpec& spec);

// Background-only render for a given scene seed/style; used by the pixel
// interventions so untouched regions stay bit-identical.
Tensor render_background(StyleId style, std::uint64_t seed, int h, int w);

// Recompute box/presence from current masks; drops instances with no pixels.
void refresh_labels(LabeledScene& scene);

}  // namespace partparse::synth
