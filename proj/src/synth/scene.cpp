#include "partparse/synth/scene.hpp"

#include <algorithm>
#include <cmath>

namespace partparse::synth {

const std::array<const char*, kNumParts> kPartNames{"head", "torso", "left_limbs",
                                                    "right_limbs"};

const char* style_name(StyleId s) {
    switch (s) {
        case StyleId::natural: return "natural";
        case StyleId::cartoon: return "cartoon";
        case StyleId::sketch: return "sketch";
    }
    return "?";
}

StyleId style_from_name(const std::string& name) {
    for (StyleId s : kAllStyles)
        if (name == style_name(s)) return s;
    throw Error("unknown style: " + name);
}

const char* intervention_name(InterventionKind k) {
    switch (k) {
        case InterventionKind::content_only: return "content_only";
        case InterventionKind::random_mask: return "random_mask";
        case InterventionKind::random_style: return "random_style";
    }
    return "?";
}

InterventionKind intervention_from_name(const std::string& name) {
    if (name == "content_only") return InterventionKind::content_only;
    if (name == "random_mask") return InterventionKind::random_mask;
    if (name == "random_style") return InterventionKind::random_style;
    throw Error("unknown intervention kind: " + name);
}

namespace {

struct Vec2 {
    real x = 0, y = 0;
};

Vec2 rot(Vec2 v, real a) {
    real c = std::cos(a), s = std::sin(a);
    return {c * v.x - s * v.y, s * v.x + c * v.y};
}

real dist_to_segment(Vec2 p, Vec2 a, Vec2 b) {
    Vec2 ab{b.x - a.x, b.y - a.y};
    Vec2 ap{p.x - a.x, p.y - a.y};
    real denom = ab.x * ab.x + ab.y * ab.y;
    real t = denom > 0 ? (ap.x * ab.x + ap.y * ab.y) / denom : real(0);
    t = std::clamp(t, real(0), real(1));
    real dx = ap.x - t * ab.x, dy = ap.y - t * ab.y;
    return std::sqrt(dx * dx + dy * dy);
}

// One body primitive: a capsule (thick segment) or a disc (a==b).
struct Capsule {
    Vec2 a, b;
    real r;
    int part;
};

// Figure proportions in units of the person height parameter. Parts are kept
// deliberately chunky so limbs survive 8x downsampling of the label grid.
constexpr real kTorsoHalf = 0.20;
constexpr real kTorsoHalfWidth = 0.13;
constexpr real kHeadRadius = 0.13;
constexpr real kHeadOffset = 0.17;
constexpr real kShoulderOffset = 0.115;
constexpr real kHipOffset = 0.07;
constexpr real kArmLen = 0.33;
constexpr real kArmRadius = 0.08;
constexpr real kLegLen = 0.42;
constexpr real kLegRadius = 0.09;
constexpr real kMinRadiusPx = 0.75;

// Fixed sampling ranges so geometry is a pure function of (n, seed, size).
constexpr real kScaleMin = 0.26;
constexpr real kScaleMax = 0.38;

std::vector<Capsule> person_primitives(const PersonSpec& spec, int h, int w) {
    real hp = spec.scale * h;
    Vec2 c{spec.cx * w, spec.cy * h};
    real lean = spec.pose[5];
    Vec2 up = rot({0, -1}, lean);       // torso axis, screen up
    Vec2 right = rot({1, 0}, lean);

    Vec2 neck{c.x + up.x * kTorsoHalf * hp, c.y + up.y * kTorsoHalf * hp};
    Vec2 hip{c.x - up.x * kTorsoHalf * hp, c.y - up.y * kTorsoHalf * hp};

    std::vector<Capsule> prims;
    // paint order: torso first, then limbs, head last (front-most within person)
    prims.push_back({neck, hip, kTorsoHalfWidth * hp, kTorso});

    auto limb = [&](Vec2 from, real angle, real len, real r, int part) {
        // angle measured from straight down, positive toward screen right
        Vec2 dir = rot({0, 1}, angle + lean);
        Vec2 to{from.x + dir.x * len * hp, from.y + dir.y * len * hp};
        prims.push_back({from, to, r * hp, part});
    };

    Vec2 shoulder_l{neck.x - right.x * kShoulderOffset * hp,
                    neck.y - right.y * kShoulderOffset * hp};
    Vec2 shoulder_r{neck.x + right.x * kShoulderOffset * hp,
                    neck.y + right.y * kShoulderOffset * hp};
    Vec2 hip_l{hip.x - right.x * kHipOffset * hp, hip.y - right.y * kHipOffset * hp};
    Vec2 hip_r{hip.x + right.x * kHipOffset * hp, hip.y + right.y * kHipOffset * hp};

    limb(shoulder_l, -spec.pose[0], kArmLen, kArmRadius, kLeftLimbs);
    limb(shoulder_r, spec.pose[1], kArmLen, kArmRadius, kRightLimbs);
    limb(hip_l, -spec.pose[2], kLegLen, kLegRadius, kLeftLimbs);
    limb(hip_r, spec.pose[3], kLegLen, kLegRadius, kRightLimbs);

    real tilt = spec.pose[4];
    Vec2 head_dir = rot(up, tilt);
    Vec2 head{neck.x + head_dir.x * kHeadOffset * hp, neck.y + head_dir.y * kHeadOffset * hp};
    prims.push_back({head, head, kHeadRadius * hp, kHead});
    return prims;
}

// Ownership raster: -1 background, otherwise instance*kNumParts + part.
using Ownership = std::vector<int>;

void paint_person(const PersonSpec& spec, int inst, int h, int w, Ownership& own) {
    for (const Capsule& cap : person_primitives(spec, h, w)) {
        real r = std::max(cap.r, real(kMinRadiusPx));
        int x0 = std::max(0, static_cast<int>(std::floor(std::min(cap.a.x, cap.b.x) - r - 1)));
        int x1 = std::min(w - 1, static_cast<int>(std::ceil(std::max(cap.a.x, cap.b.x) + r + 1)));
        int y0 = std::max(0, static_cast<int>(std::floor(std::min(cap.a.y, cap.b.y) - r - 1)));
        int y1 = std::min(h - 1, static_cast<int>(std::ceil(std::max(cap.a.y, cap.b.y) + r + 1)));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                Vec2 p{x + real(0.5), y + real(0.5)};
                if (dist_to_segment(p, cap.a, cap.b) <= r)
                    own[static_cast<size_t>(y) * w + x] = inst * kNumParts + cap.part;
            }
    }
}

struct Geometry {
    std::vector<PersonSpec> persons;
    Ownership own;  // h*w
    int h = 0, w = 0;
};

std::vector<PersonSpec> sample_persons(int n, Rng& rng) {
    std::vector<PersonSpec> persons(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        PersonSpec& p = persons[static_cast<size_t>(i)];
        real slot = (i + real(0.5)) / n;
        p.cx = slot + rng.uniform(-0.3, 0.3) / n;
        p.cy = 0.5 + rng.uniform(-0.08, 0.08);
        p.scale = rng.uniform(kScaleMin, kScaleMax);
        p.pose[0] = rng.uniform(0.15, 0.9);
        p.pose[1] = rng.uniform(0.15, 0.9);
        p.pose[2] = rng.uniform(0.05, 0.4);
        p.pose[3] = rng.uniform(0.05, 0.4);
        p.pose[4] = rng.uniform(-0.2, 0.2);
        p.pose[5] = rng.uniform(-0.12, 0.12);
        p.palette_seed = rng.next_u64();
    }
    return persons;
}

Geometry make_geometry(int num_persons, std::uint64_t seed, int size) {
    Geometry geo;
    geo.h = geo.w = size;
    Rng rng(mix_seed(seed, 0xa11ce));
    for (int attempt = 0; attempt < 64; ++attempt) {
        geo.persons = sample_persons(num_persons, rng);
        geo.own.assign(static_cast<size_t>(size) * size, -1);
        for (int i = 0; i < num_persons; ++i)
            paint_person(geo.persons[static_cast<size_t>(i)], i, geo.h, geo.w, geo.own);
        // every person must keep at least one visible pixel after occlusion
        std::vector<long> counts(static_cast<size_t>(num_persons), 0);
        for (int v : geo.own)
            if (v >= 0) ++counts[static_cast<size_t>(v / kNumParts)];
        bool ok = true;
        for (long c : counts) ok = ok && c > 0;
        if (ok) return geo;
    }
    throw Error("make_geometry: could not place persons without full occlusion");
}

// ---------------------------------------------------------------- colors

struct Rgb {
    real r = 0, g = 0, b = 0;
};

Rgb hsv(real h, real s, real v) {
    h = h - std::floor(h);
    real i = std::floor(h * 6);
    real f = h * 6 - i;
    real p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
    switch (static_cast<int>(i) % 6) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

struct Palette {
    std::array<Rgb, kNumParts> part;  // indexed by PartId
};

Palette make_palette(std::uint64_t palette_seed) {
    Rng rng(mix_seed(palette_seed, 0xc0105));
    Palette pal;
    // skin-ish head tone
    pal.part[kHead] = hsv(rng.uniform(0.05, 0.11), rng.uniform(0.3, 0.55),
                          rng.uniform(0.75, 0.95));
    real torso_hue = rng.next_real();
    pal.part[kTorso] = hsv(torso_hue, rng.uniform(0.55, 0.9), rng.uniform(0.5, 0.9));
    real limb_hue = torso_hue + rng.uniform(0.25, 0.75);
    real limb_sat = rng.uniform(0.5, 0.9);
    real limb_val = rng.uniform(0.45, 0.85);
    pal.part[kLeftLimbs] = hsv(limb_hue, limb_sat, limb_val);
    pal.part[kRightLimbs] = hsv(limb_hue + 0.07, limb_sat, std::max(real(0.2), limb_val - 0.2));
    return pal;
}

struct BgSpec {
    Rgb top, bottom;
};

BgSpec make_bg(std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0xb6));
    real hue = rng.uniform(0.45, 0.70);  // cool, muted backdrops
    BgSpec bg;
    bg.top = hsv(hue, rng.uniform(0.1, 0.3), rng.uniform(0.65, 0.85));
    bg.bottom = hsv(hue + rng.uniform(-0.06, 0.06), rng.uniform(0.15, 0.35),
                    rng.uniform(0.35, 0.6));
    return bg;
}

// Per-pixel noise from a counter-based stream so it is independent of scene
// content (interventions can reproduce the exact background).
real pixel_noise(std::uint64_t seed, long idx) {
    std::uint64_t u = mix_seed(seed, static_cast<std::uint64_t>(idx) * 2 + 1);
    std::uint64_t v = mix_seed(seed, static_cast<std::uint64_t>(idx) * 2 + 2);
    real u1 = std::max(real(1e-12), static_cast<real>(u >> 11) * 0x1.0p-53);
    real u2 = static_cast<real>(v >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

constexpr real kNoiseSigma = 0.03;
constexpr int kQuantLevels = 5;
constexpr real kSketchBg = 0.97;
constexpr real kSketchInk = 0.08;

real quantize(real v, int levels) {
    real q = std::round(v * (levels - 1)) / (levels - 1);
    return std::clamp(q, real(0), real(1));
}

Rgb bg_color_at(const BgSpec& bg, int y, int h) {
    real t = h > 1 ? static_cast<real>(y) / (h - 1) : real(0);
    return {bg.top.r + (bg.bottom.r - bg.top.r) * t, bg.top.g + (bg.bottom.g - bg.top.g) * t,
            bg.top.b + (bg.bottom.b - bg.top.b) * t};
}

void put_pixel(Tensor& img, int y, int x, Rgb c) {
    int h = img.dim(1), w = img.dim(2);
    img[(0L * h + y) * w + x] = std::clamp(c.r, real(0), real(1));
    img[(1L * h + y) * w + x] = std::clamp(c.g, real(0), real(1));
    img[(2L * h + y) * w + x] = std::clamp(c.b, real(0), real(1));
}

bool is_boundary(const Ownership& own, int y, int x, int h, int w) {
    int o = own[static_cast<size_t>(y) * w + x];
    auto differs = [&](int yy, int xx) {
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) return false;
        return own[static_cast<size_t>(yy) * w + xx] != o;
    };
    return differs(y - 1, x) || differs(y + 1, x) || differs(y, x - 1) || differs(y, x + 1);
}

Tensor render(const Geometry& geo, StyleId style, std::uint64_t seed) {
    int h = geo.h, w = geo.w;
    Tensor img({3, h, w});
    BgSpec bg = make_bg(seed);
    std::vector<Palette> palettes;
    palettes.reserve(geo.persons.size());
    for (const auto& p : geo.persons) palettes.push_back(make_palette(p.palette_seed));
    std::uint64_t noise_seed = mix_seed(seed, 0x7015e);

    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int o = geo.own[static_cast<size_t>(y) * w + x];
            Rgb c;
            switch (style) {
                case StyleId::natural: {
                    c = o < 0 ? bg_color_at(bg, y, h)
                              : palettes[static_cast<size_t>(o / kNumParts)]
                                    .part[static_cast<size_t>(o % kNumParts)];
                    long idx = static_cast<long>(y) * w + x;
                    c.r += kNoiseSigma * pixel_noise(noise_seed, idx * 3 + 0);
                    c.g += kNoiseSigma * pixel_noise(noise_seed, idx * 3 + 1);
                    c.b += kNoiseSigma * pixel_noise(noise_seed, idx * 3 + 2);
                    break;
                }
                case StyleId::cartoon: {
                    if (is_boundary(geo.own, y, x, h, w)) {
                        c = {0.06, 0.06, 0.06};
                    } else {
                        c = o < 0 ? bg_color_at(bg, y, h)
                                  : palettes[static_cast<size_t>(o / kNumParts)]
                                        .part[static_cast<size_t>(o % kNumParts)];
                        c = {quantize(c.r, kQuantLevels), quantize(c.g, kQuantLevels),
                             quantize(c.b, kQuantLevels)};
                    }
                    break;
                }
                case StyleId::sketch: {
                    real v = is_boundary(geo.own, y, x, h, w) ? kSketchInk : kSketchBg;
                    c = {v, v, v};
                    break;
                }
            }
            put_pixel(img, y, x, c);
        }
    return img;
}

Box box_from_masks(const std::array<Mask, kNumParts>& masks) {
    int h = 0, w = 0;
    int x0 = 1 << 30, x1 = -1, y0 = 1 << 30, y1 = -1;
    for (const Mask& m : masks) {
        h = m.h;
        w = m.w;
        for (int y = 0; y < m.h; ++y)
            for (int x = 0; x < m.w; ++x)
                if (m.at(y, x)) {
                    x0 = std::min(x0, x);
                    x1 = std::max(x1, x);
                    y0 = std::min(y0, y);
                    y1 = std::max(y1, y);
                }
    }
    Box b;
    if (x1 < 0) return b;  // empty
    b.cx = (x0 + x1 + 1) / (real(2) * w);
    b.cy = (y0 + y1 + 1) / (real(2) * h);
    b.w = (x1 - x0 + 1) / real(w);
    b.h = (y1 - y0 + 1) / real(h);
    return b;
}

std::vector<Instance> labels_from_ownership(const Ownership& own, int n, int h, int w) {
    std::vector<Instance> instances(static_cast<size_t>(n));
    for (auto& inst : instances)
        for (auto& m : inst.part_masks) m = Mask(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int o = own[static_cast<size_t>(y) * w + x];
            if (o < 0) continue;
            instances[static_cast<size_t>(o / kNumParts)]
                .part_masks[static_cast<size_t>(o % kNumParts)]
                .at(y, x) = 1;
        }
    for (auto& inst : instances) {
        inst.box = box_from_masks(inst.part_masks);
        for (int c = 0; c < kNumParts; ++c)
            inst.part_presence[static_cast<size_t>(c)] =
                inst.part_masks[static_cast<size_t>(c)].any();
    }
    return instances;
}

}  // namespace

LabeledScene generate_scene(int num_persons, StyleId style, std::uint64_t seed,
                            int image_size) {
    PP_CHECK(num_persons >= 1 && num_persons <= 4, "generate_scene: num_persons must be 1..4");
    PP_CHECK(image_size >= 32, "generate_scene: image_size too small");
    Geometry geo = make_geometry(num_persons, seed, image_size);
    LabeledScene scene;
    scene.image = render(geo, style, seed);
    scene.instances = labels_from_ownership(geo.own, num_persons, geo.h, geo.w);
    scene.style = style;
    scene.scene_seed = seed;
    return scene;
}

Tensor render_background(StyleId style, std::uint64_t seed, int h, int w) {
    Geometry empty;
    empty.h = h;
    empty.w = w;
    empty.own.assign(static_cast<size_t>(h) * w, -1);
    return render(empty, style, seed);
}

void refresh_labels(LabeledScene& scene) {
    std::vector<Instance> kept;
    for (auto& inst : scene.instances) {
        long total = 0;
        for (int c = 0; c < kNumParts; ++c) {
            inst.part_presence[static_cast<size_t>(c)] =
                inst.part_masks[static_cast<size_t>(c)].any();
            total += inst.part_masks[static_cast<size_t>(c)].count();
        }
        if (total == 0) continue;
        inst.box = box_from_masks(inst.part_masks);
        kept.push_back(std::move(inst));
    }
    scene.instances = std::move(kept);
}

namespace {

bool in_group(int part, const std::vector<int>& group) {
    return std::find(group.begin(), group.end(), part) != group.end();
}

LabeledScene intervene_content_only(const LabeledScene& scene, const InterventionSpec& spec) {
    LabeledScene out = scene;
    int h = scene.height(), w = scene.width();
    Tensor bg = render_background(scene.style, scene.scene_seed, h, w);
    // union of target-part pixels across instances
    Mask keep(h, w);
    for (const auto& inst : scene.instances)
        for (int c : spec.target_part_group)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    if (inst.part_masks[static_cast<size_t>(c)].at(y, x)) keep.at(y, x) = 1;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (keep.at(y, x)) continue;
            for (int ch = 0; ch < 3; ++ch)
                out.image[(static_cast<long>(ch) * h + y) * w + x] =
                    bg[(static_cast<long>(ch) * h + y) * w + x];
        }
    for (auto& inst : out.instances)
        for (int c = 0; c < kNumParts; ++c)
            if (!in_group(c, spec.target_part_group))
                inst.part_masks[static_cast<size_t>(c)] = Mask(h, w);
    refresh_labels(out);
    return out;
}

LabeledScene intervene_random_mask(const LabeledScene& scene, const InterventionSpec& spec) {
    LabeledScene out = scene;
    int h = scene.height(), w = scene.width();
    Rng rng(mix_seed(spec.seed, 0x3a5c));

    // candidate occlusions: every present non-target part
    struct Cand {
        int inst, part;
    };
    std::vector<Cand> cands;
    for (int i = 0; i < static_cast<int>(scene.instances.size()); ++i)
        for (int c = 0; c < kNumParts; ++c)
            if (!in_group(c, spec.target_part_group) &&
                scene.instances[static_cast<size_t>(i)].part_presence[static_cast<size_t>(c)])
                cands.push_back({i, c});

    std::vector<bool> chosen(cands.size(), false);
    bool any = false;
    for (size_t k = 0; k < cands.size(); ++k) {
        chosen[k] = rng.next_real() < 0.5;
        any = any || chosen[k];
    }
    if (!cands.empty() && !any)
        chosen[static_cast<size_t>(rng.next_index(cands.size()))] = true;

    // flat background-colored rectangle over each chosen part's extent
    Tensor bg = render_background(scene.style, scene.scene_seed, h, w);
    Mask occluded(h, w);
    for (size_t k = 0; k < cands.size(); ++k) {
        if (!chosen[k]) continue;
        const Mask& m =
            scene.instances[static_cast<size_t>(cands[k].inst)].part_masks[static_cast<size_t>(cands[k].part)];
        int x0 = w, x1 = -1, y0 = h, y1 = -1;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (m.at(y, x)) {
                    x0 = std::min(x0, x);
                    x1 = std::max(x1, x);
                    y0 = std::min(y0, y);
                    y1 = std::max(y1, y);
                }
        if (x1 < 0) continue;
        x0 = std::max(0, x0 - 1);
        y0 = std::max(0, y0 - 1);
        x1 = std::min(w - 1, x1 + 1);
        y1 = std::min(h - 1, y1 + 1);
        // mean background color over the rectangle keeps it flat but plausible
        Rgb mean;
        long cnt = 0;
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                mean.r += bg[(0L * h + y) * w + x];
                mean.g += bg[(1L * h + y) * w + x];
                mean.b += bg[(2L * h + y) * w + x];
                ++cnt;
            }
        mean.r /= cnt;
        mean.g /= cnt;
        mean.b /= cnt;
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                occluded.at(y, x) = 1;
                out.image[(0L * h + y) * w + x] = mean.r;
                out.image[(1L * h + y) * w + x] = mean.g;
                out.image[(2L * h + y) * w + x] = mean.b;
            }
    }
    // rectangles occlude everything underneath, so clear them from all masks
    for (auto& inst : out.instances)
        for (auto& m : inst.part_masks)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    if (occluded.at(y, x)) m.at(y, x) = 0;
    refresh_labels(out);
    return out;
}

LabeledScene intervene_random_style(const LabeledScene& scene, const InterventionSpec& spec) {
    Rng rng(mix_seed(spec.seed, 0x57f1e));
    std::vector<StyleId> others;
    for (StyleId s : kAllStyles)
        if (s != scene.style) others.push_back(s);
    StyleId target = others[static_cast<size_t>(rng.next_index(others.size()))];
    LabeledScene out =
        generate_scene(static_cast<int>(scene.instances.size()), target, scene.scene_seed,
                       scene.width());
    // geometry is style-invariant by construction; keep the original labels
    out.instances = scene.instances;
    return out;
}

}  // namespace

LabeledScene apply_intervention(const LabeledScene& scene, const InterventionSpec& spec) {
    PP_CHECK(!scene.instances.empty(), "apply_intervention: scene has no instances");
    for (int c : spec.target_part_group)
        PP_CHECK(c >= 0 && c < kNumParts, "apply_intervention: bad target part id");
    switch (spec.kind) {
        case InterventionKind::content_only: return intervene_content_only(scene, spec);
        case InterventionKind::random_mask: return intervene_random_mask(scene, spec);
        case InterventionKind::random_style: return intervene_random_style(scene, spec);
    }
    throw Error("apply_intervention: unknown kind");
}

}  // namespace partparse::synth
