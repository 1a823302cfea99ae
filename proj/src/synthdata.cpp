#include "lacoste/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lacoste::synthdata {

namespace {

struct Rgb {
    double r, g, b;
};

struct Palette {
    Rgb base, accent;
};

// Per-class palettes; patterns cycle stripes/dots/rings/checker.
const Palette kPalettes[] = {
    {{0.85, 0.20, 0.20}, {0.95, 0.85, 0.30}},
    {{0.20, 0.55, 0.90}, {0.90, 0.95, 0.95}},
    {{0.20, 0.75, 0.35}, {0.10, 0.25, 0.15}},
    {{0.85, 0.50, 0.15}, {0.35, 0.10, 0.45}},
    {{0.70, 0.20, 0.75}, {0.95, 0.90, 0.60}},
    {{0.15, 0.70, 0.70}, {0.90, 0.40, 0.30}},
    {{0.60, 0.60, 0.20}, {0.20, 0.20, 0.70}},
    {{0.90, 0.75, 0.75}, {0.30, 0.05, 0.05}},
};

struct SceneObject {
    int class_id = 1;
    int identity = 1;
    double ax = 6, by = 6;        // ellipse half-axes
    double cx0 = 0, cy0 = 0;      // spawn center
    double vx = 0, vy = 0;
    double depth = 8.0;
    double disparity = 0.0;       // integer-valued, bf / depth
    int pattern = 0;
    double period = 5.0;
    double angle = 0.0;
    double phase = 0.0;
    double brightness = 1.0;
    // Reflection box for bouncing trajectories.
    double min_cx = 0, max_cx = 0, min_cy = 0, max_cy = 0;
};

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double hash01(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
    uint64_t h = splitmix64(a ^ splitmix64(b ^ splitmix64(c ^ splitmix64(d))));
    return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);
}

// Bouncing 1-D motion inside [lo, hi].
double bounce(double x0, double v, double t, double lo, double hi) {
    const double span = hi - lo;
    if (span <= 0.0) return lo;
    double u = std::fmod(x0 - lo + v * t, 2.0 * span);
    if (u < 0) u += 2.0 * span;
    return lo + (u <= span ? u : 2.0 * span - u);
}

Rgb object_color(const SceneObject& o, double u, double v, bool flicker, int64_t t) {
    if (flicker) {
        const double n = hash01(static_cast<uint64_t>(o.identity), static_cast<uint64_t>(t),
                                static_cast<uint64_t>(static_cast<int64_t>(std::floor(u)) + 4096),
                                static_cast<uint64_t>(static_cast<int64_t>(std::floor(v)) + 4096));
        const double m = hash01(static_cast<uint64_t>(o.identity) + 77, static_cast<uint64_t>(t),
                                static_cast<uint64_t>(static_cast<int64_t>(std::floor(u)) + 4096),
                                static_cast<uint64_t>(static_cast<int64_t>(std::floor(v)) + 4096));
        return {0.25 + 0.55 * n, 0.25 + 0.55 * m, 0.25 + 0.55 * n * m};
    }
    const Palette& p = kPalettes[(o.class_id - 1) % 8];
    bool accent = false;
    switch (o.pattern) {
        case 0: {  // stripes
            const double s = (u * std::cos(o.angle) + v * std::sin(o.angle)) / o.period + o.phase;
            accent = (static_cast<int64_t>(std::floor(s)) % 2 + 2) % 2 == 0;
            break;
        }
        case 1: {  // dots
            const double mu = u - o.period * std::floor(u / o.period) - o.period / 2;
            const double mv = v - o.period * std::floor(v / o.period) - o.period / 2;
            accent = mu * mu + mv * mv <= (o.period * 0.3) * (o.period * 0.3);
            break;
        }
        case 2: {  // concentric rings
            const double s = std::sqrt(u * u + v * v) / o.period + o.phase;
            accent = (static_cast<int64_t>(std::floor(s)) % 2 + 2) % 2 == 0;
            break;
        }
        default: {  // checker
            const auto iu = static_cast<int64_t>(std::floor(u / o.period + o.phase));
            const auto iv = static_cast<int64_t>(std::floor(v / o.period));
            accent = ((iu + iv) % 2 + 2) % 2 == 0;
            break;
        }
    }
    const Rgb& c = accent ? p.accent : p.base;
    return {std::clamp(c.r * o.brightness, 0.0, 1.0), std::clamp(c.g * o.brightness, 0.0, 1.0),
            std::clamp(c.b * o.brightness, 0.0, 1.0)};
}

Rgb background_color(double x, double y, int64_t h) {
    const double g = 0.10 + 0.05 * y / static_cast<double>(h) +
                     0.03 * std::sin(x * 0.20) + 0.02 * std::sin(y * 0.35 + 1.0);
    return {g, g * 1.05, g * 1.15};
}

uint8_t to_u8(double v) {
    return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::string frame_name(int64_t t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06lld", static_cast<long long>(t));
    return buf;
}

}  // namespace

void SceneConfig::validate() const {
    if (height <= 0 || width <= 0 || clip_len <= 0) throw argument_error("SceneConfig: bad size");
    if (velocity_cap >= static_cast<double>(width) / static_cast<double>(clip_len))
        throw argument_error("SceneConfig: velocity cap must stay below width / clip length");
    if (z_min <= 0 || z_max < z_min || z_background <= z_max)
        throw argument_error("SceneConfig: depth range must be positive, background farthest");
    if (classes < 1 || objects_min < 1 || objects_max < objects_min)
        throw argument_error("SceneConfig: bad object/class counts");
    if (!class_weights.empty() && static_cast<int>(class_weights.size()) != classes)
        throw argument_error("SceneConfig: class_weights size must equal classes");
}

StereoClip generate_clip(const SceneConfig& cfg, int64_t clip_index) {
    cfg.validate();
    Rng rng(splitmix64(cfg.seed ^ splitmix64(static_cast<uint64_t>(clip_index) + 0x51ed2701)));
    const int64_t h = cfg.height, w = cfg.width, T = cfg.clip_len;

    // Sample the whole scene up front in a fixed draw order.
    const int n_obj = static_cast<int>(uniform_int(rng, cfg.objects_min, cfg.objects_max));
    std::vector<double> cw = cfg.class_weights;
    if (cw.empty()) cw.assign(static_cast<size_t>(cfg.classes), 1.0);
    std::discrete_distribution<int> class_dist(cw.begin(), cw.end());

    const double d_bg = std::max(1.0, std::round(cfg.bf / cfg.z_background));
    std::vector<SceneObject> objects(static_cast<size_t>(n_obj));
    for (int i = 0; i < n_obj; ++i) {
        SceneObject& o = objects[static_cast<size_t>(i)];
        o.identity = i + 1;
        o.class_id = class_dist(rng) + 1;
        const double rmin = 0.10 * static_cast<double>(std::min(h, w));
        const double rmax = 0.18 * static_cast<double>(std::min(h, w));
        o.ax = uniform_real(rng, rmin, rmax);
        o.by = uniform_real(rng, rmin, rmax);
        const double z = uniform_real(rng, cfg.z_min, cfg.z_max);
        o.disparity = std::max(1.0, std::round(cfg.bf / z));
        o.depth = cfg.bf / o.disparity;  // snap depth so disparity is exactly integral
        o.min_cx = o.ax + o.disparity + 1;
        o.max_cx = static_cast<double>(w) - o.ax - 1;
        o.min_cy = o.by + 1;
        o.max_cy = static_cast<double>(h) - o.by - 1;
        if (o.max_cx <= o.min_cx) o.max_cx = o.min_cx + 1;
        if (o.max_cy <= o.min_cy) o.max_cy = o.min_cy + 1;
        const bool biased = uniform_real(rng, 0.0, 1.0) < cfg.placement_bias;
        double lox = o.min_cx, hix = o.max_cx, loy = o.min_cy, hiy = o.max_cy;
        if (biased) {
            const int quad = (o.class_id - 1) % 4;
            const double mx = 0.5 * (lox + hix), my = 0.5 * (loy + hiy);
            if (quad == 0 || quad == 2) hix = mx; else lox = mx;
            if (quad == 0 || quad == 1) hiy = my; else loy = my;
        }
        o.cx0 = uniform_real(rng, lox, hix);
        o.cy0 = uniform_real(rng, loy, hiy);
        o.vx = uniform_real(rng, -cfg.velocity_cap, cfg.velocity_cap);
        o.vy = uniform_real(rng, -cfg.velocity_cap, cfg.velocity_cap);
        o.pattern = (o.class_id - 1) % 4;
        o.period = uniform_real(rng, 4.0, 7.0);
        o.angle = uniform_real(rng, 0.0, M_PI);
        o.phase = uniform_real(rng, 0.0, 2.0);
        o.brightness = uniform_real(rng, 0.85, 1.15);
    }
    // Per-frame event draws (fixed order: flicker per object, then glare).
    std::vector<std::vector<uint8_t>> flicker(static_cast<size_t>(T),
                                              std::vector<uint8_t>(static_cast<size_t>(n_obj), 0));
    std::vector<double> glare_y(static_cast<size_t>(T), -1.0);
    for (int64_t t = 0; t < T; ++t) {
        for (int i = 0; i < n_obj; ++i)
            flicker[static_cast<size_t>(t)][static_cast<size_t>(i)] =
                uniform_real(rng, 0.0, 1.0) < cfg.flicker_prob;
        if (uniform_real(rng, 0.0, 1.0) < cfg.glare_prob)
            glare_y[static_cast<size_t>(t)] = uniform_real(rng, 0.1, 0.9) * static_cast<double>(h);
    }

    // Far-to-near paint order (stable: by depth desc, then identity).
    std::vector<int> order(static_cast<size_t>(n_obj));
    for (int i = 0; i < n_obj; ++i) order[static_cast<size_t>(i)] = i;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const auto &oa = objects[static_cast<size_t>(a)], &ob = objects[static_cast<size_t>(b)];
        if (oa.depth != ob.depth) return oa.depth > ob.depth;
        return oa.identity < ob.identity;
    });

    StereoClip clip;
    clip.id = "clip_" + std::to_string(clip_index);
    clip.h = h;
    clip.w = w;
    clip.bf = cfg.bf;
    clip.frames.resize(static_cast<size_t>(T));

    for (int64_t t = 0; t < T; ++t) {
        StereoFrame& fr = clip.frames[static_cast<size_t>(t)];
        fr.left = ImageU8(h, w, 3);
        fr.right = ImageU8(h, w, 3);
        fr.depth = geometry::DepthField(h, w);
        fr.gt.h = h;
        fr.gt.w = w;

        std::vector<double> cx(static_cast<size_t>(n_obj)), cy(static_cast<size_t>(n_obj));
        for (int i = 0; i < n_obj; ++i) {
            const SceneObject& o = objects[static_cast<size_t>(i)];
            cx[static_cast<size_t>(i)] =
                bounce(o.cx0, o.vx, static_cast<double>(t), o.min_cx, o.max_cx);
            cy[static_cast<size_t>(i)] =
                bounce(o.cy0, o.vy, static_cast<double>(t), o.min_cy, o.max_cy);
        }

        std::vector<std::vector<uint8_t>> masks(
            static_cast<size_t>(n_obj), std::vector<uint8_t>(static_cast<size_t>(h * w), 0));

        for (int view = 0; view < 2; ++view) {
            ImageU8& img = view == 0 ? fr.left : *fr.right;
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x) {
                    const double sx_bg = static_cast<double>(x) + (view == 1 ? d_bg : 0.0);
                    Rgb c = background_color(sx_bg, static_cast<double>(y), h);
                    int top = -1;
                    for (int oi : order) {
                        const SceneObject& o = objects[static_cast<size_t>(oi)];
                        const double shift = view == 1 ? o.disparity : 0.0;
                        const double u = static_cast<double>(x) + shift - cx[static_cast<size_t>(oi)];
                        const double v = static_cast<double>(y) - cy[static_cast<size_t>(oi)];
                        if ((u / o.ax) * (u / o.ax) + (v / o.by) * (v / o.by) > 1.0) continue;
                        c = object_color(o, u, v,
                                         flicker[static_cast<size_t>(t)][static_cast<size_t>(oi)],
                                         t);
                        top = oi;
                    }
                    if (view == 0) {
                        fr.depth.z[static_cast<size_t>(y * w + x)] =
                            top >= 0 ? objects[static_cast<size_t>(top)].depth
                                     : cfg.z_background;
                        if (top >= 0)
                            masks[static_cast<size_t>(top)][static_cast<size_t>(y * w + x)] = 1;
                        if (glare_y[static_cast<size_t>(t)] >= 0.0) {
                            const double dy =
                                (static_cast<double>(y) - glare_y[static_cast<size_t>(t)]) /
                                (static_cast<double>(h) / 8.0);
                            const double amp = 0.35 * std::exp(-0.5 * dy * dy);
                            c.r += amp;
                            c.g += amp;
                            c.b += amp;
                        }
                    }
                    img.at(y, x, 0) = to_u8(c.r);
                    img.at(y, x, 1) = to_u8(c.g);
                    img.at(y, x, 2) = to_u8(c.b);
                }
        }

        for (int i = 0; i < n_obj; ++i) {
            bool any = false;
            for (uint8_t v : masks[static_cast<size_t>(i)]) any |= (v != 0);
            if (!any) continue;  // fully occluded this frame
            GtInstance inst;
            inst.class_id = objects[static_cast<size_t>(i)].class_id;
            inst.identity = objects[static_cast<size_t>(i)].identity;
            inst.mask = std::move(masks[static_cast<size_t>(i)]);
            fr.gt.instances.push_back(std::move(inst));
        }
    }
    return clip;
}

geometry::DisparityField true_disparity(const StereoFrame& frame, double bf) {
    geometry::DisparityField d(frame.depth.h, frame.depth.w);
    for (size_t i = 0; i < frame.depth.z.size(); ++i) d.d[i] = bf / frame.depth.z[i];
    return d;
}

void write_clip(const StereoClip& clip, const std::string& dir, bool monocular) {
    const fs::path base = fs::path(dir) / clip.id;
    fs::create_directories(base / "frames");
    fs::create_directories(base / "masks");
    fs::create_directories(base / "depth");
    json instances = json::object();
    for (int64_t t = 0; t < clip.length(); ++t) {
        const StereoFrame& fr = clip.frames[static_cast<size_t>(t)];
        io::save_png((base / "frames" / ("left_" + frame_name(t) + ".png")).string(), fr.left);
        if (!monocular && fr.right)
            io::save_png((base / "frames" / ("right_" + frame_name(t) + ".png")).string(),
                         *fr.right);
        ImageU16 ids(clip.h, clip.w);
        for (const GtInstance& inst : fr.gt.instances) {
            for (int64_t p = 0; p < clip.h * clip.w; ++p)
                if (inst.mask[static_cast<size_t>(p)])
                    ids.data[static_cast<size_t>(p)] = static_cast<uint16_t>(inst.identity);
            instances[std::to_string(inst.identity)] = {{"class", inst.class_id},
                                                        {"identity", inst.identity}};
        }
        io::save_png16((base / "masks" / (frame_name(t) + ".png")).string(), ids);
        io::save_pfm((base / "depth" / (frame_name(t) + ".pfm")).string(), clip.h, clip.w,
                     fr.depth.z);
    }
    json meta;
    meta["instances"] = instances;
    meta["frames"] = clip.length();
    std::ofstream out(base / "instances.json");
    out << meta.dump(2) << "\n";
}

void write_dataset(const SceneConfig& cfg, int64_t num_clips, const std::string& dir,
                   bool monocular) {
    cfg.validate();
    fs::create_directories(dir);
    json root;
    root["format"] = "lacoste-dataset-v1";
    root["height"] = cfg.height;
    root["width"] = cfg.width;
    root["classes"] = cfg.classes;
    root["bf"] = cfg.bf;
    root["monocular"] = monocular;
    root["seed"] = cfg.seed;
    json ids = json::array();
    for (int64_t i = 0; i < num_clips; ++i) {
        StereoClip clip = generate_clip(cfg, i);
        write_clip(clip, dir, monocular);
        ids.push_back(clip.id);
    }
    root["clips"] = ids;
    std::ofstream out(fs::path(dir) / "dataset.json");
    out << root.dump(2) << "\n";
}

DatasetIndex load_dataset(const std::string& dir) {
    const fs::path p = fs::path(dir) / "dataset.json";
    std::ifstream in(p);
    if (!in) throw data_error("load_dataset: missing " + p.string());
    json root;
    try {
        in >> root;
    } catch (const json::exception& e) {
        throw data_error("load_dataset: malformed " + p.string() + ": " + e.what());
    }
    DatasetIndex idx;
    idx.dir = dir;
    idx.height = root.at("height").get<int64_t>();
    idx.width = root.at("width").get<int64_t>();
    idx.classes = root.at("classes").get<int>();
    idx.bf = root.at("bf").get<double>();
    idx.monocular = root.value("monocular", false);
    for (const auto& c : root.at("clips")) idx.clip_ids.push_back(c.get<std::string>());
    return idx;
}

StereoClip load_clip(const DatasetIndex& index, const std::string& clip_id) {
    const fs::path base = fs::path(index.dir) / clip_id;
    const fs::path meta_path = base / "instances.json";
    std::ifstream meta_in(meta_path);
    if (!meta_in) throw data_error("load_clip: missing " + meta_path.string());
    json meta;
    try {
        meta_in >> meta;
    } catch (const json::exception& e) {
        throw data_error("load_clip: malformed " + meta_path.string() + ": " + e.what());
    }
    StereoClip clip;
    clip.id = clip_id;
    clip.h = index.height;
    clip.w = index.width;
    clip.bf = index.bf;
    const int64_t T = meta.at("frames").get<int64_t>();
    clip.frames.resize(static_cast<size_t>(T));
    for (int64_t t = 0; t < T; ++t) {
        StereoFrame& fr = clip.frames[static_cast<size_t>(t)];
        fr.left = io::load_png((base / "frames" / ("left_" + frame_name(t) + ".png")).string());
        const fs::path rp = base / "frames" / ("right_" + frame_name(t) + ".png");
        if (!index.monocular && fs::exists(rp)) fr.right = io::load_png(rp.string());
        int64_t dh = 0, dw = 0;
        fr.depth = geometry::DepthField(index.height, index.width);
        io::load_pfm((base / "depth" / (frame_name(t) + ".pfm")).string(), dh, dw, fr.depth.z);
        if (dh != index.height || dw != index.width)
            throw data_error("load_clip: depth size mismatch in " + clip_id);
        ImageU16 ids = io::load_png16((base / "masks" / (frame_name(t) + ".png")).string());
        fr.gt.h = index.height;
        fr.gt.w = index.width;
        std::vector<int> present;
        for (uint16_t v : ids.data)
            if (v != 0 && std::find(present.begin(), present.end(), static_cast<int>(v)) ==
                              present.end())
                present.push_back(static_cast<int>(v));
        std::sort(present.begin(), present.end());
        for (int id : present) {
            GtInstance inst;
            const json& rec = meta.at("instances").at(std::to_string(id));
            inst.class_id = rec.at("class").get<int>();
            inst.identity = rec.at("identity").get<int>();
            inst.mask.assign(ids.data.size(), 0);
            for (size_t p = 0; p < ids.data.size(); ++p)
                inst.mask[p] = ids.data[p] == static_cast<uint16_t>(id);
            fr.gt.instances.push_back(std::move(inst));
        }
    }
    return clip;
}

}  // namespace lacoste::synthdata
