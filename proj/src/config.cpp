#include "lacoste/config.hpp"

#include <fstream>

#include "json.hpp"

using nlohmann::json;

namespace lacoste {

namespace {

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

json system_to_jobj(const pipeline::SystemConfig& c) {
    json j;
    j["model"] = {{"num_queries", c.model.num_queries},
                  {"num_classes", c.model.num_classes},
                  {"embed_dim", c.model.embed_dim},
                  {"decoder_layers", c.model.decoder_layers},
                  {"heads", c.model.heads},
                  {"enc_ch1", c.model.enc_ch1},
                  {"enc_ch2", c.model.enc_ch2},
                  {"lambda_bce", c.model.lambda_bce},
                  {"lambda_dice", c.model.lambda_dice},
                  {"lambda_cls", c.model.lambda_cls},
                  {"no_object_weight", c.model.no_object_weight}};
    j["stscls"] = {{"encoder_layers", c.set_classifier.encoder_layers},
                   {"heads", c.set_classifier.heads},
                   {"temperature", c.set_classifier.temperature},
                   {"mask_non_objects", c.set_classifier.mask_non_objects},
                   {"lengths", c.sampler.lengths},
                   {"num_tracklets", c.sampler.num_tracklets},
                   {"max_distractor_fraction", c.sampler.max_distractor_fraction}};
    j["lacls"] = {{"dim", c.lacls_model.dim},
                  {"layers", c.lacls_model.layers},
                  {"heads", c.lacls_model.heads},
                  {"grid", c.lacls_model.grid},
                  {"patch_h", c.patch.out_h},
                  {"patch_w", c.patch.out_w},
                  {"expansion", c.patch.expansion},
                  {"fill", c.patch.fill == lacls::PatchSpec::Fill::zeros ? "zeros" : "mean"}};
    j["pseudo"] = {{"d_min", c.pseudo.d_min},
                   {"d_max", c.pseudo.d_max},
                   {"sobel_threshold", c.pseudo.sobel_threshold},
                   {"fill_mode", c.pseudo.fill_mode == geometry::FillMode::temporal_donor
                                     ? "temporal_donor"
                                     : "blank_with_mask"}};
    j["ensemble"] = {{"alpha_b", c.ensemble.alpha_b},
                     {"alpha_s", c.ensemble.alpha_s},
                     {"alpha_a", c.ensemble.alpha_a}};
    j["pipeline"] = {{"clip_len", c.clip_len},
                     {"delta_t_max", c.delta_t_max},
                     {"top_k", c.top_k},
                     {"mask_threshold", c.mask_threshold},
                     {"bank_capacity", c.bank_capacity},
                     {"use_dfp", c.use_dfp},
                     {"use_stscls", c.use_stscls},
                     {"use_lacls", c.use_lacls},
                     {"query_alignment", c.query_alignment},
                     {"use_ida", c.use_ida},
                     {"pseudo_stereo", c.pseudo_stereo}};
    j["train"] = {{"lr", c.lr},
                  {"weight_decay", c.weight_decay},
                  {"poly_power", c.poly_power},
                  {"steps", c.steps},
                  {"batch", c.batch},
                  {"seed", c.seed}};
    return j;
}

pipeline::SystemConfig system_from_jobj(const json& j) {
    pipeline::SystemConfig c;
    if (j.contains("model")) {
        const json& m = j["model"];
        read(m, "num_queries", c.model.num_queries);
        read(m, "num_classes", c.model.num_classes);
        read(m, "embed_dim", c.model.embed_dim);
        read(m, "decoder_layers", c.model.decoder_layers);
        read(m, "heads", c.model.heads);
        read(m, "enc_ch1", c.model.enc_ch1);
        read(m, "enc_ch2", c.model.enc_ch2);
        read(m, "lambda_bce", c.model.lambda_bce);
        read(m, "lambda_dice", c.model.lambda_dice);
        read(m, "lambda_cls", c.model.lambda_cls);
        read(m, "no_object_weight", c.model.no_object_weight);
    }
    if (j.contains("stscls")) {
        const json& m = j["stscls"];
        read(m, "encoder_layers", c.set_classifier.encoder_layers);
        read(m, "heads", c.set_classifier.heads);
        read(m, "temperature", c.set_classifier.temperature);
        read(m, "mask_non_objects", c.set_classifier.mask_non_objects);
        read(m, "lengths", c.sampler.lengths);
        read(m, "num_tracklets", c.sampler.num_tracklets);
        read(m, "max_distractor_fraction", c.sampler.max_distractor_fraction);
    }
    if (j.contains("lacls")) {
        const json& m = j["lacls"];
        read(m, "dim", c.lacls_model.dim);
        read(m, "layers", c.lacls_model.layers);
        read(m, "heads", c.lacls_model.heads);
        read(m, "grid", c.lacls_model.grid);
        read(m, "patch_h", c.patch.out_h);
        read(m, "patch_w", c.patch.out_w);
        read(m, "expansion", c.patch.expansion);
        if (m.contains("fill"))
            c.patch.fill = m["fill"].get<std::string>() == "mean" ? lacls::PatchSpec::Fill::mean
                                                                  : lacls::PatchSpec::Fill::zeros;
    }
    if (j.contains("pseudo")) {
        const json& m = j["pseudo"];
        read(m, "d_min", c.pseudo.d_min);
        read(m, "d_max", c.pseudo.d_max);
        read(m, "sobel_threshold", c.pseudo.sobel_threshold);
        if (m.contains("fill_mode"))
            c.pseudo.fill_mode = m["fill_mode"].get<std::string>() == "blank_with_mask"
                                     ? geometry::FillMode::blank_with_mask
                                     : geometry::FillMode::temporal_donor;
    }
    if (j.contains("ensemble")) {
        const json& m = j["ensemble"];
        read(m, "alpha_b", c.ensemble.alpha_b);
        read(m, "alpha_s", c.ensemble.alpha_s);
        read(m, "alpha_a", c.ensemble.alpha_a);
    }
    if (j.contains("pipeline")) {
        const json& m = j["pipeline"];
        read(m, "clip_len", c.clip_len);
        read(m, "delta_t_max", c.delta_t_max);
        read(m, "top_k", c.top_k);
        read(m, "mask_threshold", c.mask_threshold);
        read(m, "bank_capacity", c.bank_capacity);
        read(m, "use_dfp", c.use_dfp);
        read(m, "use_stscls", c.use_stscls);
        read(m, "use_lacls", c.use_lacls);
        read(m, "query_alignment", c.query_alignment);
        read(m, "use_ida", c.use_ida);
        read(m, "pseudo_stereo", c.pseudo_stereo);
    }
    if (j.contains("train")) {
        const json& m = j["train"];
        read(m, "lr", c.lr);
        read(m, "weight_decay", c.weight_decay);
        read(m, "poly_power", c.poly_power);
        read(m, "steps", c.steps);
        read(m, "batch", c.batch);
        read(m, "seed", c.seed);
    }
    return c;
}

}  // namespace

std::string config_to_json(const pipeline::SystemConfig& cfg) {
    return system_to_jobj(cfg).dump(2);
}

pipeline::SystemConfig config_from_json(const std::string& json_text) {
    try {
        return system_from_jobj(json::parse(json_text));
    } catch (const json::exception& e) {
        throw config_error(std::string("config: malformed JSON: ") + e.what());
    }
}

pipeline::SystemConfig load_config(const std::string& path) {
    if (path.empty()) return {};
    std::ifstream in(path);
    if (!in) throw config_error("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return config_from_json(text);
}

void save_config(const pipeline::SystemConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw config_error("config: cannot write " + path);
    out << config_to_json(cfg) << "\n";
}

std::string scene_to_json(const synthdata::SceneConfig& c) {
    json j;
    j["height"] = c.height;
    j["width"] = c.width;
    j["classes"] = c.classes;
    j["objects_min"] = c.objects_min;
    j["objects_max"] = c.objects_max;
    j["velocity_cap"] = c.velocity_cap;
    j["z_min"] = c.z_min;
    j["z_max"] = c.z_max;
    j["z_background"] = c.z_background;
    j["bf"] = c.bf;
    j["clip_len"] = c.clip_len;
    j["seed"] = c.seed;
    j["placement_bias"] = c.placement_bias;
    j["flicker_prob"] = c.flicker_prob;
    j["glare_prob"] = c.glare_prob;
    j["class_weights"] = c.class_weights;
    return j.dump(2);
}

synthdata::SceneConfig scene_from_json(const std::string& json_text) {
    synthdata::SceneConfig c;
    try {
        const json j = json::parse(json_text);
        read(j, "height", c.height);
        read(j, "width", c.width);
        read(j, "classes", c.classes);
        read(j, "objects_min", c.objects_min);
        read(j, "objects_max", c.objects_max);
        read(j, "velocity_cap", c.velocity_cap);
        read(j, "z_min", c.z_min);
        read(j, "z_max", c.z_max);
        read(j, "z_background", c.z_background);
        read(j, "bf", c.bf);
        read(j, "clip_len", c.clip_len);
        read(j, "seed", c.seed);
        read(j, "placement_bias", c.placement_bias);
        read(j, "flicker_prob", c.flicker_prob);
        read(j, "glare_prob", c.glare_prob);
        read(j, "class_weights", c.class_weights);
    } catch (const json::exception& e) {
        throw config_error(std::string("scene config: malformed JSON: ") + e.what());
    }
    return c;
}

}  // namespace lacoste
