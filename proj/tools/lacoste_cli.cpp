#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "json.hpp"

#include "lacoste/checkpoint.hpp"
#include "lacoste/config.hpp"
#include "lacoste/pipeline.hpp"
#include "lacoste/stscls.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lacoste;

namespace {

std::string frame_name(int64_t t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06lld", static_cast<long long>(t));
    return buf;
}

json tensor_row(const Tensor& m, int64_t row) {
    json arr = json::array();
    for (int64_t j = 0; j < m.dim(1); ++j) arr.push_back(m.at2(row, j));
    return arr;
}

pipeline::SystemConfig config_for_data(const std::string& config_path,
                                       const synthdata::DatasetIndex& data) {
    pipeline::SystemConfig cfg = load_config(config_path);
    if (cfg.model.num_classes != data.classes) {
        std::cerr << "note: using dataset class count " << data.classes << "\n";
        cfg.model.num_classes = data.classes;
    }
    if (data.monocular) cfg.pseudo_stereo = true;
    return cfg;
}

int cmd_gen_data(const std::string& out, uint64_t seed, int64_t clips, int classes,
                 const std::string& scene_path, bool monocular) {
    synthdata::SceneConfig scfg;
    if (!scene_path.empty()) {
        std::ifstream in(scene_path);
        if (!in) throw config_error("gen-data: cannot open scene config " + scene_path);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        scfg = scene_from_json(text);
    }
    scfg.seed = seed;
    if (classes > 0) scfg.classes = classes;
    synthdata::write_dataset(scfg, clips, out, monocular);
    std::cout << "wrote " << clips << " clips to " << out << "\n";
    return 0;
}

int cmd_train(const std::string& data_dir, const std::string& config_path,
              const std::string& out_ckpt, bool quiet) {
    auto data = synthdata::load_dataset(data_dir);
    pipeline::SystemConfig cfg = config_for_data(config_path, data);
    pipeline::System sys(cfg, cfg.seed);
    pipeline::Trainer trainer(sys, data);
    trainer.run(cfg.steps, !quiet);
    sys.save(out_ckpt, false);
    std::cout << "checkpoint written to " << out_ckpt << "\n";
    return 0;
}

int cmd_train_lacls(const std::string& data_dir, const std::string& config_path,
                    const std::string& out_ckpt, int epochs, uint64_t seed, bool quiet) {
    auto data = synthdata::load_dataset(data_dir);
    pipeline::SystemConfig cfg;
    if (!config_path.empty())
        cfg = config_for_data(config_path, data);
    else if (checkpoint::has_component(out_ckpt, "qbs"))
        cfg = config_from_json(checkpoint::component_config(out_ckpt, "qbs"));
    if (cfg.model.num_classes != data.classes) cfg.model.num_classes = data.classes;
    pipeline::System sys(cfg, cfg.seed);
    lacls::TrainOptions opt;
    opt.epochs = epochs;
    opt.seed = seed;
    opt.verbose = !quiet;
    auto stats = lacls::train_lacls_offline(
        data, const_cast<lacls::LaclsModel&>(sys.lacls_model()), sys.params(), opt);
    sys.save_lacls(out_ckpt);
    std::cout << "lacls trained on " << stats.samples << " patches, train accuracy "
              << stats.train_accuracy << "; component saved to " << out_ckpt << "\n";
    return 0;
}

int cmd_infer(const std::string& data_dir, const std::string& ckpt, const std::string& out_dir,
              const std::string& config_path, bool no_bank, bool dump_embeddings,
              bool dump_tracklets) {
    auto data = synthdata::load_dataset(data_dir);
    pipeline::SystemConfig cfg = config_path.empty()
                                     ? config_from_json(checkpoint::component_config(ckpt, "qbs"))
                                     : load_config(config_path);
    if (cfg.model.num_classes != data.classes) cfg.model.num_classes = data.classes;
    if (data.monocular) cfg.pseudo_stereo = true;
    pipeline::System sys(cfg, 0);
    sys.load(ckpt);
    pipeline::InferenceEngine engine(sys, !no_bank);

    fs::create_directories(out_dir);
    for (const auto& clip_id : data.clip_ids) {
        StereoClip clip = synthdata::load_clip(data, clip_id);
        auto preds = engine.infer_sequence(clip);
        const fs::path base = fs::path(out_dir) / clip_id;
        fs::create_directories(base / "masks");
        fs::create_directories(base / "frames");
        for (const auto& pred : preds) {
            const int64_t t = pred.t_star - 1;
            io::save_png16((base / "masks" / (frame_name(t) + ".png")).string(),
                           pred.instance_map);
            json frame;
            frame["t"] = t;
            frame["kept"] = pred.kept_queries;
            json queries = json::array();
            for (int64_t q = 0; q < pred.p_f.dim(0); ++q) {
                json rec;
                rec["index"] = q;
                rec["p_b"] = tensor_row(pred.p_b, q);
                rec["p_s"] = tensor_row(pred.p_s, q);
                rec["p_a"] = tensor_row(pred.p_a, q);
                rec["p_f"] = tensor_row(pred.p_f, q);
                rec["valid"] = static_cast<bool>(pred.valid_queries[static_cast<size_t>(q)]);
                if (dump_embeddings) {
                    rec["e_b"] = tensor_row(pred.emb_b, q);
                    if (pred.emb_s.numel() > 0) rec["e_s"] = tensor_row(pred.emb_s, q);
                    if (pred.emb_a.numel() > 0) rec["e_a"] = tensor_row(pred.emb_a, q);
                }
                queries.push_back(rec);
            }
            frame["queries"] = queries;
            std::ofstream fj(base / "frames" / (frame_name(t) + ".json"));
            fj << frame.dump() << "\n";
        }
        if (dump_tracklets) {
            // window-final tracklet pool per query index, for debugging
            std::vector<stscls::TrackletItem> pool;
            const auto& last = preds.back();
            for (int64_t q = 0; q < last.emb_b.dim(0); ++q) {
                stscls::TrackletItem item;
                Tensor row({1, last.emb_b.dim(1)});
                for (int64_t j = 0; j < last.emb_b.dim(1); ++j)
                    row.at2(0, j) = last.emb_b.at2(q, j);
                item.embedding = ad::constant(std::move(row));
                item.identity = q + 1;
                item.label = cfg.model.num_classes + 1;
                item.tag = {stscls::View::left, static_cast<int>(last.t_star),
                            cfg.model.decoder_layers};
                pool.push_back(std::move(item));
            }
            auto tracklets = stscls::generate_tracklets(pool, cfg.sampler, cfg.seed);
            stscls::dump_tracklets_jsonl(tracklets, (base / "tracklets.jsonl").string(),
                                         (base / "tracklets.bin").string());
        }
    }
    std::cout << "predictions written to " << out_dir << "\n";
    return 0;
}

// Rebuilds semantic label maps from an infer output directory.
void load_pred_maps(const std::string& pred_dir, const synthdata::DatasetIndex& data,
                    std::vector<metrics::LabelMap>& pred_maps,
                    std::vector<metrics::LabelMap>& gt_maps) {
    for (const auto& clip_id : data.clip_ids) {
        StereoClip clip = synthdata::load_clip(data, clip_id);
        const fs::path base = fs::path(pred_dir) / clip_id;
        for (int64_t t = 0; t < clip.length(); ++t) {
            const fs::path mask_path = base / "masks" / (frame_name(t) + ".png");
            const fs::path json_path = base / "frames" / (frame_name(t) + ".json");
            if (!fs::exists(mask_path) || !fs::exists(json_path))
                throw data_error("eval: missing prediction " + mask_path.string());
            ImageU16 inst = io::load_png16(mask_path.string());
            std::ifstream fj(json_path);
            json frame;
            fj >> frame;
            std::map<int, int> query_class;  // query index -> class (1..C), 0 = no-object
            for (const auto& rec : frame.at("queries")) {
                const auto pf = rec.at("p_f").get<std::vector<double>>();
                size_t arg = 0;
                for (size_t j = 1; j < pf.size(); ++j)
                    if (pf[j] > pf[arg]) arg = j;
                query_class[rec.at("index").get<int>()] =
                    arg + 1 == pf.size() ? 0 : static_cast<int>(arg) + 1;
            }
            metrics::LabelMap pm(inst.h, inst.w);
            for (size_t p = 0; p < inst.data.size(); ++p) {
                const int q = static_cast<int>(inst.data[p]);
                if (q == 0) continue;
                auto it = query_class.find(q - 1);
                pm.ids[p] = it == query_class.end() ? 0 : it->second;
            }
            pred_maps.push_back(std::move(pm));
            gt_maps.push_back(pipeline::gt_semantic_map(clip.frames[static_cast<size_t>(t)].gt));
        }
    }
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir,
             const std::string& out_path) {
    auto data = synthdata::load_dataset(gt_dir);
    std::vector<metrics::LabelMap> pred_maps, gt_maps;
    load_pred_maps(pred_dir, data, pred_maps, gt_maps);
    auto iou = metrics::dataset_ious(pred_maps, gt_maps, data.classes);
    auto dice = metrics::dice_scores(pred_maps, gt_maps, data.classes);
    auto surf = metrics::dataset_surface_distances(pred_maps, gt_maps, data.classes);
    json out;
    out["Ch_IoU"] = iou.ch_iou;
    out["ISI_IoU"] = iou.isi_iou;
    out["mcIoU"] = iou.mc_iou;
    json per_class = json::array();
    for (double v : iou.per_class) per_class.push_back(std::isnan(v) ? json() : json(v));
    out["per_class_IoU"] = per_class;
    out["DSC"] = dice.dsc;
    out["mcD"] = dice.mcd;
    out["HD"] = surf.hd;
    out["ASD"] = surf.asd;
    out["frames"] = iou.frames;
    out["excluded_pairs"] = surf.excluded_pairs;
    std::ofstream f(out_path);
    if (!f) throw data_error("eval: cannot write " + out_path);
    f << out.dump(2) << "\n";
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_ablate_alpha(const std::string& data_dir, const std::string& ckpt,
                     const std::string& config_path, const std::string& out_path) {
    auto data = synthdata::load_dataset(data_dir);
    pipeline::SystemConfig cfg = config_path.empty()
                                     ? config_from_json(checkpoint::component_config(ckpt, "qbs"))
                                     : load_config(config_path);
    if (cfg.model.num_classes != data.classes) cfg.model.num_classes = data.classes;
    if (data.monocular) cfg.pseudo_stereo = true;
    cfg.ensemble = {1.0 / 3, 1.0 / 3, 1.0 / 3};  // compute all ensemble items once
    pipeline::System sys(cfg, 0);
    sys.load(ckpt);
    pipeline::InferenceEngine engine(sys, true);

    struct FrameData {
        Tensor p_b, p_s, p_a, masks;
        metrics::LabelMap gt;
    };
    std::vector<FrameData> frames;
    for (const auto& clip_id : data.clip_ids) {
        StereoClip clip = synthdata::load_clip(data, clip_id);
        auto preds = engine.infer_sequence(clip);
        for (const auto& pred : preds)
            frames.push_back({pred.p_b, pred.p_s, pred.p_a, pred.mask_logits,
                              pipeline::gt_semantic_map(
                                  clip.frames[static_cast<size_t>(pred.t_star - 1)].gt)});
    }

    const std::vector<pipeline::EnsembleConfig> alphas = {
        {1, 0, 0},     {0, 1, 0},     {0, 0, 1},
        {0.5, 0.5, 0}, {0.5, 0, 0.5}, {0, 0.5, 0.5},
        {1.0 / 3, 1.0 / 3, 1.0 / 3},  {0.5, 0.3, 0.2}, {0.4, 0.4, 0.2},
    };
    json report = json::array();
    for (const auto& a : alphas) {
        std::vector<metrics::LabelMap> pm, gm;
        for (const auto& fd : frames) {
            pipeline::FinalPrediction p;
            p.p_b = fd.p_b;
            p.p_f = pipeline::ensemble_probs(fd.p_b, fd.p_s, fd.p_a, a);
            p.mask_logits = fd.masks;
            pm.push_back(pipeline::semantic_merge(p, cfg.top_k, cfg.mask_threshold));
            gm.push_back(fd.gt);
        }
        auto iou = metrics::dataset_ious(pm, gm, cfg.model.num_classes);
        json row;
        row["alpha"] = {a.alpha_b, a.alpha_s, a.alpha_a};
        row["Ch_IoU"] = iou.ch_iou;
        row["ISI_IoU"] = iou.isi_iou;
        row["mcIoU"] = iou.mc_iou;
        report.push_back(row);
        std::cout << "alpha (" << a.alpha_b << ", " << a.alpha_s << ", " << a.alpha_a
                  << "): Ch_IoU " << iou.ch_iou << "  ISI_IoU " << iou.isi_iou << "  mcIoU "
                  << iou.mc_iou << "\n";
    }
    if (!out_path.empty()) {
        std::ofstream f(out_path);
        f << report.dump(2) << "\n";
    }
    return 0;
}

int cmd_ablate_components(const std::string& data_dir,
                          const std::vector<std::string>& named_ckpts,
                          const std::string& out_path) {
    auto data = synthdata::load_dataset(data_dir);
    json report = json::array();
    for (const auto& spec : named_ckpts) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos)
            throw config_error("ablate: --ckpts expects NAME=PATH, got " + spec);
        const std::string name = spec.substr(0, eq), path = spec.substr(eq + 1);
        pipeline::SystemConfig cfg =
            config_from_json(checkpoint::component_config(path, "qbs"));
        if (cfg.model.num_classes != data.classes) cfg.model.num_classes = data.classes;
        if (data.monocular) cfg.pseudo_stereo = true;
        pipeline::System sys(cfg, 0);
        sys.load(path);
        pipeline::EvalOptions opt;
        auto sum = pipeline::evaluate_dataset(sys, data, opt);
        json row;
        row["name"] = name;
        row["Ch_IoU"] = sum.iou.ch_iou;
        row["ISI_IoU"] = sum.iou.isi_iou;
        row["mcIoU"] = sum.iou.mc_iou;
        row["acc_frame"] = sum.acc_frame;
        row["acc_tracklet"] = sum.acc_tracklet;
        row["acc_agnostic"] = sum.acc_agnostic;
        row["acc_ensemble"] = sum.acc_ensemble;
        row["identity_consistency"] = sum.identity_consistency;
        report.push_back(row);
        std::cout << name << ": Ch_IoU " << sum.iou.ch_iou << "  ISI_IoU " << sum.iou.isi_iou
                  << "  mcIoU " << sum.iou.mc_iou << "  idc " << sum.identity_consistency
                  << "\n";
    }
    if (!out_path.empty()) {
        std::ofstream f(out_path);
        f << report.dump(2) << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Stereo-temporal query-based instance segmentation"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic stereo-video dataset");
    std::string gen_out, gen_scene;
    uint64_t gen_seed = 1;
    int64_t gen_clips = 8;
    int gen_classes = 0;
    bool gen_mono = false;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--clips", gen_clips, "number of clips");
    gen->add_option("--classes", gen_classes, "class count (0 = scene config default)");
    gen->add_option("--scene", gen_scene, "scene config JSON file");
    gen->add_flag("--monocular", gen_mono, "omit right views");

    auto* train = app.add_subcommand("train", "joint BDFP + set-classifier training");
    std::string train_data, train_cfg, train_out;
    bool train_quiet = false;
    train->add_option("--data", train_data, "dataset directory")->required();
    train->add_option("--config", train_cfg, "system config JSON");
    train->add_option("--out", train_out, "checkpoint directory")->required();
    train->add_flag("--quiet", train_quiet, "suppress progress lines");

    auto* tl = app.add_subcommand("train-lacls", "offline location-agnostic classifier training");
    std::string tl_data, tl_cfg, tl_out;
    int tl_epochs = 4;
    uint64_t tl_seed = 1;
    bool tl_quiet = false;
    tl->add_option("--data", tl_data, "dataset directory")->required();
    tl->add_option("--config", tl_cfg, "system config JSON");
    tl->add_option("--out", tl_out, "checkpoint directory (component is merged in)")->required();
    tl->add_option("--epochs", tl_epochs, "training epochs");
    tl->add_option("--seed", tl_seed, "training seed");
    tl->add_flag("--quiet", tl_quiet, "suppress progress lines");

    auto* infer = app.add_subcommand("infer", "sliding-window inference over a dataset");
    std::string inf_data, inf_ckpt, inf_out, inf_cfg;
    bool inf_nobank = false, inf_dump_emb = false, inf_dump_trk = false;
    infer->add_option("--data", inf_data, "dataset directory")->required();
    infer->add_option("--ckpt", inf_ckpt, "checkpoint directory")->required();
    infer->add_option("--out", inf_out, "prediction output directory")->required();
    infer->add_option("--config", inf_cfg, "system config JSON (default: checkpoint echo)");
    infer->add_flag("--no-bank", inf_nobank, "disable the memory bank");
    infer->add_flag("--dump-embeddings", inf_dump_emb, "write e_b/e_s/e_a per query");
    infer->add_flag("--dump-tracklets", inf_dump_trk, "write tracklet JSONL dumps");

    auto* ev = app.add_subcommand("eval", "score predictions against ground truth");
    std::string ev_pred, ev_gt, ev_out = "metrics.json";
    ev->add_option("--pred", ev_pred, "prediction directory")->required();
    ev->add_option("--gt", ev_gt, "ground-truth dataset directory")->required();
    ev->add_option("--out", ev_out, "metrics JSON path");

    auto* ab = app.add_subcommand("ablate", "sweep ensemble weights or compare checkpoints");
    std::string ab_sweep, ab_data, ab_ckpt, ab_cfg, ab_out;
    std::vector<std::string> ab_named;
    ab->add_option("--sweep", ab_sweep, "alpha|components")->required();
    ab->add_option("--data", ab_data, "dataset directory")->required();
    ab->add_option("--ckpt", ab_ckpt, "checkpoint (alpha sweep)");
    ab->add_option("--ckpts", ab_named, "NAME=PATH entries (components sweep)");
    ab->add_option("--config", ab_cfg, "system config JSON");
    ab->add_option("--out", ab_out, "report JSON path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed())
            return cmd_gen_data(gen_out, gen_seed, gen_clips, gen_classes, gen_scene, gen_mono);
        if (train->parsed()) return cmd_train(train_data, train_cfg, train_out, train_quiet);
        if (tl->parsed())
            return cmd_train_lacls(tl_data, tl_cfg, tl_out, tl_epochs, tl_seed, tl_quiet);
        if (infer->parsed())
            return cmd_infer(inf_data, inf_ckpt, inf_out, inf_cfg, inf_nobank, inf_dump_emb,
                             inf_dump_trk);
        if (ev->parsed()) return cmd_eval(ev_pred, ev_gt, ev_out);
        if (ab->parsed()) {
            if (ab_sweep == "alpha") return cmd_ablate_alpha(ab_data, ab_ckpt, ab_cfg, ab_out);
            if (ab_sweep == "components") return cmd_ablate_components(ab_data, ab_named, ab_out);
            throw config_error("ablate: --sweep must be alpha or components");
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
