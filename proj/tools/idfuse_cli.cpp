// idfuse: synthetic data, adapter training, dual-stream generation and
// evaluation from the command line.
//
// Exit codes: 0 success, 1 validation error, 2 runtime error.

#include <cstdio>
#include <iostream>
#include <optional>
#include <set>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "idfuse/checkpoint.hpp"
#include "idfuse/config.hpp"
#include "idfuse/evaluation.hpp"
#include "idfuse/inference.hpp"
#include "idfuse/io.hpp"
#include "idfuse/synthetic.hpp"
#include "idfuse/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace idfuse;

namespace {

struct ConfigFlags {
    std::string path;
    std::vector<std::string> overrides;

    void attach(CLI::App* app) {
        app->add_option("--config", path, "run configuration (JSON)")->check(CLI::ExistingFile);
        app->add_option("--set", overrides, "override one key, e.g. --set train.steps=100");
    }
    RunConfig load() const {
        RunConfig cfg = path.empty() ? RunConfig{} : load_config(path);
        for (const auto& o : overrides) apply_override(cfg, o);
        return cfg;
    }
};

// "id003/v01.png" rather than just the file name.
std::string source_label(const fs::path& p) { return (p.parent_path().filename() / p.filename()).string(); }

fs::path sibling(const fs::path& p, const std::string& suffix) {
    fs::path out = p;
    out.replace_extension();
    return out.string() + suffix;
}

// ---------------------------------------------------------------------------

int cmd_synth_data(const ConfigFlags& cf, const std::string& out) {
    const RunConfig cfg = cf.load();
    const Encoders enc = make_encoders(cfg.encoders, cfg.unet.d_model);
    const Dataset d = generate_synthetic_dataset(dataset_options(cfg), *enc.face);
    const fs::path dir = resolve_output(out);
    export_dataset(d, dir, config_digest(cfg));
    std::cout << "wrote " << d.identities.size() << " identities, " << d.pairs.size() << " pairs to " << dir.string()
              << "\n";
    return 0;
}

int cmd_train(const ConfigFlags& cf, const std::string& data_dir, const std::string& out,
              const std::string& loss_out, bool quiet) {
    const RunConfig cfg = cf.load();
    const Dataset d = import_dataset(data_dir);
    if (d.image_size != cfg.dataset.image_size)
        throw InputError("dataset image size " + std::to_string(d.image_size) + " does not match config");
    const Encoders enc = make_encoders(cfg.encoders, cfg.unet.d_model);
    const PreparedData data = prepare_training_data(d, enc, cfg.latent_factor, cfg.unet.latent_channels);
    const NoiseSchedule sched = make_schedule(cfg);

    CheckpointBundle b;
    b.config = cfg;
    b.params = init_model(cfg.unet, cfg.encoders.clip_dim, cfg.encoders.face_dim, cfg.model_seed);
    UNet unet(cfg.unet, b.params, sched);
    const std::size_t every = std::max<std::size_t>(1, cfg.train.steps / 10);
    TrainResult r = train(data, b.params, unet, cfg.train, [&](std::size_t step, double loss) {
        if (!quiet && (step % every == 0 || step + 1 == cfg.train.steps))
            std::cerr << "step " << step << " loss " << loss << "\n";
    });
    b.optimizer = std::move(r.optimizer);
    b.seeds = {{"model_seed", cfg.model_seed}, {"train_seed", cfg.train.seed}, {"dataset_seed", d.seed}};

    const fs::path ckpt = resolve_output(out);
    const fs::path csv = loss_out.empty() ? sibling(ckpt, ".loss.csv") : resolve_output(loss_out);
    write_loss_csv(csv, r.losses);
    save_checkpoint(ckpt, b);
    const SmoothedLoss s = smoothed_loss(r.losses);
    const json summary{{"config_digest", config_digest(cfg)},
                       {"frozen_digest", b.params.frozen_digest()},
                       {"trainable_digest", b.params.digest(true)},
                       {"mode", to_string(cfg.train.mode)},
                       {"steps", r.losses.size()},
                       {"smoothed_initial_loss", s.initial},
                       {"smoothed_final_loss", s.final},
                       {"loss_ratio", s.ratio},
                       {"loss_csv", csv.string()}};
    write_file_atomic(sibling(ckpt, ".train.json"), summary.dump(2) + "\n");
    std::cout << "checkpoint " << ckpt.string() << " loss ratio " << s.ratio << "\n";
    return 0;
}

struct GenerateFlags {
    std::string checkpoint, request, out = "generated.png";
    std::optional<std::string> prompt, negative_prompt, variant, style;
    std::vector<std::string> id_images;
    std::vector<double> mix_weights;
    std::optional<std::uint64_t> seed;
    std::optional<int> steps;
    std::optional<double> guidance;
    std::optional<bool> merge;
};

GenerationRequest read_request(const fs::path& path, const RunConfig& cfg) {
    GenerationRequest r;
    r.steps = cfg.inference.steps;
    r.guidance_scale = cfg.inference.guidance_scale;
    r.variant = cfg.inference.variant;
    r.merge_cross_attention = cfg.inference.merge_cross_attention;
    r.style = cfg.inference.style;
    if (path.empty()) return r;
    try {
        const json j = json::parse(read_file_text(path));
        static const std::set<std::string> keys{"prompt", "negative_prompt", "id_images", "mix_weights", "style", "seed",
                                                "steps", "guidance_scale", "variant", "merge_cross_attention"};
        for (const auto& [k, _] : j.items())
            if (!keys.count(k)) throw InputError("request: unknown key '" + k + "'");
        r.prompt = j.value("prompt", r.prompt);
        r.negative_prompt = j.value("negative_prompt", r.negative_prompt);
        for (const auto& p : j.value("id_images", std::vector<std::string>{})) {
            fs::path ip(p);
            if (ip.is_relative()) ip = path.parent_path() / ip;
            r.id_images.push_back(read_png(ip));
            r.id_sources.push_back(source_label(ip));
        }
        r.mix_weights = j.value("mix_weights", r.mix_weights);
        if (j.contains("style")) r.style = style_align_from_string(j["style"].get<std::string>());
        r.seed = j.value("seed", r.seed);
        r.steps = j.value("steps", r.steps);
        r.guidance_scale = j.value("guidance_scale", r.guidance_scale);
        if (j.contains("variant")) r.variant = generation_variant_from_string(j["variant"].get<std::string>());
        r.merge_cross_attention = j.value("merge_cross_attention", r.merge_cross_attention);
    } catch (const json::exception& e) {
        throw InputError(std::string("request: ") + e.what());
    }
    return r;
}

int cmd_generate(const GenerateFlags& f) {
    const CheckpointBundle b = load_checkpoint(f.checkpoint);
    const RunConfig& cfg = b.config;
    GenerationRequest r = read_request(f.request, cfg);
    if (f.prompt) r.prompt = *f.prompt;
    if (f.negative_prompt) r.negative_prompt = *f.negative_prompt;
    if (f.variant) r.variant = generation_variant_from_string(*f.variant);
    if (f.style) r.style = style_align_from_string(*f.style);
    if (f.seed) r.seed = *f.seed;
    if (f.steps) r.steps = *f.steps;
    if (f.guidance) r.guidance_scale = *f.guidance;
    if (f.merge) r.merge_cross_attention = *f.merge;
    if (!f.id_images.empty()) {
        r.id_images.clear();
        r.id_sources.clear();
        for (const auto& p : f.id_images) {
            r.id_images.push_back(read_png(p));
            r.id_sources.push_back(source_label(p));
        }
    }
    if (!f.mix_weights.empty()) r.mix_weights = f.mix_weights;

    const Encoders enc = make_encoders(cfg.encoders, cfg.unet.d_model);
    const NoiseSchedule sched = make_schedule(cfg);
    const UNet unet(cfg.unet, b.params, sched);
    const GenerationModel model{unet, enc, mappers_from(b.params), cfg.latent_factor, config_digest(cfg),
                                to_string(cfg.train.mode)};
    const GenerationResult res = generate(r, model);

    const fs::path img = resolve_output(f.out);
    write_png(img, res.image);
    write_file_atomic(sibling(img, ".json"), to_json(res.provenance));
    std::cout << "wrote " << img.string() << "\n";
    return 0;
}

int cmd_evaluate(const ConfigFlags& cf, const std::string& manifest, const std::string& out) {
    const RunConfig cfg = cf.load();
    const auto entries = read_manifest(manifest);
    const Encoders enc = make_encoders(cfg.encoders, cfg.unet.d_model);
    const HashTextEmbedder text(enc.clip_text);
    std::vector<EvalRecord> records;
    for (const auto& e : entries) {
        EvalRecord rec;
        rec.prompt = e.prompt;
        rec.method = e.method;
        try {
            rec.generated = read_png(e.generated);
            rec.reference = read_png(e.reference);
        } catch (const Error& ex) {
            rec.load_error = ex.what();
        }
        records.push_back(std::move(rec));
    }
    MetricReport rep = evaluate(records, {*enc.clip, *enc.face, text, enc.align_size});
    rep.config_digest = config_digest(cfg);
    const fs::path dir = resolve_output(out);
    fs::create_directories(dir);
    write_file_atomic(dir / "report.json", report_json(rep));
    write_file_atomic(dir / "report.csv", report_csv(rep));
    std::cout << report_csv(rep);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"idfuse: identity/text decoupled diffusion testbed"};
    app.require_subcommand(1);

    ConfigFlags synth_cfg, train_cfg, eval_cfg, show_cfg;
    std::string synth_out = "dataset";
    auto* synth = app.add_subcommand("synth-data", "generate the synthetic identity dataset");
    synth_cfg.attach(synth);
    synth->add_option("--out", synth_out, "output directory");

    std::string train_data, train_out = "checkpoint.idf", train_loss;
    bool quiet = false;
    auto* trn = app.add_subcommand("train", "train the identity adapters");
    train_cfg.attach(trn);
    trn->add_option("--data", train_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
    trn->add_option("--out", train_out, "checkpoint path");
    trn->add_option("--loss-csv", train_loss, "loss trace path (default: next to the checkpoint)");
    trn->add_flag("--quiet", quiet, "no progress output");

    GenerateFlags gf;
    auto* gen = app.add_subcommand("generate", "dual-stream generation from a checkpoint");
    gen->add_option("--checkpoint", gf.checkpoint)->required()->check(CLI::ExistingFile);
    gen->add_option("--request", gf.request, "request file (JSON); flags override it")->check(CLI::ExistingFile);
    gen->add_option("--prompt", gf.prompt);
    gen->add_option("--negative-prompt", gf.negative_prompt);
    gen->add_option("--id-image", gf.id_images, "reference image; repeat to stack identities")
        ->check(CLI::ExistingFile);
    gen->add_option("--mix-weights", gf.mix_weights, "interpolate the id images with these weights");
    gen->add_option("--seed", gf.seed);
    gen->add_option("--steps", gf.steps);
    gen->add_option("--guidance", gf.guidance);
    gen->add_option("--variant", gf.variant, "mixed_attention | no_mixed_attention | mutual_attention | text_only");
    gen->add_option("--style", gf.style, "off | adain_mean | adain");
    gen->add_flag("--merge,!--no-merge", gf.merge, "merge text cross-attention into the identity stream");
    gen->add_option("--out", gf.out, "output image; provenance goes next to it as .json");

    std::string eval_manifest, eval_out = "eval";
    auto* ev = app.add_subcommand("evaluate", "score generated images against references");
    eval_cfg.attach(ev);
    ev->add_option("--manifest", eval_manifest, "JSON lines: generated, reference, prompt[, method]")
        ->required()
        ->check(CLI::ExistingFile);
    ev->add_option("--out", eval_out, "report directory");

    auto* show = app.add_subcommand("show-config", "print the effective configuration");
    show_cfg.attach(show);

    try {
        app.parse(argc, argv);
        if (*synth) return cmd_synth_data(synth_cfg, synth_out);
        if (*trn) return cmd_train(train_cfg, train_data, train_out, train_loss, quiet);
        if (*gen) return cmd_generate(gf);
        if (*ev) return cmd_evaluate(eval_cfg, eval_manifest, eval_out);
        if (*show) {
            std::cout << config_json(show_cfg.load());
            return 0;
        }
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << " (step " << e.step() << ", group " << e.group() << ")\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
