#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

#include "ddvr/dataset.hpp"
#include "ddvr/error.hpp"
#include "ddvr/gradcheck.hpp"
#include "ddvr/grid.hpp"
#include "ddvr/image.hpp"
#include "ddvr/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ddvr;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kUsage = 2, kNumerical = 3 };

struct Global {
    int threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    std::uint64_t seed = 0;
};

std::pair<int, int> parse_res(const std::string& s)
{
    int w = 0, h = 0;
    char x = 0, extra = 0;
    std::istringstream in(s);
    if (!(in >> w >> x >> h) || (x != 'x' && x != 'X') || (in >> extra) || w <= 0 || h <= 0)
        throw ConfigError("resolution must look like 128x128, got '" + s + "'");
    return {w, h};
}

std::vector<double> parse_color(const std::string& s)
{
    std::vector<double> c;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ','))
        c.push_back(std::stod(cell));
    if (c.size() != 3)
        throw ConfigError("background must be r,g,b");
    return c;
}

void print_config(const std::string& cmd, const json& j)
{
    std::cerr << "[" << cmd << "] effective config:\n" << j.dump(2) << "\n";
}

json read_json_file(const fs::path& p)
{
    std::ifstream in(p);
    if (!in)
        throw IoError("cannot open " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError(p.string() + ": " + e.what());
    }
}

/// Writes an RGBA image as PNG, or as RGB PFM plus a sibling "<stem>_alpha.pfm".
void write_output(const image::ImageF& rgba, const fs::path& out)
{
    const auto ext = out.extension().string();
    if (ext == ".png") {
        image::write_png(rgba, out);
    } else if (ext == ".pfm") {
        image::write_pfm(image::channels_of(rgba, 0, 3), out);
        auto alpha = out;
        alpha.replace_filename(out.stem().string() + "_alpha.pfm");
        image::write_pfm(image::channels_of(rgba, 3, 1), alpha);
    } else {
        throw ConfigError("output must end in .png or .pfm: " + out.string());
    }
}

// -- subcommands ---------------------------------------------------------------

struct SynthArgs {
    fs::path spec, out;
    std::size_t dims = 64;
    std::string dtype = "f32";
};

int run_synth(const SynthArgs& a)
{
    const auto recipe = grid::recipe_from_json(read_json_file(a.spec));
    print_config("synth-volume",
                 {{"spec", a.spec.string()}, {"out", a.out.string()}, {"dims", a.dims}, {"dtype", a.dtype},
                  {"recipe", grid::recipe_to_json(recipe)}});
    const auto vol = grid::synth_volume(recipe, {a.dims, a.dims, a.dims});
    grid::VolumeManifest m;
    m.dims = vol.dims();
    m.channels = vol.channels;
    m.dtype = grid::scalar_type_from_string(a.dtype);
    m.path = a.out.parent_path() / (a.out.stem().string() + ".raw");
    save_volume(vol, m);
    m.path = m.path.filename();
    grid::write_manifest(m, a.out);
    std::cerr << "wrote " << a.out.string() << "\n";
    return kOk;
}

struct MakeTfArgs {
    std::string preset = "three-shell";
    fs::path out;
    double kappa_max = tf::kDefaultKappaMax;
    bool csv = false;
};

int run_make_tf(const MakeTfArgs& a)
{
    print_config("make-tf", {{"preset", a.preset}, {"out", a.out.string()}, {"kappa_max", a.kappa_max}});
    if (a.preset != "three-shell")
        throw ConfigError("unknown transfer-function preset '" + a.preset + "'");
    ad::ParamStore s;
    const auto t = train::three_shell_tf(s, a.kappa_max);
    tf::tf_save(t, s, a.out);
    if (a.csv) {
        auto csv = a.out;
        tf::export_lookup_csv(t, s, csv.replace_extension(".csv"));
    }
    return kOk;
}

struct DatasetArgs {
    fs::path volume, tf, out;
    int views = 32;
    std::string res = "128x128";
    std::string split = "25/7";
    double s_render = 3.0;
    double radius = 1.6;
    std::string background = "0,0,0";
};

int run_make_dataset(const DatasetArgs& a, const Global& g)
{
    train::DatasetSpec spec;
    spec.volume_manifest = a.volume;
    spec.tf_file = a.tf;
    spec.views = a.views;
    std::tie(spec.width, spec.height) = parse_res(a.res);
    spec.split = train::parse_split(a.split);
    spec.s_render = a.s_render;
    spec.camera_radius = a.radius;
    spec.background = parse_color(a.background);
    spec.seed = g.seed;
    spec.threads = g.threads;
    spec.out_dir = a.out;
    print_config("make-dataset", {{"volume", a.volume.string()},
                                  {"tf", a.tf.string()},
                                  {"views", spec.views},
                                  {"res", a.res},
                                  {"split", spec.split},
                                  {"s_render", spec.s_render},
                                  {"camera_radius", spec.camera_radius},
                                  {"background", spec.background},
                                  {"seed", spec.seed},
                                  {"threads", spec.threads},
                                  {"out", a.out.string()}});
    const auto d = train::make_dataset(spec);
    std::cerr << "wrote " << d.views.size() << " views to " << a.out.string() << "\n";
    return kOk;
}

struct TrainArgs {
    std::string model;
    fs::path config, dataset, out;
    std::string anneal, jitter, loss;
    double s = 0.0;
    int epochs = 0;
    double lr = 0.0;
    int batch = 0;
};

int run_train(const TrainArgs& a, const Global& g, const CLI::App& sub, const CLI::App& app)
{
    train::TrainConfig cfg;
    if (!a.config.empty())
        cfg = train::train_config_from_json(read_json_file(a.config));
    if (!a.model.empty())
        cfg.model.kind = train::model_kind_from_string(a.model);
    if (!a.dataset.empty())
        cfg.dataset = a.dataset;
    if (!a.out.empty())
        cfg.out_dir = a.out;
    if (!a.anneal.empty()) {
        const auto colon = a.anneal.find(':');
        if (colon == std::string::npos)
            throw ConfigError("--anneal expects s_l:s_h");
        cfg.annealed = true;
        cfg.s_low = std::stod(a.anneal.substr(0, colon));
        cfg.s_high = std::stod(a.anneal.substr(colon + 1));
    }
    if (sub.count("--s")) {
        cfg.annealed = false;
        cfg.s = a.s;
    }
    if (!a.jitter.empty())
        cfg.jitter = a.jitter == "on";
    if (!a.loss.empty())
        cfg.loss = loss::loss_mode_from_string(a.loss);
    if (sub.count("--epochs"))
        cfg.epochs = a.epochs;
    if (sub.count("--lr"))
        cfg.lr = a.lr;
    if (sub.count("--batch"))
        cfg.batch_size = a.batch;
    if (app.count("--seed") || a.config.empty())
        cfg.seed = g.seed;
    if (app.count("--threads") || a.config.empty())
        cfg.threads = g.threads;
    if (cfg.dataset.empty() || cfg.out_dir.empty())
        throw ConfigError("train needs --dataset and --out (or the same keys in --config)");
    cfg.validate();
    auto shown = train::to_json(cfg);
    shown["resolved_lr"] = cfg.learning_rate();
    shown["resolved_batch_size"] = cfg.resolved_batch_size();
    shown["resolved_loss"] = loss::to_string(cfg.loss_mode());
    print_config("train", shown);
    const auto r = train::train(cfg);
    std::cerr << "best epoch " << r.best_epoch << "  val_ssim " << r.best_val_ssim << "  wall "
              << r.total_wall_ms / 1000.0 << " s\n";
    return kOk;
}

struct RenderArgs {
    fs::path checkpoint, dataset, volume, out;
    std::string camera = "0";
    std::string res = "128x128";
    double s = 3.0;
    std::string background;
    bool jitter = false;
};

/// Dataset path stored in the checkpoint's training config.
fs::path checkpoint_dataset(const train::Checkpoint& ck)
{
    if (ck.config.contains("dataset"))
        return ck.config["dataset"].get<std::string>();
    return {};
}

int run_render(const RenderArgs& a, const Global& g)
{
    const auto ck = train::load_checkpoint(a.checkpoint);
    const fs::path dataset_file = a.dataset.empty() ? checkpoint_dataset(ck) : a.dataset;

    std::optional<train::DatasetManifest> data;
    if (!dataset_file.empty() && fs::exists(dataset_file))
        data = train::read_dataset(dataset_file);

    camera::Camera cam;
    const bool is_index = !a.camera.empty() && a.camera.find_first_not_of("0123456789") == std::string::npos;
    if (is_index) {
        if (!data)
            throw ConfigError("--camera <index> needs a dataset");
        const auto i = std::stoul(a.camera);
        if (i >= data->views.size())
            throw ConfigError("camera index out of range");
        cam = data->views[i].camera;
    } else {
        cam = camera::camera_from_json(read_json_file(a.camera));
    }

    fs::path volume_file = a.volume;
    if (volume_file.empty()) {
        if (!data)
            throw ConfigError("render needs --volume or a dataset");
        volume_file = data->resolve(data->volume);
    }

    dvr::RenderConfig rc;
    std::tie(rc.width, rc.height) = parse_res(a.res);
    rc.sampling_rate = a.s;
    rc.jitter = a.jitter;
    rc.seed = g.seed;
    rc.threads = g.threads;
    rc.background = !a.background.empty() ? parse_color(a.background)
                    : data                ? data->background
                                          : std::vector<double>{0.0, 0.0, 0.0};
    print_config("render", {{"checkpoint", a.checkpoint.string()},
                            {"volume", volume_file.string()},
                            {"camera", camera::camera_to_json(cam)},
                            {"res", a.res},
                            {"s", rc.sampling_rate},
                            {"jitter", rc.jitter},
                            {"background", rc.background},
                            {"seed", rc.seed},
                            {"threads", rc.threads},
                            {"out", a.out.string()}});
    const auto vol = grid::load_volume(volume_file);
    const auto img = ck.model.render(vol, cam, rc);
    write_output(img, a.out);
    std::cerr << "wrote " << a.out.string() << "\n";
    return kOk;
}

struct GradcheckArgs {
    std::string scene = "tiny";
    std::string model = "all";
    double eps = 1e-5;
    int seeds = 1;
};

int run_gradcheck(const GradcheckArgs& a, const Global& g)
{
    if (a.scene != "tiny")
        throw ConfigError("only --scene tiny is available");
    std::vector<train::ModelKind> kinds;
    if (a.model == "all")
        kinds = {train::ModelKind::lookup, train::ModelKind::mlp_tf, train::ModelKind::latent};
    else
        kinds = {train::model_kind_from_string(a.model)};
    print_config("gradcheck",
                 {{"scene", a.scene}, {"model", a.model}, {"eps", a.eps}, {"seed", g.seed}, {"seeds", a.seeds}});
    constexpr double tolerance = 1e-4;
    bool ok = true;
    for (auto k : kinds)
        for (int i = 0; i < a.seeds; ++i) {
            const auto seed = g.seed + static_cast<std::uint64_t>(i);
            const auto rep = train::gradcheck_tiny(k, seed, a.eps);
            const bool pass = rep.max_rel_error < tolerance && rep.checked > 0;
            ok = ok && pass;
            std::cout << std::left << std::setw(8) << train::to_string(k) << " seed " << seed << "  max_rel_error "
                      << std::scientific << std::setprecision(3) << rep.max_rel_error << std::defaultfloat
                      << "  checked " << rep.checked << "  kinks " << rep.excluded.size() << "  "
                      << (pass ? "PASS" : "FAIL") << "\n";
        }
    return ok ? kOk : kCheckFailed;
}

struct EvalArgs {
    fs::path checkpoint, dataset, report;
    std::string split = "test";
    double s = 3.0;
};

int run_eval(const EvalArgs& a, const Global& g)
{
    const auto ck = train::load_checkpoint(a.checkpoint);
    const fs::path dataset_file = a.dataset.empty() ? checkpoint_dataset(ck) : a.dataset;
    if (dataset_file.empty() || !fs::exists(dataset_file))
        throw IoError("dataset not found: " + dataset_file.string());
    const auto data = train::read_dataset(dataset_file);
    const auto split = train::split_from_string(a.split);
    const fs::path report = a.report.empty()
                                ? a.checkpoint.parent_path() / ("eval_" + a.split + ".json")
                                : a.report;
    print_config("eval", {{"checkpoint", a.checkpoint.string()},
                          {"dataset", dataset_file.string()},
                          {"split", a.split},
                          {"s", a.s},
                          {"threads", g.threads},
                          {"report", report.string()}});
    const auto r = train::evaluate(ck.model, data, split, a.s, g.threads);
    std::cout << "view      ssim       mse\n";
    for (const auto& v : r.views)
        std::cout << std::setw(4) << v.view << "  " << std::fixed << std::setprecision(6) << v.ssim << "  "
                  << std::scientific << std::setprecision(3) << v.mse << std::defaultfloat << "\n";
    std::cout << "mean  " << std::fixed << std::setprecision(6) << r.mean_ssim << "  " << std::scientific
              << std::setprecision(3) << r.mean_mse << std::defaultfloat << "\n";
    if (report.has_parent_path())
        fs::create_directories(report.parent_path());
    std::ofstream(report) << train::to_json(r).dump(2) << "\n";
    return kOk;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Differentiable direct volume rendering"};
    app.require_subcommand(1);
    Global g;
    app.add_option("--threads", g.threads, "Worker threads (1 = fully deterministic)")->check(CLI::PositiveNumber);
    app.add_option("--seed", g.seed, "Seed for cameras, jitter and initialization");
    app.set_version_flag("--version", std::string("ddvr ") + DDVR_VERSION + " (C++" +
                                          std::to_string(__cplusplus / 100 % 100) + ", " __VERSION__ ")");

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth-volume", "Rasterize a phantom recipe to a raw volume + manifest");
    c_synth->add_option("--spec", synth.spec, "Recipe JSON")->required();
    c_synth->add_option("--out", synth.out, "Manifest path")->required();
    c_synth->add_option("--dims", synth.dims, "Voxels per axis")->check(CLI::PositiveNumber);
    c_synth->add_option("--dtype", synth.dtype, "u8, u16 or f32")->check(CLI::IsMember({"u8", "u16", "f32"}));

    MakeTfArgs mtf;
    auto* c_tf = app.add_subcommand("make-tf", "Write a ground-truth lookup transfer function");
    c_tf->add_option("--preset", mtf.preset, "three-shell");
    c_tf->add_option("--out", mtf.out, "Output JSON")->required();
    c_tf->add_option("--kappa-max", mtf.kappa_max);
    c_tf->add_flag("--csv", mtf.csv, "Also write the mapped table as CSV");

    DatasetArgs ds;
    auto* c_ds = app.add_subcommand("make-dataset", "Render ground-truth views");
    c_ds->add_option("--volume", ds.volume, "Volume manifest")->required();
    c_ds->add_option("--tf", ds.tf, "Ground-truth transfer function")->required();
    c_ds->add_option("--out", ds.out, "Output directory")->required();
    c_ds->add_option("--views", ds.views)->check(CLI::PositiveNumber);
    c_ds->add_option("--res", ds.res, "WxH");
    c_ds->add_option("--split", ds.split, "train/val[/test]");
    c_ds->add_option("--s-render", ds.s_render);
    c_ds->add_option("--radius", ds.radius, "Camera distance from the volume center");
    c_ds->add_option("--background", ds.background, "r,g,b");

    TrainArgs tr;
    auto* c_tr = app.add_subcommand("train", "Optimize a model against a dataset");
    c_tr->add_option("--model", tr.model)->check(CLI::IsMember({"lookup", "mlp-tf", "latent"}));
    c_tr->add_option("--config", tr.config, "Training config JSON; flags override it");
    c_tr->add_option("--dataset", tr.dataset);
    c_tr->add_option("--out", tr.out, "Output directory");
    auto* o_anneal = c_tr->add_option("--anneal", tr.anneal, "s_l:s_h");
    auto* o_s = c_tr->add_option("--s", tr.s, "Fixed sampling rate");
    o_anneal->excludes(o_s);
    c_tr->add_option("--jitter", tr.jitter)->check(CLI::IsMember({"on", "off"}));
    c_tr->add_option("--loss", tr.loss)->check(CLI::IsMember({"mse", "mse+ssim"}));
    c_tr->add_option("--epochs", tr.epochs)->check(CLI::PositiveNumber);
    c_tr->add_option("--lr", tr.lr);
    c_tr->add_option("--batch", tr.batch)->check(CLI::PositiveNumber);

    RenderArgs rd;
    auto* c_rd = app.add_subcommand("render", "Render a trained model from any camera at any resolution");
    c_rd->add_option("--checkpoint", rd.checkpoint)->required();
    c_rd->add_option("--camera", rd.camera, "Camera JSON or dataset view index");
    c_rd->add_option("--dataset", rd.dataset, "Defaults to the checkpoint's dataset");
    c_rd->add_option("--volume", rd.volume, "Defaults to the dataset's volume");
    c_rd->add_option("--res", rd.res, "WxH");
    c_rd->add_option("--s", rd.s);
    c_rd->add_option("--background", rd.background, "r,g,b");
    c_rd->add_flag("--jitter", rd.jitter);
    c_rd->add_option("--out", rd.out, ".png or .pfm")->required();

    GradcheckArgs gc;
    auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference check of every pipeline");
    c_gc->add_option("--scene", gc.scene, "tiny");
    c_gc->add_option("--model", gc.model, "all, lookup, mlp-tf or latent");
    c_gc->add_option("--eps", gc.eps);
    c_gc->add_option("--seeds", gc.seeds, "Scenes per model, starting at --seed")->check(CLI::PositiveNumber);

    EvalArgs ev;
    auto* c_ev = app.add_subcommand("eval", "Score a checkpoint on a dataset split");
    c_ev->add_option("--checkpoint", ev.checkpoint)->required();
    c_ev->add_option("--dataset", ev.dataset, "Defaults to the checkpoint's dataset");
    c_ev->add_option("--split", ev.split)->check(CLI::IsMember({"train", "val", "test"}));
    c_ev->add_option("--s", ev.s);
    c_ev->add_option("--report", ev.report, "JSON report path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*c_synth)
            return run_synth(synth);
        if (*c_tf)
            return run_make_tf(mtf);
        if (*c_ds)
            return run_make_dataset(ds, g);
        if (*c_tr)
            return run_train(tr, g, *c_tr, app);
        if (*c_rd)
            return run_render(rd, g);
        if (*c_gc)
            return run_gradcheck(gc, g);
        if (*c_ev)
            return run_eval(ev, g);
    } catch (const NumericalAbort& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return kNumerical;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kCheckFailed;
    }
    return kUsage;
}
