#include "ddvr/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "ddvr/error.hpp"
#include "ddvr/grid.hpp"
#include "ddvr/tf.hpp"

namespace ddvr::train {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {
constexpr int kDatasetVersion = 1;
}

std::string to_string(Split s)
{
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "?";
}

Split split_from_string(const std::string& s)
{
    if (s == "train")
        return Split::train;
    if (s == "val")
        return Split::val;
    if (s == "test")
        return Split::test;
    throw ConfigError("unknown split '" + s + "'");
}

std::vector<std::size_t> DatasetManifest::indices(Split s) const
{
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < views.size(); ++i)
        if (views[i].split == s)
            out.push_back(i);
    return out;
}

image::ImageF DatasetManifest::load_image(std::size_t i) const
{
    auto img = image::read_pfm(resolve(views.at(i).image));
    if (img.width != width || img.height != height || img.channels != 3)
        throw ShapeError("view " + std::to_string(i) + " does not match the dataset resolution");
    return img;
}

json to_json(const DatasetManifest& d)
{
    json views = json::array();
    for (const auto& v : d.views)
        views.push_back({{"camera", camera::camera_to_json(v.camera)},
                         {"image", v.image.generic_string()},
                         {"alpha", v.alpha.generic_string()},
                         {"png", v.png.generic_string()},
                         {"split", to_string(v.split)}});
    return json{{"version", kDatasetVersion},
                {"volume", d.volume.generic_string()},
                {"background", d.background},
                {"width", d.width},
                {"height", d.height},
                {"tf", d.tf.generic_string()},
                {"s_render", d.s_render},
                {"seed", d.seed},
                {"views", std::move(views)}};
}

DatasetManifest dataset_from_json(const json& j, const fs::path& root)
{
    DatasetManifest d;
    d.root = root;
    try {
        if (j.at("version").get<int>() != kDatasetVersion)
            throw FormatError("unsupported dataset manifest version");
        d.volume = j.at("volume").get<std::string>();
        d.background = j.at("background").get<std::vector<double>>();
        d.width = j.at("width").get<int>();
        d.height = j.at("height").get<int>();
        d.tf = j.value("tf", std::string());
        d.s_render = j.value("s_render", 3.0);
        d.seed = j.value("seed", std::uint64_t{0});
        for (const auto& v : j.at("views")) {
            View view;
            view.camera = camera::camera_from_json(v.at("camera"));
            view.camera.aspect = static_cast<double>(d.width) / d.height;
            view.image = v.at("image").get<std::string>();
            view.alpha = v.value("alpha", std::string());
            view.png = v.value("png", std::string());
            view.split = split_from_string(v.at("split").get<std::string>());
            d.views.push_back(std::move(view));
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed dataset manifest: ") + e.what());
    }
    if (d.width < 1 || d.height < 1)
        throw FormatError("dataset resolution must be positive");
    return d;
}

DatasetManifest read_dataset(const fs::path& file)
{
    std::ifstream in(file);
    if (!in)
        throw IoError("cannot open dataset manifest " + file.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw FormatError(file.string() + ": " + e.what());
    }
    return dataset_from_json(j, file.parent_path());
}

void write_dataset(const DatasetManifest& d, const fs::path& file)
{
    if (file.has_parent_path())
        fs::create_directories(file.parent_path());
    std::ofstream out(file);
    if (!out)
        throw IoError("cannot write " + file.string());
    out << to_json(d).dump(1) << "\n";
}

tf::LookupTF three_shell_tf(ad::ParamStore& store, double kappa_max, const std::string& prefix)
{
    struct Bump {
        double center;
        double rgb[3];
        double kappa;
    };
    const Bump bumps[] = {{0.3, {0.95, 0.35, 0.2}, 2.0}, {0.6, {0.3, 0.9, 0.35}, 5.0}, {0.9, {0.4, 0.55, 1.0}, 25.0}};
    const double half_width = 0.06;
    std::vector<double> rgb(tf::kLookupBins * 3, 0.0), kappa(tf::kLookupBins, 0.0);
    for (std::size_t i = 0; i < tf::kLookupBins; ++i) {
        const double u = static_cast<double>(i) / 255.0;
        for (const auto& b : bumps) {
            const double w = 1.0 - std::abs(u - b.center) / half_width;
            if (w <= 0.0)
                continue;
            for (int c = 0; c < 3; ++c)
                rgb[i * 3 + c] = b.rgb[c];
            kappa[i] = b.kappa * w;
        }
    }
    return tf::LookupTF::from_mapped(store, rgb, kappa, kappa_max, prefix);
}

std::vector<int> parse_split(const std::string& s)
{
    std::vector<int> parts;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, '/')) {
        try {
            std::size_t used = 0;
            const int v = std::stoi(tok, &used);
            if (used != tok.size() || v < 0)
                throw ConfigError("");
            parts.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError("split must look like A/B or A/B/C, got '" + s + "'");
        }
    }
    if (parts.size() < 2 || parts.size() > 3)
        throw ConfigError("split must look like A/B or A/B/C, got '" + s + "'");
    return parts;
}

DatasetManifest make_dataset(const DatasetSpec& spec, const GroundTruth& render)
{
    int total = 0;
    for (int n : spec.split)
        total += n;
    if (spec.split.empty() || spec.split.size() > 3 || total != spec.views)
        throw ConfigError("split sizes must sum to the number of views");
    if (spec.width < 1 || spec.height < 1)
        throw ConfigError("resolution must be positive");

    // Spiral positions are shuffled so every split covers the whole sphere.
    auto cams = camera::sphere_views(spec.views, spec.camera_radius, spec.seed);
    std::vector<Split> splits(static_cast<std::size_t>(spec.views));
    std::size_t k = 0;
    for (std::size_t s = 0; s < spec.split.size(); ++s)
        for (int n = 0; n < spec.split[s]; ++n)
            splits[k++] = static_cast<Split>(s);
    std::mt19937_64 rng(spec.seed);
    for (std::size_t i = splits.size(); i > 1; --i)
        std::swap(splits[i - 1], splits[rng() % i]);

    DatasetManifest d;
    d.volume = fs::absolute(spec.volume_manifest);
    d.background = spec.background;
    d.width = spec.width;
    d.height = spec.height;
    d.tf = spec.tf_file.empty() ? fs::path() : fs::absolute(spec.tf_file);
    d.s_render = spec.s_render;
    d.seed = spec.seed;
    d.root = spec.out_dir;

    dvr::RenderConfig cfg;
    cfg.sampling_rate = spec.s_render;
    cfg.width = spec.width;
    cfg.height = spec.height;
    cfg.background = spec.background;
    cfg.seed = spec.seed;
    cfg.threads = spec.threads;

    for (int i = 0; i < spec.views; ++i) {
        View v;
        v.camera = cams[static_cast<std::size_t>(i)];
        v.camera.aspect = static_cast<double>(spec.width) / spec.height;
        v.split = splits[static_cast<std::size_t>(i)];
        char stem[32];
        std::snprintf(stem, sizeof stem, "views/view_%03d", i);
        v.image = std::string(stem) + ".pfm";
        v.alpha = std::string(stem) + "_alpha.pfm";
        v.png = std::string(stem) + ".png";
        const auto rgba = render(v.camera, cfg);
        image::write_pfm(image::channels_of(rgba, 0, 3), d.resolve(v.image));
        image::write_pfm(image::channels_of(rgba, 3, 1), d.resolve(v.alpha));
        image::write_png(rgba, d.resolve(v.png));
        d.views.push_back(std::move(v));
    }
    write_dataset(d, spec.out_dir / "dataset.json");
    return d;
}

DatasetManifest make_dataset(const DatasetSpec& spec)
{
    const auto vol = grid::load_volume(spec.volume_manifest);
    if (vol.channels != 1)
        throw ConfigError("ground-truth rendering needs a single-channel volume");
    ad::ParamStore store;
    const auto any = tf::tf_load(spec.tf_file, store, "gt");
    std::unique_ptr<dvr::Classifier> cls;
    if (const auto* l = std::get_if<tf::LookupTF>(&any))
        cls = std::make_unique<dvr::LookupClassifier>(*l, store);
    else
        cls = std::make_unique<dvr::MlpClassifier>(std::get<tf::MlpTF>(any), store);
    const dvr::Scene scene{&vol.geometry, vol.data, 1, cls.get()};
    return make_dataset(spec, [&](const camera::Camera& cam, const dvr::RenderConfig& cfg) {
        return dvr::render(scene, cam, cfg);
    });
}

} // namespace ddvr::train
