#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ddvr/camera.hpp"
#include "ddvr/dvr.hpp"
#include "ddvr/image.hpp"
#include "ddvr/tf.hpp"

namespace ddvr::train {

enum class Split { train, val, test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct View {
    camera::Camera camera;
    std::filesystem::path image; // RGB PFM
    std::filesystem::path alpha; // 1-channel PFM
    std::filesystem::path png;   // RGBA preview
    Split split = Split::train;
};

/// Image set rendered from a ground-truth transfer function.
///
/// Paths are stored relative to the manifest and resolved against `root`.
struct DatasetManifest {
    std::filesystem::path volume;
    std::vector<double> background{0.0, 0.0, 0.0};
    int width = 128;
    int height = 128;
    std::filesystem::path tf;
    double s_render = 3.0;
    std::uint64_t seed = 0;
    std::vector<View> views;
    std::filesystem::path root;

    std::filesystem::path resolve(const std::filesystem::path& p) const { return p.is_absolute() ? p : root / p; }
    std::vector<std::size_t> indices(Split s) const;
    /// Ground-truth RGB image of view i.
    image::ImageF load_image(std::size_t i) const;
};

nlohmann::json to_json(const DatasetManifest& d);
DatasetManifest dataset_from_json(const nlohmann::json& j, const std::filesystem::path& root);
DatasetManifest read_dataset(const std::filesystem::path& file);
void write_dataset(const DatasetManifest& d, const std::filesystem::path& file);

struct DatasetSpec {
    std::filesystem::path volume_manifest;
    std::filesystem::path tf_file;
    int views = 32;
    double camera_radius = 1.6;
    int width = 128;
    int height = 128;
    double s_render = 3.0;
    /// Views per split in the order train, val, test; must sum to `views`.
    std::vector<int> split{25, 7};
    std::vector<double> background{0.0, 0.0, 0.0};
    std::uint64_t seed = 0;
    int threads = 1;
    std::filesystem::path out_dir;
};

/// Ground-truth table for grid::three_shell_recipe(): a tent of opacity around
/// each shell intensity (0.3 red, 0.6 green, 0.9 blue), transparent black elsewhere.
tf::LookupTF three_shell_tf(ad::ParamStore& store, double kappa_max = tf::kDefaultKappaMax,
                            const std::string& prefix = "gt");

/// Parses "A/B" or "A/B/C".
std::vector<int> parse_split(const std::string& s);

/// Renders RGBA ground truth for one view.
using GroundTruth = std::function<image::ImageF(const camera::Camera&, const dvr::RenderConfig&)>;

/// Renders every view with the transfer function in spec.tf_file (no jitter,
/// early termination on) and writes images plus out_dir/dataset.json.
DatasetManifest make_dataset(const DatasetSpec& spec);
DatasetManifest make_dataset(const DatasetSpec& spec, const GroundTruth& render);

} // namespace ddvr::train
