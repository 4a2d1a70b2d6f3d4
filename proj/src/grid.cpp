#include "ddvr/grid.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "ddvr/error.hpp"

namespace ddvr::grid {

namespace fs = std::filesystem;
using nlohmann::json;

GridGeometry::GridGeometry(Dims3 dims, std::array<double, 3> spacing)
    : dims_(dims), spacing_(spacing)
{
    if (dims.nx == 0 || dims.ny == 0 || dims.nz == 0)
        throw ShapeError("volume dims must be positive");
    double longest = 0.0;
    for (int a = 0; a < 3; ++a) {
        if (!(spacing[a] > 0.0))
            throw ShapeError("volume spacing must be strictly positive");
        longest = std::max(longest, static_cast<double>(dims[a]) * spacing[a]);
    }
    for (int a = 0; a < 3; ++a) {
        voxel_[a] = spacing[a] / longest;
        half_extent_[a] = 0.5 * static_cast<double>(dims[a]) * voxel_[a];
    }
}

double GridGeometry::min_voxel() const
{
    return std::min({voxel_[0], voxel_[1], voxel_[2]});
}

Box GridGeometry::bbox() const
{
    return {{-half_extent_[0], -half_extent_[1], -half_extent_[2]},
            {half_extent_[0], half_extent_[1], half_extent_[2]}};
}

Vec3 GridGeometry::voxel_center(std::size_t i, std::size_t j, std::size_t k) const
{
    return {-half_extent_[0] + (static_cast<double>(i) + 0.5) * voxel_[0],
            -half_extent_[1] + (static_cast<double>(j) + 0.5) * voxel_[1],
            -half_extent_[2] + (static_cast<double>(k) + 0.5) * voxel_[2]};
}

GridGeometry::Corners GridGeometry::corners(const Vec3& x) const
{
    std::array<std::size_t, 3> i0{}, i1{};
    std::array<double, 3> f{};
    for (int a = 0; a < 3; ++a) {
        const std::size_t n = dims_[a];
        double g = (x[a] + half_extent_[a]) / voxel_[a] - 0.5;
        g = std::clamp(g, 0.0, static_cast<double>(n - 1));
        std::size_t lo = static_cast<std::size_t>(g);
        if (n == 1) {
            i0[a] = i1[a] = 0;
            f[a] = 0.0;
            continue;
        }
        if (lo > n - 2)
            lo = n - 2;
        i0[a] = lo;
        i1[a] = lo + 1;
        f[a] = g - static_cast<double>(lo);
    }
    Corners c{};
    int n = 0;
    for (int dz = 0; dz < 2; ++dz) {
        const std::size_t k = dz ? i1[2] : i0[2];
        const double wz = dz ? f[2] : 1.0 - f[2];
        for (int dy = 0; dy < 2; ++dy) {
            const std::size_t j = dy ? i1[1] : i0[1];
            const double wy = dy ? f[1] : 1.0 - f[1];
            for (int dx = 0; dx < 2; ++dx) {
                const std::size_t i = dx ? i1[0] : i0[0];
                const double wx = dx ? f[0] : 1.0 - f[0];
                c.voxel[n] = (k * dims_.ny + j) * dims_.nx + i;
                c.weight[n] = wx * wy * wz;
                ++n;
            }
        }
    }
    return c;
}

Volume3D::Volume3D(Dims3 dims, std::array<double, 3> spacing, std::size_t ch)
    : geometry(dims, spacing), channels(ch), data(dims.count() * ch, 0.0)
{
    if (ch == 0)
        throw ShapeError("volume needs at least one channel");
}

std::string to_string(ScalarType t)
{
    switch (t) {
    case ScalarType::u8: return "u8";
    case ScalarType::u16: return "u16";
    case ScalarType::f32: return "f32";
    }
    return "?";
}

ScalarType scalar_type_from_string(const std::string& s)
{
    if (s == "u8")
        return ScalarType::u8;
    if (s == "u16")
        return ScalarType::u16;
    if (s == "f32")
        return ScalarType::f32;
    throw FormatError("unknown volume dtype '" + s + "'");
}

std::size_t element_size(ScalarType t)
{
    switch (t) {
    case ScalarType::u8: return 1;
    case ScalarType::u16: return 2;
    case ScalarType::f32: return 4;
    }
    return 0;
}

json manifest_to_json(const VolumeManifest& m)
{
    json j{{"path", m.path.generic_string()},
           {"dims", {m.dims.nx, m.dims.ny, m.dims.nz}},
           {"spacing", m.spacing},
           {"dtype", to_string(m.dtype)},
           {"channels", m.channels}};
    if (m.window)
        j["window"] = *m.window;
    return j;
}

VolumeManifest manifest_from_json(const json& j)
{
    VolumeManifest m;
    try {
        m.path = j.at("path").get<std::string>();
        auto d = j.at("dims").get<std::vector<std::size_t>>();
        if (d.size() != 3)
            throw ManifestError("manifest dims must have 3 entries");
        m.dims = {d[0], d[1], d[2]};
        if (j.contains("spacing"))
            m.spacing = j.at("spacing").get<std::array<double, 3>>();
        m.dtype = scalar_type_from_string(j.at("dtype").get<std::string>());
        m.channels = j.value("channels", std::size_t{1});
        if (j.contains("window") && !j.at("window").is_null())
            m.window = j.at("window").get<std::array<double, 2>>();
    } catch (const json::exception& e) {
        throw ManifestError(std::string("malformed volume manifest: ") + e.what());
    }
    return m;
}

VolumeManifest read_manifest(const fs::path& file)
{
    std::ifstream in(file);
    if (!in)
        throw IoError("cannot open volume manifest " + file.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw FormatError("volume manifest " + file.string() + ": " + e.what());
    }
    auto m = manifest_from_json(j);
    if (m.path.is_relative())
        m.path = file.parent_path() / m.path;
    return m;
}

void write_manifest(const VolumeManifest& m, const fs::path& file)
{
    std::ofstream out(file);
    if (!out)
        throw IoError("cannot write " + file.string());
    auto j = manifest_to_json(m);
    // keep the raw path relative when it lives next to the manifest
    if (m.path.parent_path() == file.parent_path())
        j["path"] = m.path.filename().generic_string();
    out << j.dump(2) << "\n";
}

namespace {

std::array<double, 2> effective_window(const VolumeManifest& m)
{
    if (m.window)
        return *m.window;
    switch (m.dtype) {
    case ScalarType::u8: return {0.0, 255.0};
    case ScalarType::u16: return {0.0, 65535.0};
    case ScalarType::f32: return {0.0, 1.0};
    }
    return {0.0, 1.0};
}

// Raw files are little-endian; this build assumes a little-endian host.
static_assert(std::endian::native == std::endian::little);

} // namespace

Volume3D load_volume(const VolumeManifest& m)
{
    const std::size_t esize = element_size(m.dtype);
    const std::size_t count = m.dims.count() * m.channels;
    std::error_code ec;
    const auto fsize = fs::file_size(m.path, ec);
    if (ec)
        throw ManifestError("volume file " + m.path.string() + " not readable: " + ec.message());
    if (fsize != count * esize)
        throw ManifestError("volume file " + m.path.string() + " has " + std::to_string(fsize) +
                            " bytes, manifest expects " + std::to_string(count * esize));
    std::ifstream in(m.path, std::ios::binary);
    std::vector<char> raw(fsize);
    if (!in.read(raw.data(), static_cast<std::streamsize>(fsize)))
        throw IoError("short read on " + m.path.string());

    const auto [lo, hi] = effective_window(m);
    if (!(hi > lo))
        throw ManifestError("intensity window must satisfy lo < hi");
    const double inv = 1.0 / (hi - lo);

    Volume3D vol(m.dims, m.spacing, m.channels);
    for (std::size_t i = 0; i < count; ++i) {
        double v = 0.0;
        switch (m.dtype) {
        case ScalarType::u8: v = static_cast<unsigned char>(raw[i]); break;
        case ScalarType::u16: {
            std::uint16_t u;
            std::memcpy(&u, raw.data() + 2 * i, 2);
            v = u;
            break;
        }
        case ScalarType::f32: {
            float f;
            std::memcpy(&f, raw.data() + 4 * i, 4);
            v = f;
            break;
        }
        }
        vol.data[i] = std::clamp((v - lo) * inv, 0.0, 1.0);
    }
    vol.window = std::array<double, 2>{lo, hi};
    return vol;
}

Volume3D load_volume(const fs::path& manifest_file)
{
    return load_volume(read_manifest(manifest_file));
}

void save_volume(const Volume3D& vol, const VolumeManifest& m)
{
    if (!(m.dims == vol.dims()) || m.channels != vol.channels)
        throw ManifestError("manifest shape does not match volume");
    const auto [lo, hi] = effective_window(m);
    const std::size_t esize = element_size(m.dtype);
    std::vector<char> raw(vol.data.size() * esize);
    for (std::size_t i = 0; i < vol.data.size(); ++i) {
        const double v = lo + vol.data[i] * (hi - lo);
        switch (m.dtype) {
        case ScalarType::u8: {
            const auto u = static_cast<unsigned char>(std::clamp(std::lround(v), 0L, 255L));
            raw[i] = static_cast<char>(u);
            break;
        }
        case ScalarType::u16: {
            const auto u = static_cast<std::uint16_t>(std::clamp(std::lround(v), 0L, 65535L));
            std::memcpy(raw.data() + 2 * i, &u, 2);
            break;
        }
        case ScalarType::f32: {
            const auto f = static_cast<float>(v);
            std::memcpy(raw.data() + 4 * i, &f, 4);
            break;
        }
        }
    }
    if (m.path.has_parent_path())
        fs::create_directories(m.path.parent_path());
    std::ofstream out(m.path, std::ios::binary);
    if (!out.write(raw.data(), static_cast<std::streamsize>(raw.size())))
        throw IoError("cannot write " + m.path.string());
}

void sample_trilinear(const GridGeometry& g, std::span<const double> data, std::size_t channels,
                      const Vec3& x, std::span<double> out)
{
    const auto c = g.corners(x);
    std::fill(out.begin(), out.end(), 0.0);
    for (int n = 0; n < 8; ++n) {
        const double* v = data.data() + c.voxel[n] * channels;
        for (std::size_t ch = 0; ch < channels; ++ch)
            out[ch] += c.weight[n] * v[ch];
    }
}

std::vector<double> sample_trilinear(const Volume3D& vol, const Vec3& x)
{
    std::vector<double> out(vol.channels);
    sample_trilinear(vol.geometry, vol.data, vol.channels, x, out);
    return out;
}

Vec3 gradient_central(const Volume3D& vol, const Vec3& x)
{
    if (vol.channels != 1)
        throw ShapeError("gradient_central expects a single-channel volume");
    Vec3 g;
    double lo = 0.0, hi = 0.0;
    for (int a = 0; a < 3; ++a) {
        const double h = vol.geometry.voxel()[a];
        Vec3 xp = x, xm = x;
        xp[a] += h;
        xm[a] -= h;
        sample_trilinear(vol.geometry, vol.data, 1, xp, {&hi, 1});
        sample_trilinear(vol.geometry, vol.data, 1, xm, {&lo, 1});
        g[a] = (hi - lo) / (2.0 * h);
    }
    return g;
}

// -- phantoms ---------------------------------------------------------------

namespace {

Vec3 vec_from_json(const json& j)
{
    auto a = j.get<std::array<double, 3>>();
    return {a[0], a[1], a[2]};
}

double signed_distance(const Primitive& p, const Vec3& x)
{
    const Vec3 d = x - p.center;
    switch (p.kind) {
    case PrimitiveKind::sphere: return length(d) - p.radius;
    case PrimitiveKind::shell: return std::abs(length(d) - p.radius) - 0.5 * p.thickness;
    case PrimitiveKind::box: {
        Vec3 q;
        for (int a = 0; a < 3; ++a)
            q[a] = std::abs(d[a]) - 0.5 * p.size[a];
        const Vec3 qpos{std::max(q.x, 0.0), std::max(q.y, 0.0), std::max(q.z, 0.0)};
        return length(qpos) + std::min(std::max({q.x, q.y, q.z}), 0.0);
    }
    }
    return 1.0;
}

} // namespace

SceneRecipe recipe_from_json(const json& j)
{
    SceneRecipe r;
    try {
        r.channels = j.value("channels", std::size_t{1});
        for (const auto& pj : j.at("primitives")) {
            Primitive p;
            const auto type = pj.at("type").get<std::string>();
            if (type == "sphere")
                p.kind = PrimitiveKind::sphere;
            else if (type == "shell")
                p.kind = PrimitiveKind::shell;
            else if (type == "box")
                p.kind = PrimitiveKind::box;
            else
                throw FormatError("unknown primitive type '" + type + "'");
            if (pj.contains("center"))
                p.center = vec_from_json(pj.at("center"));
            p.radius = pj.value("radius", p.radius);
            p.thickness = pj.value("thickness", p.thickness);
            if (pj.contains("size"))
                p.size = vec_from_json(pj.at("size"));
            if (pj.contains("value"))
                p.value = pj.at("value").get<std::vector<double>>();
            else
                p.value = {pj.value("intensity", 1.0)};
            const auto blend = pj.value("blend", std::string("replace"));
            if (blend == "add")
                p.blend = Blend::add;
            else if (blend == "replace")
                p.blend = Blend::replace;
            else
                throw FormatError("unknown blend mode '" + blend + "'");
            r.primitives.push_back(std::move(p));
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed scene recipe: ") + e.what());
    }
    return r;
}

json recipe_to_json(const SceneRecipe& r)
{
    json prims = json::array();
    for (const auto& p : r.primitives) {
        json pj;
        pj["type"] = p.kind == PrimitiveKind::sphere ? "sphere" : (p.kind == PrimitiveKind::shell ? "shell" : "box");
        pj["center"] = to_array(p.center);
        if (p.kind == PrimitiveKind::box)
            pj["size"] = to_array(p.size);
        else
            pj["radius"] = p.radius;
        if (p.kind == PrimitiveKind::shell)
            pj["thickness"] = p.thickness;
        pj["value"] = p.value;
        pj["blend"] = p.blend == Blend::add ? "add" : "replace";
        prims.push_back(std::move(pj));
    }
    return json{{"channels", r.channels}, {"primitives", prims}};
}

Volume3D synth_volume(const SceneRecipe& recipe, Dims3 dims, std::array<double, 3> spacing)
{
    if (recipe.primitives.empty())
        throw ConfigError("scene recipe has no primitives");
    for (const auto& p : recipe.primitives)
        if (p.value.size() != recipe.channels)
            throw ShapeError("primitive value length does not match recipe channels");

    Volume3D vol(dims, spacing, recipe.channels);
    const double h = vol.geometry.min_voxel();
    const std::size_t ch = recipe.channels;
    for (std::size_t k = 0; k < dims.nz; ++k)
        for (std::size_t j = 0; j < dims.ny; ++j)
            for (std::size_t i = 0; i < dims.nx; ++i) {
                const Vec3 x = vol.geometry.voxel_center(i, j, k);
                double* v = vol.data.data() + vol.index(i, j, k) * ch;
                for (const auto& p : recipe.primitives) {
                    const double cover = std::clamp(0.5 - signed_distance(p, x) / h, 0.0, 1.0);
                    if (cover == 0.0)
                        continue;
                    for (std::size_t c = 0; c < ch; ++c) {
                        if (p.blend == Blend::add)
                            v[c] += cover * p.value[c];
                        else
                            v[c] += cover * (p.value[c] - v[c]);
                    }
                }
            }
    if (ch == 1)
        for (auto& v : vol.data)
            v = std::clamp(v, 0.0, 1.0);
    return vol;
}

SceneRecipe three_shell_recipe()
{
    SceneRecipe r;
    auto shell = [](double radius, double thickness, double intensity) {
        Primitive p;
        p.kind = PrimitiveKind::shell;
        p.radius = radius;
        p.thickness = thickness;
        p.value = {intensity};
        return p;
    };
    r.primitives = {shell(0.40, 0.10, 0.3), shell(0.26, 0.10, 0.6), shell(0.12, 0.12, 0.9)};
    return r;
}

} // namespace ddvr::grid
