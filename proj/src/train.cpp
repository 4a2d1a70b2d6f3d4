#include "ddvr/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>

#include "ddvr/error.hpp"
#include "ddvr/grid.hpp"

namespace ddvr::train {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kCheckpointVersion = 1;

double ms_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

std::string parameter_stats(const ad::ParamStore& store)
{
    std::ostringstream os;
    for (std::size_t b = 0; b < store.block_count(); ++b) {
        const auto v = store.value(b);
        const auto g = store.grad(b);
        std::size_t bad = 0;
        double lo = std::numeric_limits<double>::infinity(), hi = -lo, gmax = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!std::isfinite(v[i]) || !std::isfinite(g[i])) {
                ++bad;
                continue;
            }
            lo = std::min(lo, v[i]);
            hi = std::max(hi, v[i]);
            gmax = std::max(gmax, std::abs(g[i]));
        }
        os << "  " << store.name(b) << ": n=" << v.size() << " min=" << lo << " max=" << hi << " |grad|max=" << gmax
           << " non-finite=" << bad << "\n";
    }
    return os.str();
}

void write_lines(const std::vector<EpochMetrics>& log, const fs::path& file)
{
    std::ofstream out(file);
    if (!out)
        throw IoError("cannot write " + file.string());
    for (const auto& m : log)
        out << to_json(m).dump() << "\n";
}

} // namespace

// -- config ---------------------------------------------------------------------------

void TrainConfig::validate() const
{
    if (epochs < 1)
        throw ConfigError("epochs must be at least 1");
    if (annealed) {
        if (!(s_low > 0.0 && s_low <= s_high))
            throw ConfigError("annealing needs 0 < s_low <= s_high");
    } else if (!(s > 0.0)) {
        throw ConfigError("sampling rate must be positive");
    }
}

double TrainConfig::learning_rate() const
{
    if (lr > 0.0)
        return lr;
    switch (model.kind) {
    case ModelKind::lookup: return 0.3;
    case ModelKind::mlp_tf: return 0.05;
    case ModelKind::latent: return 0.003;
    }
    return 0.0;
}

loss::LossMode TrainConfig::loss_mode() const
{
    if (loss)
        return *loss;
    return model.kind == ModelKind::latent ? loss::LossMode::mse_ssim : loss::LossMode::mse;
}

int TrainConfig::resolved_batch_size() const
{
    return batch_size > 0 ? batch_size : batch_size_preset(annealed ? s_high : s);
}

json to_json(const TrainConfig& c)
{
    json j{{"model", to_json(c.model)},
           {"epochs", c.epochs},
           {"lr", c.learning_rate()},
           {"batch_size", c.resolved_batch_size()},
           {"annealed", c.annealed},
           {"s", c.s},
           {"s_low", c.s_low},
           {"s_high", c.s_high},
           {"jitter", c.jitter},
           {"loss", loss::to_string(c.loss_mode())},
           {"seed", c.seed},
           {"threads", c.threads},
           {"dataset", c.dataset.generic_string()},
           {"out_dir", c.out_dir.generic_string()}};
    return j;
}

TrainConfig train_config_from_json(const json& j, TrainConfig c)
{
    try {
        if (j.contains("model")) {
            if (j["model"].is_string())
                c.model.kind = model_kind_from_string(j["model"].get<std::string>());
            else
                c.model = model_config_from_json(j["model"]);
        }
        c.epochs = j.value("epochs", c.epochs);
        c.lr = j.value("lr", c.lr);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.annealed = j.value("annealed", c.annealed);
        c.s = j.value("s", c.s);
        c.s_low = j.value("s_low", c.s_low);
        c.s_high = j.value("s_high", c.s_high);
        c.jitter = j.value("jitter", c.jitter);
        if (j.contains("loss"))
            c.loss = loss::loss_mode_from_string(j["loss"].get<std::string>());
        c.seed = j.value("seed", c.seed);
        c.threads = j.value("threads", c.threads);
        if (j.contains("dataset"))
            c.dataset = j["dataset"].get<std::string>();
        if (j.contains("out_dir"))
            c.out_dir = j["out_dir"].get<std::string>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed training config: ") + e.what());
    }
    return c;
}

double annealed_sampling_rate(int e, int epochs, double s_low, double s_high)
{
    const double r = static_cast<double>(e) / static_cast<double>(epochs);
    const double q = r * r;
    return s_low * (1.0 - q) + q * s_high;
}

int batch_size_preset(double s)
{
    static constexpr double rates[] = {0.25, 0.5, 1.0, 2.0, 3.0};
    static constexpr int sizes[] = {12, 6, 3, 2, 1};
    for (int i = 0; i < 5; ++i)
        if (s <= rates[i])
            return sizes[i];
    return 1;
}

// -- Adam -----------------------------------------------------------------------------

AdamState::AdamState(const ad::ParamStore& store)
{
    for (std::size_t b = 0; b < store.block_count(); ++b) {
        m.emplace_back(store.value(b).size(), 0.0);
        v.emplace_back(store.value(b).size(), 0.0);
    }
}

void adam_step(AdamState& st, ad::ParamStore& store, double lr)
{
    if (st.m.size() != store.block_count())
        st = AdamState(store);
    ++st.step;
    const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (std::size_t b = 0; b < store.block_count(); ++b) {
        auto x = store.value(b);
        auto g = store.grad(b);
        auto& m = st.m[b];
        auto& v = st.v[b];
        for (std::size_t i = 0; i < x.size(); ++i) {
            m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g[i];
            v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g[i] * g[i];
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            x[i] -= lr * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
    store.zero_grad();
}

// -- training -------------------------------------------------------------------------

json to_json(const EpochMetrics& m)
{
    return json{{"epoch", m.epoch},       {"train_loss", m.train_loss}, {"val_ssim", m.val_ssim},
                {"val_mse", m.val_mse},   {"s", m.s},                   {"wall_ms", m.wall_ms}};
}

TrainResult train(const TrainConfig& cfg, const DatasetManifest& data, Model& model,
                  const std::function<void(const EpochMetrics&)>& on_epoch)
{
    cfg.validate();
    const auto vol = grid::load_volume(data.resolve(data.volume));
    const auto train_idx = data.indices(Split::train);
    const auto val_idx = data.indices(Split::val);
    if (train_idx.empty())
        throw ConfigError("dataset has no training views");
    if (val_idx.empty())
        throw ConfigError("dataset has no validation views");
    if (data.background.size() != 3)
        throw ConfigError("dataset background must be RGB");

    std::vector<image::ImageF> targets(data.views.size());
    for (auto i : train_idx)
        targets[i] = data.load_image(i);
    for (auto i : val_idx)
        targets[i] = data.load_image(i);

    auto& store = model.store();
    store.zero_grad();
    AdamState adam(store);
    const double lr = cfg.learning_rate();
    const auto mode = cfg.loss_mode();
    const int batch = cfg.resolved_batch_size();
    std::mt19937_64 rng(cfg.seed);
    std::uint64_t pass = 0;

    TrainResult result;
    std::vector<std::vector<double>> best_params;
    auto snapshot = [&] {
        best_params.clear();
        for (std::size_t b = 0; b < store.block_count(); ++b)
            best_params.emplace_back(store.value(b).begin(), store.value(b).end());
    };

    ad::Tape tape;
    std::vector<std::size_t> order = train_idx;
    for (int e = 0; e < cfg.epochs; ++e) {
        const auto t0 = std::chrono::steady_clock::now();
        const double s = cfg.annealed ? annealed_sampling_rate(e, cfg.epochs, cfg.s_low, cfg.s_high) : cfg.s;
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng() % i]);

        dvr::RenderConfig rc;
        rc.sampling_rate = s;
        rc.jitter = cfg.jitter;
        rc.width = data.width;
        rc.height = data.height;
        rc.background = data.background;
        rc.seed = cfg.seed;
        rc.threads = cfg.threads;

        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch));
            tape.clear();
            auto step = model.begin_step(tape, vol);
            ad::Var total;
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t v = order[k];
                rc.pass = pass++;
                const ad::Var pred = model.record_image(tape, step, data.views[v].camera, rc);
                const ad::Var l = loss::loss_on_tape(tape, pred, targets[v], mode);
                total = total.valid() ? tape.add(total, l) : l;
            }
            const double value = tape.scalar(total);
            if (!std::isfinite(value))
                throw NumericalAbort("non-finite loss at epoch " + std::to_string(e) + "\nparameter stats:\n" +
                                     parameter_stats(store));
            loss_sum += value;
            tape.backward(total);
            adam_step(adam, store, lr);
            model.project();
        }
        tape.clear();

        dvr::RenderConfig vc = rc;
        vc.jitter = false;
        double ssim_sum = 0.0, mse_sum = 0.0;
        const auto features = model.encode(vol);
        for (auto v : val_idx) {
            const auto rgb = image::channels_of(model.render(features, data.views[v].camera, vc), 0, 3);
            ssim_sum += loss::ssim(rgb, targets[v]);
            mse_sum += loss::mse(rgb, targets[v]);
        }

        EpochMetrics m;
        m.epoch = e;
        m.train_loss = loss_sum / static_cast<double>(order.size());
        m.val_ssim = ssim_sum / static_cast<double>(val_idx.size());
        m.val_mse = mse_sum / static_cast<double>(val_idx.size());
        m.s = s;
        m.wall_ms = ms_since(t0);
        result.total_wall_ms += m.wall_ms;
        result.log.push_back(m);
        if (m.val_ssim > result.best_val_ssim) {
            result.best_val_ssim = m.val_ssim;
            result.best_epoch = e;
            snapshot();
        }
        if (on_epoch)
            on_epoch(m);
    }
    for (std::size_t b = 0; b < store.block_count(); ++b)
        std::copy(best_params[b].begin(), best_params[b].end(), store.value(b).begin());
    return result;
}

TrainResult train(const TrainConfig& cfg)
{
    if (cfg.dataset.empty())
        throw ConfigError("training needs a dataset manifest");
    if (cfg.out_dir.empty())
        throw ConfigError("training needs an output directory");
    const auto data = read_dataset(cfg.dataset);
    auto model = Model::create(cfg.model);
    fs::create_directories(cfg.out_dir);
    const fs::path metrics = cfg.out_dir / "metrics.jsonl";
    std::vector<EpochMetrics> seen;
    const auto result = train(cfg, data, model, [&](const EpochMetrics& m) {
        seen.push_back(m);
        write_lines(seen, metrics);
        std::cerr << "epoch " << m.epoch << "  s=" << m.s << "  loss=" << m.train_loss << "  val_ssim=" << m.val_ssim
                  << "  " << m.wall_ms << " ms\n";
    });
    save_checkpoint(model, cfg, result, cfg.out_dir / "checkpoint.json");
    return result;
}

// -- checkpoints ------------------------------------------------------------------------

void save_checkpoint(const Model& model, const TrainConfig& cfg, const TrainResult& result, const fs::path& file)
{
    json j{{"version", kCheckpointVersion},
           {"model", to_json(model.config())},
           {"params", model.params_to_json()},
           {"config", to_json(cfg)},
           {"best", {{"epoch", result.best_epoch}, {"val_ssim", result.best_val_ssim}}}};
    if (file.has_parent_path())
        fs::create_directories(file.parent_path());
    std::ofstream out(file);
    if (!out)
        throw IoError("cannot write " + file.string());
    out << j.dump() << "\n";
}

Checkpoint load_checkpoint(const fs::path& file)
{
    std::ifstream in(file);
    if (!in)
        throw IoError("cannot open checkpoint " + file.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw FormatError(file.string() + ": " + e.what());
    }
    if (j.value("version", 0) != kCheckpointVersion)
        throw FormatError(file.string() + ": unsupported checkpoint version");
    if (!j.contains("model") || !j.contains("params"))
        throw FormatError(file.string() + ": checkpoint lacks model or params");
    Checkpoint c{Model::create(model_config_from_json(j["model"])), j.value("config", json::object()), -1, -1.0};
    c.model.params_from_json(j["params"]);
    if (j.contains("best")) {
        c.best_epoch = j["best"].value("epoch", -1);
        c.best_val_ssim = j["best"].value("val_ssim", -1.0);
    }
    return c;
}

// -- evaluation -------------------------------------------------------------------------

json to_json(const EvalReport& r)
{
    json views = json::array();
    for (const auto& v : r.views)
        views.push_back({{"view", v.view}, {"ssim", v.ssim}, {"mse", v.mse}});
    return json{{"split", to_string(r.split)},
                {"s", r.s},
                {"mean_ssim", r.mean_ssim},
                {"mean_mse", r.mean_mse},
                {"views", std::move(views)}};
}

EvalReport evaluate(const Model& model, const DatasetManifest& data, Split split, double s_eval, int threads)
{
    const auto idx = data.indices(split);
    if (idx.empty())
        throw ConfigError("dataset has no '" + to_string(split) + "' views");
    const auto vol = grid::load_volume(data.resolve(data.volume));
    const auto features = model.encode(vol);
    dvr::RenderConfig rc;
    rc.sampling_rate = s_eval;
    rc.width = data.width;
    rc.height = data.height;
    rc.background = data.background;
    rc.threads = threads;

    EvalReport r;
    r.split = split;
    r.s = s_eval;
    for (auto i : idx) {
        const auto rgb = image::channels_of(model.render(features, data.views[i].camera, rc), 0, 3);
        const auto ref = data.load_image(i);
        r.views.push_back({i, loss::ssim(rgb, ref), loss::mse(rgb, ref)});
        r.mean_ssim += r.views.back().ssim;
        r.mean_mse += r.views.back().mse;
    }
    r.mean_ssim /= static_cast<double>(idx.size());
    r.mean_mse /= static_cast<double>(idx.size());
    return r;
}

} // namespace ddvr::train
