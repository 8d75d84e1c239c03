#include "flowforge/app/commands.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "flowforge/app/plot.hpp"
#include "flowforge/checkpoint.hpp"
#include "flowforge/dataset_io.hpp"
#include "flowforge/errors.hpp"

namespace flowforge::app {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string g9(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << text;
        if (!out) throw IoError("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

void ensure_dir(const std::filesystem::path& dir) {
    if (dir.empty()) return;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

// Fisher-Yates with explicit index draws (std::shuffle differs between
// standard libraries).
void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[std::size_t(rng() % i)]);
}

std::vector<DatasetRecord> read_records(DatasetReader& reader, const std::vector<std::size_t>& indices) {
    std::vector<DatasetRecord> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(reader.read(i));
    return out;
}

template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
    const std::size_t workers = std::min<std::size_t>(std::size_t(std::max(threads, 1)), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex m;
    auto work = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(m);
                if (!error) error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t k = 1; k < workers; ++k) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace

nlohmann::json load_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw InvalidInput(path.string() + ": " + e.what());
    }
}

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
    write_text_atomic(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// gen-data

DatasetManifest cmd_gen_data(const DatasetConfig& cfg, const std::filesystem::path& out, std::ostream& console) {
    cfg.validate();
    ensure_dir(out.parent_path());
    console << "gen-data config:\n" << cfg.to_json().dump(2) << "\n";
    const auto t0 = Clock::now();
    const DatasetManifest m = build_dataset(cfg, out);
    console << "wrote " << m.sample_count << " samples (" << m.width << "x" << m.height << ") to " << out.string()
            << "\n"
            << "  split: " << m.train_indices.size() << " train / " << m.test_indices.size() << " test\n"
            << "  normalization scale: " << m.scale << "\n"
            << "  mean streamlines/sample: " << m.mean_accepted_streamlines() << "\n"
            << "  samples with empty mask: " << m.empty_mask_samples.size() << "\n"
            << "  manifest: " << manifest_path(out).string() << "\n"
            << "  elapsed: " << std::fixed << std::setprecision(1) << seconds_since(t0) << " s\n"
            << std::defaultfloat;
    return m;
}

// ---------------------------------------------------------------------------
// train

void TrainJob::validate() const {
    if (dataset.empty()) throw InvalidInput("train job needs a dataset path");
    if (out_dir.empty()) throw InvalidInput("train job needs an output directory");
    net.validate();
    schedule.validate();
    train.validate();
}

nlohmann::json TrainJob::to_json() const {
    return {{"dataset", dataset.string()}, {"out_dir", out_dir.string()}, {"net", net.to_json()},
            {"schedule", schedule.to_json()}, {"train", train.to_json()}, {"resume", resume}};
}

TrainJob TrainJob::from_json(const nlohmann::json& j) {
    TrainJob t;
    t.dataset = j.value("dataset", std::string());
    t.out_dir = j.value("out_dir", t.out_dir.string());
    if (j.contains("net")) t.net = NetConfig::from_json(j["net"]);
    if (j.contains("schedule")) t.schedule = ScheduleConfig::from_json(j["schedule"]);
    if (j.contains("train")) t.train = TrainConfig::from_json(j["train"]);
    t.resume = j.value("resume", t.resume);
    return t;
}

namespace {

void write_loss_log(const std::filesystem::path& path, const std::vector<double>& losses,
                    const std::vector<std::int64_t>& steps) {
    std::string text = "epoch,steps,mean_loss\n";
    for (std::size_t e = 0; e < losses.size(); ++e) {
        text += std::to_string(e + 1) + "," + std::to_string(steps[e]) + "," + g9(losses[e]) + "\n";
    }
    write_text_atomic(path, text);
}

}  // namespace

TrainSummary cmd_train(const TrainJob& job, std::ostream& console) {
    job.validate();
    const DatasetManifest manifest = read_manifest(job.dataset);
    DatasetReader reader(job.dataset);
    if (reader.width() != manifest.width || reader.height() != manifest.height ||
        reader.size() != manifest.sample_count) {
        throw FormatError(FormatError::Kind::Malformed, "dataset and manifest disagree for " + job.dataset.string());
    }
    job.net.check_input(reader.height(), reader.width());
    if (manifest.train_indices.empty()) throw InvalidInput("dataset has an empty train split");
    ensure_dir(job.out_dir);
    console << "train config:\n" << job.to_json().dump(2) << "\n";

    const std::vector<DatasetRecord> data = read_records(reader, manifest.train_indices);
    const DiffusionSchedule schedule = make_schedule(job.schedule);

    Checkpoint ckpt;
    std::vector<double> losses;
    std::vector<std::int64_t> step_counts;
    int start_epoch = 1;
    if (job.resume && std::filesystem::exists(job.checkpoint_path())) {
        ckpt = load_checkpoint(job.checkpoint_path());
        if (!(ckpt.params.config == job.net) || !(ckpt.schedule == job.schedule)) {
            throw InvalidInput("checkpoint " + job.checkpoint_path().string() +
                               " was trained with a different architecture or schedule");
        }
        if (!ckpt.optimizer) throw InvalidInput("checkpoint has no optimizer state to resume from");
        losses = ckpt.meta.at("loss_history").get<std::vector<double>>();
        step_counts = ckpt.meta.at("step_history").get<std::vector<std::int64_t>>();
        start_epoch = ckpt.meta.at("epoch").get<int>() + 1;
        console << "resuming after epoch " << start_epoch - 1 << "\n";
    } else {
        Rng init_rng = derive_rng(job.train.seed, 0x1417);
        ckpt.params = init_params<float>(job.net, init_rng);
        ckpt.optimizer = OptimizerState<float>::zeros(ckpt.params.count(), job.train.adam());
    }
    ckpt.schedule = job.schedule;
    console << "parameters: " << ckpt.params.count() << ", train samples: " << data.size() << "\n";

    TrainSummary summary;
    summary.first_epoch = start_epoch;
    OptimizerState<float>& opt = *ckpt.optimizer;
    const std::size_t bs = std::size_t(job.train.batch_size);
    const auto total_steps = std::int64_t(job.train.epochs) * std::int64_t((data.size() + bs - 1) / bs);

    for (int epoch = start_epoch; epoch <= job.train.epochs; ++epoch) {
        const auto t0 = Clock::now();
        Rng rng = derive_rng(job.train.seed, 0xE90C, std::uint64_t(epoch));
        std::vector<std::size_t> order(data.size());
        std::iota(order.begin(), order.end(), std::size_t(0));
        shuffle_indices(order, rng);

        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t b = 0; b < order.size(); b += bs) {
            std::vector<DatasetRecord> batch;
            for (std::size_t k = b; k < std::min(order.size(), b + bs); ++k) batch.push_back(data[order[k]]);
            try {
                opt.config.learning_rate = job.train.learning_rate_at(opt.step, total_steps);
                const auto res = training_step(batch, ckpt.params, job.train, schedule, rng, opt.step);
                optimizer_step(ckpt.params, std::span<const float>(res.grads), opt);
                total += res.loss;
            } catch (const DivergenceError& e) {
                console << "training diverged in epoch " << epoch << ": " << e.what() << "\n";
                if (std::filesystem::exists(job.checkpoint_path())) {
                    console << "last good checkpoint kept at " << job.checkpoint_path().string() << "\n";
                }
                throw;
            }
            ++batches;
        }
        const double mean = total / double(batches);
        losses.push_back(mean);
        step_counts.push_back(opt.step);

        ckpt.meta = {{"epoch", epoch},
                     {"loss_history", losses},
                     {"step_history", step_counts},
                     {"train", job.train.to_json()},
                     {"dataset", job.dataset.string()},
                     {"dataset_scale", manifest.scale},
                     {"width", reader.width()},
                     {"height", reader.height()}};
        save_checkpoint(job.checkpoint_path(), ckpt);
        write_loss_log(job.log_path(), losses, step_counts);
        console << "epoch " << epoch << "/" << job.train.epochs << "  loss " << g9(mean) << "  steps " << opt.step
                << "  (" << std::fixed << std::setprecision(1) << seconds_since(t0) << " s)\n"
                << std::defaultfloat;
        console.flush();
    }
    summary.last_epoch = int(losses.size());
    summary.epoch_losses = losses;
    summary.steps = opt.step;
    return summary;
}

// ---------------------------------------------------------------------------
// evaluate

void EvalJob::validate() const {
    if (dataset.empty()) throw InvalidInput("evaluate needs a dataset path");
    if (methods.empty()) throw InvalidInput("evaluate needs at least one method");
    for (const auto& m : methods) {
        if (m != "diffusion" && m != "svd" && m != "oracle") throw InvalidInput("unknown method " + m);
        if (m == "diffusion" && checkpoint.empty()) throw InvalidInput("method diffusion needs a checkpoint");
    }
    if (threads < 1) throw InvalidInput("threads must be >= 1");
    svd.validate(1.0);
}

nlohmann::json EvalJob::to_json() const {
    nlohmann::json j{{"dataset", dataset.string()}, {"checkpoint", checkpoint.string()},
                     {"out_dir", out_dir.string()}, {"methods", methods},
                     {"svd", svd.to_json()},        {"sample", sample.to_json()},
                     {"threads", threads}};
    j["max_samples"] = max_samples ? nlohmann::json(*max_samples) : nlohmann::json(nullptr);
    return j;
}

EvalJob EvalJob::from_json(const nlohmann::json& j) {
    EvalJob e;
    e.dataset = j.value("dataset", std::string());
    e.checkpoint = j.value("checkpoint", std::string());
    e.out_dir = j.value("out_dir", e.out_dir.string());
    if (j.contains("methods")) e.methods = j["methods"].get<std::vector<std::string>>();
    if (j.contains("svd")) e.svd = SvdConfig::from_json(j["svd"]);
    if (j.contains("sample")) e.sample = SampleConfig::from_json(j["sample"]);
    if (j.contains("max_samples") && !j["max_samples"].is_null()) e.max_samples = j["max_samples"].get<std::size_t>();
    e.threads = j.value("threads", e.threads);
    return e;
}

const MethodSummary& EvalSummary::method(const std::string& name) const {
    for (const auto& m : methods) {
        if (m.method == name) return m;
    }
    throw InvalidInput("no results for method " + name);
}

namespace {

std::vector<unsigned char> unknown_cells(const ConstraintMask& c) {
    std::vector<unsigned char> sel(c.mask.values.size());
    for (std::size_t i = 0; i < sel.size(); ++i) sel[i] = c.known(i) ? 0 : 1;
    return sel;
}

// Degenerate angular entries (no valid cells) are left out of the sum.
void accumulate(MetricReport& acc, const MetricReport& r) {
    acc.mse += r.mse;
    if (!r.angular_degenerate) acc.angular_deg += r.angular_deg;
    acc.physics += r.physics;
    acc.curl_err += r.curl_err;
    acc.div_err += r.div_err;
}

std::string metrics_header() {
    return "sample,method,mse,angular_deg,physics,curl_err,div_err,mse_unknown,angular_unknown_deg,"
           "physics_unknown,mask_density\n";
}

std::string metrics_row(const SampleMetrics& m) {
    return std::to_string(m.sample) + "," + m.method + "," + g9(m.all.mse) + "," + g9(m.all.angular_deg) + "," +
           g9(m.all.physics) + "," + g9(m.all.curl_err) + "," + g9(m.all.div_err) + "," + g9(m.unknown.mse) + "," +
           g9(m.unknown.angular_deg) + "," + g9(m.unknown.physics) + "," + g9(m.mask_density) + "\n";
}

}  // namespace

EvalSummary cmd_evaluate(const EvalJob& job, std::ostream& console) {
    job.validate();
    const DatasetManifest manifest = read_manifest(job.dataset);
    DatasetReader reader(job.dataset);
    if (manifest.test_indices.empty()) throw InvalidInput("dataset has an empty test split");
    std::vector<std::size_t> test = manifest.test_indices;
    if (job.max_samples && *job.max_samples < test.size()) test.resize(*job.max_samples);

    std::shared_ptr<const Model> model;
    const bool want_diffusion = std::find(job.methods.begin(), job.methods.end(), "diffusion") != job.methods.end();
    if (want_diffusion) {
        if (!std::filesystem::exists(job.checkpoint)) throw IoError("missing checkpoint " + job.checkpoint.string());
        model = Model::load(job.checkpoint);
        model->params.config.check_input(reader.height(), reader.width());
    }
    SampleConfig scfg = job.sample;
    if (model) {
        scfg.conditioning = model->conditioning;
        scfg.validate(model->schedule);
    }
    ensure_dir(job.out_dir);
    console << "evaluate config:\n" << job.to_json().dump(2) << "\n";
    console << "test samples: " << test.size() << "\n";

    const std::vector<DatasetRecord> records = read_records(reader, test);
    const std::size_t nm = job.methods.size();
    std::vector<SampleMetrics> rows(test.size() * nm);
    std::atomic<std::size_t> done{0};
    std::mutex console_mutex;
    const auto t0 = Clock::now();

    parallel_for(test.size(), job.threads, [&](std::size_t k) {
        const DatasetRecord& rec = records[k];
        const auto sel = unknown_cells(rec.constraint);
        for (std::size_t mi = 0; mi < nm; ++mi) {
            const std::string& method = job.methods[mi];
            VectorField pred;
            if (method == "diffusion") {
                Rng rng = derive_rng(scfg.seed, test[k]);
                pred = sample(model->params, rec.constraint, scfg, model->schedule, rng);
            } else if (method == "svd") {
                pred = svd_solve(rec.constraint, job.svd).field;
            } else {
                pred = rec.field;
            }
            SampleMetrics& row = rows[k * nm + mi];
            row.sample = test[k];
            row.method = method;
            row.all = evaluate_metrics(rec.field, pred);
            row.unknown = evaluate_metrics(rec.field, pred, CellSelection(sel));
            row.mask_density = rec.constraint.density();
        }
        const std::size_t n = ++done;
        if (n % 10 == 0 || n == test.size()) {
            std::lock_guard lock(console_mutex);
            console << "  " << n << "/" << test.size() << " samples (" << std::fixed << std::setprecision(1)
                    << seconds_since(t0) << " s)\n"
                    << std::defaultfloat;
            console.flush();
        }
    });

    EvalSummary summary;
    summary.test_count = test.size();
    summary.rows = rows;
    for (const auto& method : job.methods) {
        MethodSummary s;
        s.method = method;
        std::size_t ang_n = 0, ang_un = 0;
        MetricReport a, u;
        for (const auto& r : rows) {
            if (r.method != method) continue;
            ++s.count;
            accumulate(a, r.all);
            accumulate(u, r.unknown);
            if (!r.all.angular_degenerate) ++ang_n;
            else ++s.angular_skipped;
            if (!r.unknown.angular_degenerate) ++ang_un;
        }
        auto mean_of = [&](const MetricReport& m, std::size_t ang) {
            auto div = [](double v, std::size_t n) { return n ? v / double(n) : 0.0; };
            MetricReport out;
            out.mse = div(m.mse, s.count);
            out.angular_deg = div(m.angular_deg, ang);
            out.physics = div(m.physics, s.count);
            out.curl_err = div(m.curl_err, s.count);
            out.div_err = div(m.div_err, s.count);
            return out;
        };
        s.mean = mean_of(a, ang_n);
        s.mean_unknown = mean_of(u, ang_un);
        summary.methods.push_back(s);
    }

    std::string csv = metrics_header();
    for (const auto& r : rows) csv += metrics_row(r);
    write_text_atomic(job.per_sample_csv(), csv);

    std::string sum = "method,samples,mse,angular_deg,physics,curl_err,div_err,mse_unknown,angular_unknown_deg,"
                      "physics_unknown\n";
    for (const auto& s : summary.methods) {
        sum += s.method + "," + std::to_string(s.count) + "," + g9(s.mean.mse) + "," + g9(s.mean.angular_deg) + "," +
               g9(s.mean.physics) + "," + g9(s.mean.curl_err) + "," + g9(s.mean.div_err) + "," +
               g9(s.mean_unknown.mse) + "," + g9(s.mean_unknown.angular_deg) + "," + g9(s.mean_unknown.physics) +
               "\n";
    }
    write_text_atomic(job.summary_csv(), sum);

    console << "\n" << std::left << std::setw(12) << "method" << std::right << std::setw(14) << "MSE" << std::setw(14)
            << "angular(deg)" << std::setw(14) << "physics" << "\n";
    for (const auto& s : summary.methods) {
        console << std::left << std::setw(12) << s.method << std::right << std::setw(14) << g9(s.mean.mse)
                << std::setw(14) << g9(s.mean.angular_deg) << std::setw(14) << g9(s.mean.physics) << "\n";
    }
    console << "per-sample metrics: " << job.per_sample_csv().string() << "\n"
            << "summary: " << job.summary_csv().string() << "\n";
    return summary;
}

EvalSummary cmd_baseline(EvalJob job, std::ostream& console) {
    job.methods = {"svd"};
    job.checkpoint.clear();
    return cmd_evaluate(job, console);
}

// ---------------------------------------------------------------------------
// synthesize

SynthesizeOutputs synthesize_outputs(const std::filesystem::path& out_prefix) {
    auto with = [&](const char* ext) {
        std::filesystem::path p = out_prefix;
        p += ext;
        return p;
    };
    return {with(".vfds"), with(".svg"), with(".json")};
}

SynthesisResponse cmd_synthesize(const SynthesisRequest& req, const Model* model,
                                 const std::filesystem::path& out_prefix, std::ostream& console) {
    console << "synthesis request:\n" << req.to_json().dump(2) << "\n";
    const SynthesisResponse res = synthesize(req, model);
    const SynthesizeOutputs out = synthesize_outputs(out_prefix);
    ensure_dir(out_prefix.parent_path());
    write_single_record(out.field, res.field, res.constraint);
    PlotOptions po;
    po.title = method_name(req.method) + " synthesis";
    write_svg(out.plot, res.field, res.input_lines, res.preview, po);
    write_json_file(out.response, res.to_json(false));
    console << "method " << method_name(res.method) << ", mask density " << g9(res.mask_density()) << ", "
            << res.preview.size() << " preview streamlines, " << std::fixed << std::setprecision(1) << res.timing_ms
            << " ms\n"
            << std::defaultfloat << "wrote " << out.field.string() << ", " << out.plot.string() << ", "
            << out.response.string() << "\n";
    return res;
}

}  // namespace flowforge::app
