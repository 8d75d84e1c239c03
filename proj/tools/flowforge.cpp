#include <csignal>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "flowforge/app/commands.hpp"
#include "flowforge/app/service.hpp"
#include "flowforge/errors.hpp"
#include "flowforge/version.hpp"

using namespace flowforge;
using namespace flowforge::app;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c, const std::string& out_help) {
    cmd->add_option("--config", c.config, "JSON configuration file");
    cmd->add_option("--seed", c.seed, "Override the configured seed");
    cmd->add_option("--out", c.out, out_help);
}

nlohmann::json config_or_empty(const std::string& path) {
    return path.empty() ? nlohmann::json::object() : load_json_file(path);
}

SynthesisService* g_service = nullptr;

void on_signal(int) {
    if (g_service) g_service->stop();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"flowforge: vector field synthesis from sparse streamlines"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    Common gen_opts;
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
    add_common(gen, gen_opts, "Dataset file (manifest goes to <out>.json)");

    Common train_opts;
    std::string train_dataset;
    std::optional<int> train_epochs;
    bool resume = false;
    auto* train = app.add_subcommand("train", "Train the denoiser");
    add_common(train, train_opts, "Run directory for checkpoint and loss log");
    train->add_option("--dataset", train_dataset, "Dataset file");
    train->add_option("--epochs", train_epochs, "Override the epoch count");
    train->add_flag("--resume", resume, "Continue from the run directory's checkpoint");

    Common eval_opts;
    std::string eval_dataset, eval_checkpoint;
    std::optional<std::size_t> eval_max;
    std::optional<int> eval_threads;
    auto* evaluate = app.add_subcommand("evaluate", "Compare diffusion and SVD on the test split");
    add_common(evaluate, eval_opts, "Directory for metric CSVs");
    evaluate->add_option("--dataset", eval_dataset, "Dataset file");
    evaluate->add_option("--checkpoint", eval_checkpoint, "Checkpoint file");
    evaluate->add_option("--max-samples", eval_max, "Evaluate only the first n test samples");
    evaluate->add_option("--threads", eval_threads, "Worker threads");

    Common base_opts;
    std::string base_dataset;
    std::optional<std::size_t> base_max;
    auto* baseline = app.add_subcommand("baseline", "Run the SVD baseline on the test split");
    add_common(baseline, base_opts, "Directory for metric CSVs");
    baseline->add_option("--dataset", base_dataset, "Dataset file");
    baseline->add_option("--max-samples", base_max, "Evaluate only the first n test samples");

    Common syn_opts;
    std::string syn_checkpoint;
    auto* synth = app.add_subcommand("synthesize", "Synthesize a field from drawn streamlines");
    add_common(synth, syn_opts, "Output prefix (<out>.vfds, <out>.svg, <out>.json)");
    synth->add_option("--checkpoint", syn_checkpoint, "Checkpoint file (required for method diffusion)");

    Common serve_opts;
    std::string serve_checkpoint, host = "127.0.0.1";
    int port = 8080;
    auto* serve = app.add_subcommand("serve", "Serve synthesis over HTTP");
    serve->add_option("--config", serve_opts.config, "JSON file with service defaults");
    serve->add_option("--checkpoint", serve_checkpoint, "Checkpoint file");
    serve->add_option("--host", host, "Bind address");
    serve->add_option("--port", port, "Port");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            auto cfg = DatasetConfig::from_json(config_or_empty(gen_opts.config));
            if (gen_opts.seed) cfg.seed = *gen_opts.seed;
            cmd_gen_data(cfg, gen_opts.out.empty() ? "data/dataset.vfds" : gen_opts.out, std::cout);
        } else if (*train) {
            auto job = TrainJob::from_json(config_or_empty(train_opts.config));
            if (train_opts.seed) job.train.seed = *train_opts.seed;
            if (!train_opts.out.empty()) job.out_dir = train_opts.out;
            if (!train_dataset.empty()) job.dataset = train_dataset;
            if (train_epochs) job.train.epochs = *train_epochs;
            if (resume) job.resume = true;
            const auto s = cmd_train(job, std::cout);
            std::cout << "finished epoch " << s.last_epoch << "; checkpoint " << job.checkpoint_path().string()
                      << ", loss log " << job.log_path().string() << "\n";
        } else if (*evaluate || *baseline) {
            const Common& o = *evaluate ? eval_opts : base_opts;
            auto job = EvalJob::from_json(config_or_empty(o.config));
            if (o.seed) job.sample.seed = *o.seed;
            if (!o.out.empty()) job.out_dir = o.out;
            if (*evaluate) {
                if (!eval_dataset.empty()) job.dataset = eval_dataset;
                if (!eval_checkpoint.empty()) job.checkpoint = eval_checkpoint;
                if (eval_max) job.max_samples = *eval_max;
                if (eval_threads) job.threads = *eval_threads;
                cmd_evaluate(job, std::cout);
            } else {
                if (!base_dataset.empty()) job.dataset = base_dataset;
                if (base_max) job.max_samples = *base_max;
                cmd_baseline(job, std::cout);
            }
        } else if (*synth) {
            if (syn_opts.config.empty()) throw InvalidInput("synthesize needs --config with a request JSON");
            auto req = SynthesisRequest::from_json(load_json_file(syn_opts.config));
            if (syn_opts.seed) req.seed = *syn_opts.seed;
            std::shared_ptr<const Model> model;
            if (!syn_checkpoint.empty()) model = Model::load(syn_checkpoint);
            cmd_synthesize(req, model.get(), syn_opts.out.empty() ? "synthesis" : syn_opts.out, std::cout);
        } else if (*serve) {
            ServiceDefaults defaults;
            if (!serve_opts.config.empty()) {
                const auto j = load_json_file(serve_opts.config);
                defaults.w = j.value("w", defaults.w);
                defaults.steps = j.value("steps", defaults.steps);
                defaults.magnitude = j.value("magnitude", defaults.magnitude);
                defaults.resample_spacing = j.value("resample_spacing", defaults.resample_spacing);
            }
            std::shared_ptr<const Model> model;
            if (!serve_checkpoint.empty()) model = Model::load(serve_checkpoint);
            SynthesisService service(model, defaults);
            std::cout << "service defaults:\n" << service.handle("GET", "/api/defaults", "").body.dump(2) << "\n";
            service.bind(host, port);
            g_service = &service;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            std::cout << "serving on http://" << host << ":" << port << (model ? "" : " (svd only, no checkpoint)")
                      << std::endl;
            service.listen_after_bind();
            g_service = nullptr;
        }
    } catch (const RequestError& e) {
        std::cerr << "error: " << e.what() << "\n";
        for (const auto& d : e.details()) std::cerr << "  " << d << "\n";
        return 1;
    } catch (const DivergenceError& e) {
        std::cerr << "error (" << e.where() << ", step " << e.index() << "): " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
