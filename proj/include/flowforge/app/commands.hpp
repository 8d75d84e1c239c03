#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowforge/app/synthesis.hpp"
#include "flowforge/datagen.hpp"
#include "flowforge/denoiser.hpp"
#include "flowforge/diffusion.hpp"
#include "flowforge/svd.hpp"

namespace flowforge::app {

nlohmann::json load_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

// ---------------------------------------------------------------------------
// gen-data

DatasetManifest cmd_gen_data(const DatasetConfig& cfg, const std::filesystem::path& out, std::ostream& console);

// ---------------------------------------------------------------------------
// train

struct TrainJob {
    std::filesystem::path dataset;
    std::filesystem::path out_dir = "run";
    NetConfig net{};
    ScheduleConfig schedule{};
    TrainConfig train{};
    bool resume = false;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainJob from_json(const nlohmann::json& j);

    std::filesystem::path checkpoint_path() const { return out_dir / "checkpoint.vfck"; }
    std::filesystem::path log_path() const { return out_dir / "loss.csv"; }
};

struct TrainSummary {
    int first_epoch = 1;                // first epoch run by this call
    int last_epoch = 0;
    std::vector<double> epoch_losses;   // full history, including resumed epochs
    std::int64_t steps = 0;             // optimizer steps taken overall
};

/// Trains on the dataset's train split. Writes a checkpoint after every epoch
/// (atomically) and rewrites the CSV loss log from the checkpointed history,
/// so an interrupted run resumes with a consistent log.
TrainSummary cmd_train(const TrainJob& job, std::ostream& console);

// ---------------------------------------------------------------------------
// evaluate / baseline

struct EvalJob {
    std::filesystem::path dataset;
    std::filesystem::path checkpoint;  // needed for the diffusion method
    std::filesystem::path out_dir = "eval";
    std::vector<std::string> methods{"diffusion", "svd"};  // also "oracle" (ground truth)
    SvdConfig svd{};
    SampleConfig sample{250, 3.0, 1, SampleMode::cfg, Conditioning::mask_mask};
    std::optional<std::size_t> max_samples;  // evaluate only the first n test samples
    int threads = 1;

    void validate() const;
    nlohmann::json to_json() const;
    static EvalJob from_json(const nlohmann::json& j);

    std::filesystem::path per_sample_csv() const { return out_dir / "metrics.csv"; }
    std::filesystem::path summary_csv() const { return out_dir / "summary.csv"; }
};

struct SampleMetrics {
    std::size_t sample = 0;  // dataset index
    std::string method;
    MetricReport all;
    MetricReport unknown;
    double mask_density = 0.0;
};

struct MethodSummary {
    std::string method;
    std::size_t count = 0;
    MetricReport mean;          // averaged over samples (degenerate entries skipped)
    MetricReport mean_unknown;
    std::size_t angular_skipped = 0;
};

struct EvalSummary {
    std::size_t test_count = 0;
    std::vector<SampleMetrics> rows;
    std::vector<MethodSummary> methods;

    const MethodSummary& method(const std::string& name) const;
};

EvalSummary cmd_evaluate(const EvalJob& job, std::ostream& console);

/// The SVD baseline alone over the test split; same CSV layout as evaluate.
EvalSummary cmd_baseline(EvalJob job, std::ostream& console);

// ---------------------------------------------------------------------------
// synthesize

struct SynthesizeOutputs {
    std::filesystem::path field;     // VFDS single record
    std::filesystem::path plot;      // SVG
    std::filesystem::path response;  // JSON (without timing)
};

SynthesizeOutputs synthesize_outputs(const std::filesystem::path& out_prefix);

SynthesisResponse cmd_synthesize(const SynthesisRequest& req, const Model* model,
                                 const std::filesystem::path& out_prefix, std::ostream& console);

}  // namespace flowforge::app
