#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowforge/checkpoint.hpp"
#include "flowforge/diffusion.hpp"
#include "flowforge/errors.hpp"
#include "flowforge/field.hpp"
#include "flowforge/streamline.hpp"
#include "flowforge/svd.hpp"

namespace flowforge::app {

inline constexpr int kMaxRequestSide = 256;
inline constexpr double kDefaultResampleSpacing = 4.0;
inline constexpr int kPreviewSeedsPerAxis = 4;

/// A request that failed validation. `details` lists per-line problems.
class RequestError : public InvalidInput {
public:
    RequestError(const std::string& what, std::vector<std::string> details = {})
        : InvalidInput(what), details_(std::move(details)) {}
    const std::vector<std::string>& details() const noexcept { return details_; }

private:
    std::vector<std::string> details_;
};

/// A trained denoiser ready for sampling. Read-only once loaded.
struct Model {
    DenoiserParams<float> params;
    DiffusionSchedule schedule;
    Conditioning conditioning = Conditioning::mask_mask;
    double dataset_scale = 1.0;
    nlohmann::json meta;

    static std::shared_ptr<const Model> load(const std::filesystem::path& checkpoint);
    static std::shared_ptr<const Model> from_checkpoint(const Checkpoint& ckpt);
};

enum class Method { diffusion, svd };

struct SynthesisRequest {
    int width = 32;
    int height = 32;
    std::vector<Polyline> streamlines;  // hand-drawn, grid coordinates
    Method method = Method::diffusion;
    double w = 3.0;
    int steps = 250;
    std::uint64_t seed = 0;
    double resample_spacing = kDefaultResampleSpacing;
    double magnitude = kDefaultHandDrawnMagnitude;  // for lines without their own
    SvdConfig svd{};

    /// Throws RequestError; checks dimensions against the model when given.
    void validate(const Model* model) const;
    nlohmann::json to_json() const;
    static SynthesisRequest from_json(const nlohmann::json& j);
};

struct SynthesisResponse {
    VectorField field;
    ConstraintMask constraint;
    std::vector<Polyline> input_lines;  // after resampling
    std::vector<Polyline> preview;      // traced on the output field
    Method method = Method::diffusion;
    double timing_ms = 0.0;

    double mask_density() const { return constraint.density(); }
    /// `with_timing = false` drops timing_ms so identical requests serialize identically.
    nlohmann::json to_json(bool with_timing = true) const;
};

std::string method_name(Method m);
Method method_from_string(const std::string& s);

/// Resample the drawn lines, rasterize their tangent vectors and run the
/// selected engine. Pure given the request and model.
SynthesisResponse synthesize(const SynthesisRequest& req, const Model* model);

/// The preview streamlines drawn over a result.
std::vector<Polyline> trace_preview(const VectorField& field);

}  // namespace flowforge::app
