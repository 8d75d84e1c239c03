#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "flowforge/datagen.hpp"
#include "flowforge/dataset_io.hpp"
#include "flowforge/errors.hpp"

using namespace flowforge;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("flowforge_test_datagen_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void overwrite(const fs::path& p, std::size_t offset, const std::string& bytes) {
    std::fstream f(p, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(std::streamoff(offset));
    f.write(bytes.data(), std::streamsize(bytes.size()));
}

FormatError::Kind format_error_kind(const fs::path& p) {
    try {
        DatasetReader r(p);
    } catch (const FormatError& e) {
        return e.kind();
    }
    FAIL("expected a format error");
    return FormatError::Kind::Malformed;
}

DatasetConfig small_config(std::size_t n) {
    DatasetConfig c;
    c.n_samples = int(n);
    c.width = 16;
    c.height = 16;
    c.seed = 5;
    return c;
}

}  // namespace

TEST_CASE("vatistas profile") {
    CHECK(vatistas_profile(0.0, 1.0) == 0.0);
    CHECK(vatistas_profile(1.0, 1.0, 1.0) == doctest::Approx(0.5));
    CHECK(vatistas_profile(0.01, 2.0) == doctest::Approx(0.005).epsilon(1e-6));
    // far field decays like rc / r
    CHECK(vatistas_profile(1000.0, 1.0) == doctest::Approx(1e-3).epsilon(1e-6));

    double best_r = 0.0, best = -1.0;
    for (int i = 0; i <= 400000; ++i) {
        const double r = i * 1e-5;
        const double v = vatistas_profile(r, 1.0, 2.0);
        if (v > best) {
            best = v;
            best_r = r;
        }
    }
    CHECK(std::abs(best_r - 1.0) < 1e-3);
}

TEST_CASE("single structure evaluation") {
    StructureParams p;
    p.center = {10.0, 10.0};
    p.shape_index = 0;
    p.core_radius = 2.0;
    p.strength = 1.5;
    const Vec2 v = eval_structure(p, {13.0, 10.0});
    CHECK(std::abs(v[0]) < 1e-14);
    CHECK(v[1] == doctest::Approx(1.5 * vatistas_profile(3.0, 2.0)));
    CHECK(eval_structure(p, p.center) == Vec2{0.0, 0.0});

    // rotating the structure rotates its field
    StructureParams q = p;
    q.shape_index = 1;
    q.rotation = M_PI / 2;
    const Vec2 a = eval_structure(q, {10.0, 13.0});
    q.rotation = 0.0;
    const Vec2 b = eval_structure(q, {13.0, 10.0});
    CHECK(a[0] == doctest::Approx(-b[1]));
    CHECK(a[1] == doctest::Approx(b[0]));

    StructureParams bad = p;
    bad.core_radius = 0.0;
    CHECK_THROWS_AS(bad.validate(), InvalidInput);
    bad = p;
    bad.strength = 0.0;
    CHECK_THROWS_AS(bad.validate(), InvalidInput);
    bad = p;
    bad.shape_index = 3;
    CHECK_THROWS_AS(bad.validate(), InvalidInput);
}

TEST_CASE("rotation structure: curl sign and vanishing divergence") {
    for (double strength : {1.0, -0.7}) {
        StructureParams p;
        p.center = {15.5, 15.5};
        p.core_radius = 4.0;
        p.strength = strength;
        const std::vector<StructureParams> s{p};
        const auto f = render_structures(32, 32, s);
        const auto c = curl(f), d = divergence(f);
        CHECK(c.at(15, 15) * strength > 0.0);
        CHECK(c.at(16, 16) * strength > 0.0);
        const double bound = 5.0 * f.spacing() * f.spacing() * f.max_abs_component();
        double worst = 0.0;
        for (int y = 1; y < 31; ++y)
            for (int x = 1; x < 31; ++x) worst = std::max(worst, std::abs(d.at(x, y)));
        MESSAGE("max interior |div| " << worst << " bound " << bound);
        CHECK(worst < bound);
    }
}

TEST_CASE("centered single rotation matches the analytic vortex") {
    GeneratorConfig cfg;
    cfg.min_structures = cfg.max_structures = 1;
    cfg.shapes = {0};
    cfg.centered = true;
    Rng rng(4);
    const auto structures = draw_structures(32, 32, rng, cfg);
    REQUIRE(structures.size() == 1);
    const double rc = structures[0].core_radius;
    Rng rng2(4);
    const auto f = gen_field(32, 32, rng2, cfg);
    VectorField ref(32, 32);
    for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 32; ++x) {
            const double dx = x - 15.5, dy = y - 15.5, r = std::hypot(dx, dy);
            const double s = vatistas_profile(r, rc) / r;
            ref.set(x, y, {-dy * s, dx * s});
        }
    }
    const double e_pos = angular_error(ref, f).degrees;
    VectorField neg = f;
    for (std::size_t i = 0; i < neg.cells(); ++i) {
        neg.u()[i] = -neg.u()[i];
        neg.v()[i] = -neg.v()[i];
    }
    const double e_neg = angular_error(ref, neg).degrees;
    CHECK(std::min(e_pos, e_neg) < 1e-9);
}

TEST_CASE("generator determinism and range") {
    GeneratorConfig cfg;
    Rng a(9), b(9);
    CHECK(gen_field(32, 32, a, cfg) == gen_field(32, 32, b, cfg));

    std::vector<VectorField> fields;
    Rng rng(77);
    for (int i = 0; i < 1000; ++i) fields.push_back(gen_field(32, 32, rng, cfg));
    for (const auto& f : fields) REQUIRE(f.all_finite());
    const auto n = normalize_dataset(fields);
    double mx = 0.0;
    for (const auto& f : n.fields) mx = std::max(mx, f.max_abs_component());
    CHECK(mx <= 1.0);
    CHECK(mx >= 1.0 - 1e-15);
}

TEST_CASE("split arithmetic and determinism") {
    std::vector<std::size_t> train, test, train2, test2;
    split_indices(10, 0.1, 3, train, test);
    CHECK(train.size() == 9);
    CHECK(test.size() == 1);
    split_indices(10, 0.1, 3, train2, test2);
    CHECK(train == train2);
    CHECK(test == test2);
    split_indices(2000, 0.1, 3, train, test);
    CHECK(test.size() == 200);
    std::vector<bool> seen(2000, false);
    for (auto i : train) seen[i] = true;
    for (auto i : test) {
        CHECK_FALSE(seen[i]);
        seen[i] = true;
    }
    CHECK(std::all_of(seen.begin(), seen.end(), [](bool s) { return s; }));
}

TEST_CASE("build dataset: manifest, determinism and round trip") {
    const auto dir = temp_dir("build");
    const auto cfg = small_config(10);
    const auto m = build_dataset(cfg, dir / "a.vfds");
    CHECK(m.sample_count == 10);
    CHECK(m.train_indices.size() == 9);
    CHECK(m.test_indices.size() == 1);
    CHECK(m.train_fraction + m.test_fraction == doctest::Approx(1.0));
    CHECK(m.mean_accepted_streamlines() <= 12.0);
    CHECK(m.accepted_streamlines.size() == 10);

    const auto m2 = build_dataset(cfg, dir / "b.vfds");
    CHECK(slurp(dir / "a.vfds") == slurp(dir / "b.vfds"));
    CHECK(m2.train_indices == m.train_indices);
    CHECK(m2.test_indices == m.test_indices);

    const auto disk = read_manifest(dir / "a.vfds");
    CHECK(disk.sample_count == m.sample_count);
    CHECK(disk.scale == m.scale);
    CHECK(disk.test_indices == m.test_indices);
    CHECK(fs::file_size(dir / "a.vfds") == m.header_bytes + m.sample_count * m.record_bytes);

    DatasetReader reader(dir / "a.vfds");
    CHECK(reader.size() == m.sample_count);
    double mx = 0.0;
    for (std::size_t i = 0; i < reader.size(); ++i) {
        const auto rec = reader.read(i);
        mx = std::max(mx, rec.field.max_abs_component());
        const auto gen = generate_sample(cfg, i, m.scale);
        // values are stored as float32
        for (std::size_t c = 0; c < rec.field.cells(); ++c) {
            CHECK(rec.field.u()[c] == double(float(gen.field.u()[c])));
            CHECK(rec.constraint.mask.values[c] == gen.constraint.mask.values[c]);
            CHECK(rec.constraint.values.v()[c] == double(float(gen.constraint.values.v()[c])));
        }
        CHECK(gen.accepted_streamlines == m.accepted_streamlines[i]);
    }
    CHECK(mx == 1.0);
    CHECK_THROWS_AS(reader.read(10), InvalidInput);
    CHECK_THROWS_AS(build_dataset(small_config(9), dir / "c.vfds"), InvalidInput);
    fs::remove_all(dir);
}

TEST_CASE("zero-streamline samples are kept with an empty mask") {
    const auto dir = temp_dir("empty");
    auto cfg = small_config(10);
    cfg.streamlines_per_sample = 0;
    const auto m = build_dataset(cfg, dir / "d.vfds");
    CHECK(m.empty_mask_samples.size() == 10);
    DatasetReader r(dir / "d.vfds");
    CHECK(r.read(3).constraint.known_count() == 0);
    fs::remove_all(dir);
}

TEST_CASE("record file round trip and format errors") {
    const auto dir = temp_dir("io");
    VectorField f(8, 4);
    for (std::size_t i = 0; i < f.cells(); ++i) {
        f.u()[i] = 0.125 * double(i);
        f.v()[i] = -0.5;
    }
    auto cm = ConstraintMask::empty(8, 4);
    cm.mask.values[5] = 1.0;
    cm.values.u()[5] = f.u()[5];
    cm.values.v()[5] = f.v()[5];
    {
        DatasetWriter w(dir / "r.vfds", 8, 4);
        w.write(f, cm);
        w.write(f, cm);
        CHECK_THROWS_AS(w.write(VectorField(4, 4), ConstraintMask::empty(4, 4)), DimensionMismatch);
        w.finish();
    }
    DatasetReader r(dir / "r.vfds");
    REQUIRE(r.size() == 2);
    const auto rec = r.read(1);
    CHECK(rec.field == f);
    CHECK(rec.constraint.mask.values == cm.mask.values);
    CHECK(rec.constraint.values == cm.values);

    const auto good = slurp(dir / "r.vfds");
    auto restore = [&](const fs::path& p) { std::ofstream(p, std::ios::binary) << good; };

    const auto bad = dir / "bad.vfds";
    restore(bad);
    overwrite(bad, 0, "XXXX");
    CHECK(format_error_kind(bad) == FormatError::Kind::BadMagic);

    restore(bad);
    overwrite(bad, 4, std::string("\x07\x00\x00\x00", 4));
    CHECK(format_error_kind(bad) == FormatError::Kind::VersionMismatch);

    restore(bad);
    fs::resize_file(bad, good.size() - 3);
    CHECK(format_error_kind(bad) == FormatError::Kind::Truncated);

    restore(bad);
    fs::resize_file(bad, 10);
    CHECK(format_error_kind(bad) == FormatError::Kind::Truncated);

    CHECK_THROWS_AS(DatasetReader(dir / "missing.vfds"), IoError);
    fs::remove_all(dir);
}
