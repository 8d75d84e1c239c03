#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>

#include "flowforge/field.hpp"
#include "flowforge/streamline.hpp"

namespace flowforge {

// VFDS layout, little-endian:
//   "VFDS" | u32 version | u32 width | u32 height | u32 count | u32 planes
//   then `count` records of `planes` float32 planes (u, v, mask, mval_u, mval_v),
//   each plane width*height values, row-major.
inline constexpr char kDatasetMagic[4] = {'V', 'F', 'D', 'S'};
inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::uint32_t kDatasetPlanes = 5;
inline constexpr std::size_t kDatasetHeaderBytes = 24;

struct DatasetRecord {
    VectorField field;
    ConstraintMask constraint;
};

std::size_t dataset_record_bytes(int width, int height);

class DatasetWriter {
public:
    DatasetWriter(const std::filesystem::path& path, int width, int height);
    ~DatasetWriter();
    DatasetWriter(const DatasetWriter&) = delete;
    DatasetWriter& operator=(const DatasetWriter&) = delete;

    void write(const VectorField& field, const ConstraintMask& constraint);
    /// Patches the record count into the header and closes the file.
    void finish();
    std::size_t count() const { return count_; }

private:
    std::filesystem::path path_;
    std::ofstream out_;
    int width_;
    int height_;
    std::size_t count_ = 0;
    bool finished_ = false;
};

/// Random access over a VFDS file; records are read on demand.
class DatasetReader {
public:
    explicit DatasetReader(const std::filesystem::path& path);

    int width() const { return width_; }
    int height() const { return height_; }
    std::size_t size() const { return count_; }
    DatasetRecord read(std::size_t index);

private:
    std::ifstream in_;
    int width_ = 0;
    int height_ = 0;
    std::size_t count_ = 0;
    std::vector<float> buffer_;
};

void write_single_record(const std::filesystem::path& path, const VectorField& field,
                         const ConstraintMask& constraint);

}  // namespace flowforge
