#include "flowforge/dataset_io.hpp"

#include <array>
#include <cstring>
#include <string>

#include "binary_io.hpp"
#include "flowforge/errors.hpp"

namespace flowforge {

std::size_t dataset_record_bytes(int width, int height) {
    return std::size_t(kDatasetPlanes) * std::size_t(width) * std::size_t(height) * sizeof(float);
}

DatasetWriter::DatasetWriter(const std::filesystem::path& path, int width, int height)
    : path_(path), out_(path, std::ios::binary | std::ios::trunc), width_(width), height_(height) {
    if (!out_) throw IoError("cannot open " + path.string() + " for writing");
    out_.write(kDatasetMagic, 4);
    detail::put_u32(out_, kDatasetVersion);
    detail::put_u32(out_, std::uint32_t(width));
    detail::put_u32(out_, std::uint32_t(height));
    detail::put_u32(out_, 0);
    detail::put_u32(out_, kDatasetPlanes);
}

DatasetWriter::~DatasetWriter() {
    if (!finished_) {
        try {
            finish();
        } catch (...) {
        }
    }
}

void DatasetWriter::write(const VectorField& field, const ConstraintMask& constraint) {
    if (field.width() != width_ || field.height() != height_ || constraint.width() != width_ ||
        constraint.height() != height_) {
        throw DimensionMismatch("dataset record does not match the file's grid size");
    }
    const std::size_t n = field.cells();
    std::vector<float> plane(n);
    auto emit = [&](const std::vector<double>& src) {
        for (std::size_t i = 0; i < n; ++i) plane[i] = float(src[i]);
        detail::put_f32s(out_, plane);
    };
    emit(field.u());
    emit(field.v());
    emit(constraint.mask.values);
    emit(constraint.values.u());
    emit(constraint.values.v());
    if (!out_) throw IoError("write failed on " + path_.string());
    ++count_;
}

void DatasetWriter::finish() {
    if (finished_) return;
    finished_ = true;
    out_.seekp(16);
    detail::put_u32(out_, std::uint32_t(count_));
    out_.close();
    if (!out_) throw IoError("failed to finalize " + path_.string());
}

DatasetReader::DatasetReader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open " + path.string());
    std::array<unsigned char, kDatasetHeaderBytes> header{};
    in_.read(reinterpret_cast<char*>(header.data()), std::streamsize(header.size()));
    const auto got = std::size_t(in_.gcount());
    if (got >= 4 && std::memcmp(header.data(), kDatasetMagic, 4) != 0) {
        throw FormatError(FormatError::Kind::BadMagic, path.string() + " is not a VFDS dataset");
    }
    if (got < header.size()) throw FormatError(FormatError::Kind::Truncated, path.string() + ": truncated header");
    const std::uint32_t version = detail::get_u32(header.data() + 4);
    if (version != kDatasetVersion) {
        throw FormatError(FormatError::Kind::VersionMismatch,
                          path.string() + ": dataset version " + std::to_string(version) + ", expected " +
                              std::to_string(kDatasetVersion));
    }
    width_ = int(detail::get_u32(header.data() + 8));
    height_ = int(detail::get_u32(header.data() + 12));
    count_ = detail::get_u32(header.data() + 16);
    const std::uint32_t planes = detail::get_u32(header.data() + 20);
    if (planes != kDatasetPlanes || width_ < VectorField::kMinSide || height_ < VectorField::kMinSide) {
        throw FormatError(FormatError::Kind::Malformed, path.string() + ": bad grid header");
    }
    const auto expected = kDatasetHeaderBytes + count_ * dataset_record_bytes(width_, height_);
    const auto actual = std::filesystem::file_size(path);
    if (actual < expected) {
        throw FormatError(FormatError::Kind::Truncated, path.string() + ": " + std::to_string(actual) +
                                                            " bytes, header promises " + std::to_string(expected));
    }
    buffer_.resize(dataset_record_bytes(width_, height_) / sizeof(float));
}

DatasetRecord DatasetReader::read(std::size_t index) {
    if (index >= count_) throw InvalidInput("dataset index " + std::to_string(index) + " out of range");
    const std::size_t rec = dataset_record_bytes(width_, height_);
    in_.clear();
    in_.seekg(std::streamoff(kDatasetHeaderBytes + index * rec));
    in_.read(reinterpret_cast<char*>(buffer_.data()), std::streamsize(rec));
    if (std::size_t(in_.gcount()) != rec) throw FormatError(FormatError::Kind::Truncated, "truncated record");
    detail::fix_f32s_from_le(buffer_);

    const std::size_t n = std::size_t(width_) * height_;
    DatasetRecord r{VectorField(width_, height_), ConstraintMask::empty(width_, height_)};
    for (std::size_t i = 0; i < n; ++i) {
        r.field.u()[i] = buffer_[i];
        r.field.v()[i] = buffer_[n + i];
        r.constraint.mask.values[i] = buffer_[2 * n + i];
        r.constraint.values.u()[i] = buffer_[3 * n + i];
        r.constraint.values.v()[i] = buffer_[4 * n + i];
    }
    return r;
}

void write_single_record(const std::filesystem::path& path, const VectorField& field,
                         const ConstraintMask& constraint) {
    DatasetWriter w(path, field.width(), field.height());
    w.write(field, constraint);
    w.finish();
}

}  // namespace flowforge
