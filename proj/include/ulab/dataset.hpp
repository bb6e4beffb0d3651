#ifndef ULAB_DATASET_HPP
#define ULAB_DATASET_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <sstream>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ulab/error.hpp"
#include "ulab/hash.hpp"
#include "ulab/rng.hpp"

namespace ulab {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using SampleId = std::uint64_t;

/// Content hash of a sample: FNV-1a over each feature as a little-endian
/// IEEE-754 double followed by the label as a little-endian u64.
inline SampleId content_id(const Vector& features, int label) {
    Fnv1a h;
    for (Eigen::Index i = 0; i < features.size(); ++i) {
        h.update_f64(features[i]);
    }
    h.update_u64(static_cast<std::uint64_t>(label));
    return h.digest();
}

struct Sample {
    SampleId id = 0;
    Vector features;
    int label = 0;
};

inline Sample make_sample(Vector features, int label) {
    Sample s;
    s.id = content_id(features, label);
    s.features = std::move(features);
    s.label = label;
    return s;
}

/// Immutable labelled sample collection. Labels are bounded by num_classes,
/// feature vectors all have feature_dim entries and ids are unique.
class Dataset {
public:
    Dataset() = default;

    Dataset(std::size_t num_classes, std::size_t feature_dim, std::vector<Sample> samples = {})
        : num_classes_(num_classes), feature_dim_(feature_dim), samples_(std::move(samples)) {
        require(num_classes_ > 0, "dataset needs at least one class");
        require(feature_dim_ > 0, "dataset needs a positive feature dimension");
        index_.reserve(samples_.size());
        for (std::size_t i = 0; i < samples_.size(); ++i) {
            const Sample& s = samples_[i];
            require(static_cast<std::size_t>(s.features.size()) == feature_dim_,
                    "sample " + std::to_string(i) + " has " + std::to_string(s.features.size()) +
                        " features, expected " + std::to_string(feature_dim_));
            require(s.label >= 0 && static_cast<std::size_t>(s.label) < num_classes_,
                    "sample " + std::to_string(i) + " has label " + std::to_string(s.label) + " outside [0, " +
                        std::to_string(num_classes_) + ")");
            if (!index_.emplace(s.id, i).second) {
                throw Error(ErrorCode::InvalidArgument,
                            "duplicate sample content (id " + to_hex(s.id) + ") at position " + std::to_string(i),
                            s.id);
            }
        }
    }

    std::size_t size() const { return samples_.size(); }
    bool empty() const { return samples_.empty(); }
    std::size_t num_classes() const { return num_classes_; }
    std::size_t feature_dim() const { return feature_dim_; }

    std::span<const Sample> samples() const { return samples_; }
    const Sample& operator[](std::size_t i) const { return samples_[i]; }
    auto begin() const { return samples_.begin(); }
    auto end() const { return samples_.end(); }

    bool contains(SampleId id) const { return index_.contains(id); }

    std::optional<std::size_t> index_of(SampleId id) const {
        auto it = index_.find(id);
        if (it == index_.end()) {
            return std::nullopt;
        }
        return it->second;
    }

    const Sample& at_id(SampleId id) const {
        auto idx = index_of(id);
        if (!idx) {
            throw Error(ErrorCode::MembershipViolation, "sample id " + to_hex(id) + " is not in the dataset", id);
        }
        return samples_[*idx];
    }

    std::vector<SampleId> ids() const {
        std::vector<SampleId> out;
        out.reserve(samples_.size());
        for (const auto& s : samples_) {
            out.push_back(s.id);
        }
        return out;
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> counts(num_classes_, 0);
        for (const auto& s : samples_) {
            ++counts[static_cast<std::size_t>(s.label)];
        }
        return counts;
    }

    Dataset subset(std::span<const std::size_t> indices) const {
        std::vector<Sample> out;
        out.reserve(indices.size());
        for (std::size_t i : indices) {
            require(i < samples_.size(), "subset index out of range");
            out.push_back(samples_[i]);
        }
        return Dataset(num_classes_, feature_dim_, std::move(out));
    }

    Dataset with_samples(std::vector<Sample> samples) const {
        return Dataset(num_classes_, feature_dim_, std::move(samples));
    }

private:
    std::size_t num_classes_ = 1;
    std::size_t feature_dim_ = 1;
    std::vector<Sample> samples_;
    std::unordered_map<SampleId, std::size_t> index_;
};

/// Isotropic Gaussian clusters, one per class. Class means sit on a regular
/// simplex with pairwise distance mean_distance when feature_dim >= num_classes,
/// otherwise on a circle (or a line in one dimension) with neighbouring means
/// mean_distance apart.
inline Dataset generate_blobs(std::size_t num_classes, std::size_t per_class, std::size_t feature_dim, double spread,
                              std::uint64_t seed, double mean_distance = 2.0) {
    require(num_classes > 0, "num_classes must be positive");
    require(per_class >= 1, "per_class must be at least 1");
    require(feature_dim > 0, "feature_dim must be positive");
    require(spread > 0.0, "spread must be positive");
    require(mean_distance > 0.0, "mean_distance must be positive");

    std::vector<Vector> means(num_classes, Vector::Zero(static_cast<Eigen::Index>(feature_dim)));
    if (feature_dim >= num_classes) {
        for (std::size_t c = 0; c < num_classes; ++c) {
            means[c][static_cast<Eigen::Index>(c)] = mean_distance / std::numbers::sqrt2;
        }
    } else if (feature_dim >= 2) {
        const double radius = num_classes == 1 ? 0.0
                                               : mean_distance / (2.0 * std::sin(std::numbers::pi / num_classes));
        for (std::size_t c = 0; c < num_classes; ++c) {
            const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(num_classes);
            means[c][0] = radius * std::cos(angle);
            means[c][1] = radius * std::sin(angle);
        }
    } else {
        for (std::size_t c = 0; c < num_classes; ++c) {
            means[c][0] = mean_distance * static_cast<double>(c);
        }
    }

    Rng rng(derive_seed(seed, {0xb10b5}));
    std::normal_distribution<double> noise(0.0, spread);
    std::vector<Sample> samples;
    samples.reserve(num_classes * per_class);
    for (std::size_t c = 0; c < num_classes; ++c) {
        for (std::size_t i = 0; i < per_class; ++i) {
            Vector x = means[c];
            for (Eigen::Index j = 0; j < x.size(); ++j) {
                x[j] += noise(rng);
            }
            samples.push_back(make_sample(std::move(x), static_cast<int>(c)));
        }
    }
    return Dataset(num_classes, feature_dim, std::move(samples));
}

// IDX files: big-endian u32 magic, big-endian u32 dimension sizes, then u8 payload.
namespace detail {

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorCode::Io, "cannot open " + path);
    }
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset, const std::string& path) {
    if (offset + 4 > bytes.size()) {
        throw Error(ErrorCode::Truncated, path + ": header ends at byte " + std::to_string(bytes.size()));
    }
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
    const char buf[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
    out.write(buf, 4);
}

} // namespace detail

inline constexpr std::uint32_t idx_images_magic = 0x00000803;
inline constexpr std::uint32_t idx_labels_magic = 0x00000801;

/// Reads an IDX image/label pair. Pixels are scaled by 1/255 and flattened
/// row-major. `limit` keeps only the first samples when non-zero.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t limit = 0) {
    const auto images = detail::read_file_bytes(images_path);
    const auto labels = detail::read_file_bytes(labels_path);

    const std::uint32_t image_magic = detail::read_be32(images, 0, images_path);
    if (image_magic != idx_images_magic) {
        throw Error(ErrorCode::BadMagic, images_path + ": expected image magic 0x00000803, got " + to_hex(image_magic));
    }
    const std::uint32_t label_magic = detail::read_be32(labels, 0, labels_path);
    if (label_magic != idx_labels_magic) {
        throw Error(ErrorCode::BadMagic, labels_path + ": expected label magic 0x00000801, got " + to_hex(label_magic));
    }

    const std::size_t n_images = detail::read_be32(images, 4, images_path);
    const std::size_t rows = detail::read_be32(images, 8, images_path);
    const std::size_t cols = detail::read_be32(images, 12, images_path);
    const std::size_t n_labels = detail::read_be32(labels, 4, labels_path);
    if (n_images != n_labels) {
        throw Error(ErrorCode::CountMismatch, "image file holds " + std::to_string(n_images) +
                                                  " items but label file holds " + std::to_string(n_labels));
    }
    const std::size_t dim = rows * cols;
    require(dim > 0, images_path + ": zero-sized images");
    if (images.size() < 16 + n_images * dim) {
        throw Error(ErrorCode::Truncated, images_path + ": expected " + std::to_string(16 + n_images * dim) +
                                              " bytes, found " + std::to_string(images.size()));
    }
    if (labels.size() < 8 + n_labels) {
        throw Error(ErrorCode::Truncated, labels_path + ": expected " + std::to_string(8 + n_labels) +
                                              " bytes, found " + std::to_string(labels.size()));
    }

    const std::size_t n = limit > 0 ? std::min(limit, n_images) : n_images;
    std::vector<Sample> samples;
    samples.reserve(n);
    int max_label = 0;
    for (std::size_t i = 0; i < n; ++i) {
        Vector x(static_cast<Eigen::Index>(dim));
        const unsigned char* px = images.data() + 16 + i * dim;
        for (std::size_t j = 0; j < dim; ++j) {
            x[static_cast<Eigen::Index>(j)] = static_cast<double>(px[j]) / 255.0;
        }
        const int label = labels[8 + i];
        max_label = std::max(max_label, label);
        samples.push_back(make_sample(std::move(x), label));
    }
    const std::size_t classes = std::max<std::size_t>(10, static_cast<std::size_t>(max_label) + 1);
    return Dataset(classes, dim, std::move(samples));
}

/// Writes raw IDX files; used for fixtures and for exporting byte-valued data.
inline void save_idx(const std::string& images_path, const std::string& labels_path, std::size_t rows,
                     std::size_t cols, std::span<const std::vector<unsigned char>> images,
                     std::span<const unsigned char> labels) {
    std::ofstream img(images_path, std::ios::binary);
    std::ofstream lab(labels_path, std::ios::binary);
    if (!img || !lab) {
        throw Error(ErrorCode::Io, "cannot write IDX files " + images_path + ", " + labels_path);
    }
    detail::write_be32(img, idx_images_magic);
    detail::write_be32(img, static_cast<std::uint32_t>(images.size()));
    detail::write_be32(img, static_cast<std::uint32_t>(rows));
    detail::write_be32(img, static_cast<std::uint32_t>(cols));
    for (const auto& im : images) {
        require(im.size() == rows * cols, "image size does not match rows*cols");
        img.write(reinterpret_cast<const char*>(im.data()), static_cast<std::streamsize>(im.size()));
    }
    detail::write_be32(lab, idx_labels_magic);
    detail::write_be32(lab, static_cast<std::uint32_t>(labels.size()));
    lab.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) {
            cell.pop_back();
        }
        cell.erase(0, cell.find_first_not_of(' '));
        cells.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') {
        cells.emplace_back();
    }
    return cells;
}

inline double parse_cell(const std::string& cell, std::size_t row, std::size_t col) {
    std::size_t used = 0;
    double value = 0.0;
    try {
        value = std::stod(cell, &used);
    } catch (...) {
        used = 0;
    }
    if (used == 0 || used != cell.size()) {
        throw Error(ErrorCode::Parse,
                    "row " + std::to_string(row) + ", column " + std::to_string(col) + ": non-numeric cell '" + cell + "'",
                    row);
    }
    return value;
}

} // namespace detail

/// Reads a numeric CSV with a header row. Features are every non-label column
/// in header order; labels must be non-negative integers. Row numbers in
/// errors count the header as row 1.
inline Dataset load_csv(const std::string& path, const std::string& label_column = "label",
                        std::size_t num_classes = 0) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::Io, "cannot open " + path);
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw Error(ErrorCode::Parse, path + ": missing header", 1);
    }
    const auto header = detail::split_csv_line(line);
    auto label_it = std::find(header.begin(), header.end(), label_column);
    if (label_it == header.end()) {
        throw Error(ErrorCode::Parse, path + ": unknown label column '" + label_column + "'", 1);
    }
    const std::size_t label_idx = static_cast<std::size_t>(label_it - header.begin());
    const std::size_t dim = header.size() - 1;
    require(dim > 0, path + ": no feature columns");

    std::vector<Sample> samples;
    int max_label = -1;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line == "\r") {
            continue;
        }
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size()) {
            throw Error(ErrorCode::Parse,
                        path + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                            " cells, header has " + std::to_string(header.size()),
                        row);
        }
        Vector x(static_cast<Eigen::Index>(dim));
        int label = 0;
        Eigen::Index j = 0;
        for (std::size_t c = 0; c < cells.size(); ++c) {
            const double v = detail::parse_cell(cells[c], row, c + 1);
            if (c == label_idx) {
                if (v < 0 || v != std::floor(v)) {
                    throw Error(ErrorCode::Parse,
                                path + ": row " + std::to_string(row) + " label is not a non-negative integer", row);
                }
                label = static_cast<int>(v);
            } else {
                x[j++] = v;
            }
        }
        max_label = std::max(max_label, label);
        samples.push_back(make_sample(std::move(x), label));
    }
    const std::size_t classes = num_classes > 0 ? num_classes : static_cast<std::size_t>(std::max(max_label, 0) + 1);
    return Dataset(classes, dim, std::move(samples));
}

/// Snapshot writer matching load_csv: columns f0..f{d-1} then the label column.
/// Values use 17 significant digits so a reload reproduces every id.
inline void save_csv(const Dataset& d, const std::string& path, const std::string& label_column = "label") {
    std::ofstream out(path);
    if (!out) {
        throw Error(ErrorCode::Io, "cannot write " + path);
    }
    for (std::size_t j = 0; j < d.feature_dim(); ++j) {
        out << 'f' << j << ',';
    }
    out << label_column << '\n';
    char buf[40];
    for (const auto& s : d) {
        for (Eigen::Index j = 0; j < s.features.size(); ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", s.features[j]);
            out << buf << ',';
        }
        out << s.label << '\n';
    }
    if (!out) {
        throw Error(ErrorCode::Io, "write failed for " + path);
    }
}

struct SplitSpec {
    double primary_fraction = 0.7;
    std::uint64_t seed = 0;
};

/// Stratified split. Each class contributes floor(fraction * count) samples
/// to the primary side, and the leftover seats (so that the primary size is
/// round(fraction * |d|)) go to the classes with the largest remainders, lowest
/// class first on ties. Both sides keep the input order.
inline std::pair<Dataset, Dataset> split_primary_backup(const Dataset& d, const SplitSpec& spec) {
    require(spec.primary_fraction > 0.0 && spec.primary_fraction <= 1.0, "primary_fraction must lie in (0, 1]");
    const auto counts = d.class_counts();
    const std::size_t target = static_cast<std::size_t>(std::llround(spec.primary_fraction * static_cast<double>(d.size())));

    std::vector<std::size_t> take(counts.size());
    std::vector<double> remainder(counts.size());
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        const double quota = spec.primary_fraction * static_cast<double>(counts[c]);
        take[c] = static_cast<std::size_t>(std::floor(quota));
        remainder[c] = quota - static_cast<double>(take[c]);
        assigned += take[c];
    }
    std::vector<std::size_t> order(counts.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
    for (std::size_t k = 0; assigned < target && k < order.size(); ++k) {
        if (take[order[k]] < counts[order[k]]) {
            ++take[order[k]];
            ++assigned;
        }
    }

    std::vector<std::vector<std::size_t>> by_class(counts.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        by_class[static_cast<std::size_t>(d[i].label)].push_back(i);
    }
    std::vector<char> in_primary(d.size(), 0);
    for (std::size_t c = 0; c < counts.size(); ++c) {
        Rng rng(derive_seed(spec.seed, {0x5b117, c}));
        auto& idx = by_class[c];
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t k = 0; k < take[c]; ++k) {
            in_primary[idx[k]] = 1;
        }
    }
    std::vector<std::size_t> primary, backup;
    for (std::size_t i = 0; i < d.size(); ++i) {
        (in_primary[i] ? primary : backup).push_back(i);
    }
    return {d.subset(primary), d.subset(backup)};
}

/// Membership check for an unlearn request: every id must belong to d and
/// appear once. Throws MembershipViolation naming the first offender.
inline void validate_membership(const Dataset& d, std::span<const SampleId> ids) {
    std::unordered_set<SampleId> seen;
    for (SampleId id : ids) {
        if (!d.contains(id)) {
            throw Error(ErrorCode::MembershipViolation,
                        "unlearn request names id " + to_hex(id) + " which is not in the training set", id);
        }
        if (!seen.insert(id).second) {
            throw Error(ErrorCode::InvalidArgument, "unlearn request repeats id " + to_hex(id), id);
        }
    }
}

/// D_r = d minus ids, survivors in their original order.
inline Dataset remove_by_ids(const Dataset& d, std::span<const SampleId> ids) {
    validate_membership(d, ids);
    std::unordered_set<SampleId> drop(ids.begin(), ids.end());
    std::vector<std::size_t> keep;
    keep.reserve(d.size() - drop.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!drop.contains(d[i].id)) {
            keep.push_back(i);
        }
    }
    return d.subset(keep);
}

/// Samples named by ids, in request order.
inline Dataset select_by_ids(const Dataset& d, std::span<const SampleId> ids) {
    validate_membership(d, ids);
    std::vector<std::size_t> idx;
    idx.reserve(ids.size());
    for (SampleId id : ids) {
        idx.push_back(*d.index_of(id));
    }
    return d.subset(idx);
}

inline Dataset concat(const Dataset& a, const Dataset& b) {
    require(a.feature_dim() == b.feature_dim(), "concat: feature dimensions differ");
    std::vector<Sample> out(a.begin(), a.end());
    out.insert(out.end(), b.begin(), b.end());
    return Dataset(std::max(a.num_classes(), b.num_classes()), a.feature_dim(), std::move(out));
}

/// Seeded split of a dataset into a held-out part (test_fraction) and the rest.
inline std::pair<Dataset, Dataset> split_train_test(const Dataset& d, double test_fraction, std::uint64_t seed) {
    require(test_fraction >= 0.0 && test_fraction < 1.0, "test_fraction must lie in [0, 1)");
    auto [train, test] = split_primary_backup(d, SplitSpec{1.0 - test_fraction, seed});
    return {std::move(train), std::move(test)};
}

} // namespace ulab

#endif
