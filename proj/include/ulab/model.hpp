#ifndef ULAB_MODEL_HPP
#define ULAB_MODEL_HPP

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ulab/dataset.hpp"
#include "ulab/error.hpp"
#include "ulab/hash.hpp"
#include "ulab/rng.hpp"

namespace ulab {

enum class ModelKind : std::uint8_t { Logistic = 0, Mlp = 1 };
enum class Activation : std::uint8_t { ReLU = 0, Tanh = 1 };

/// Classifier shape. `l2` adds l2 * ||theta||^2 to the mean cross-entropy.
struct Architecture {
    ModelKind kind = ModelKind::Logistic;
    std::size_t feature_dim = 1;
    std::size_t num_classes = 2;
    std::size_t hidden_dim = 0;
    Activation activation = Activation::ReLU;
    double l2 = 0.0;

    static Architecture logistic(std::size_t feature_dim, std::size_t num_classes, double l2 = 0.0) {
        return {ModelKind::Logistic, feature_dim, num_classes, 0, Activation::ReLU, l2};
    }

    static Architecture mlp(std::size_t feature_dim, std::size_t num_classes, std::size_t hidden_dim,
                            Activation activation = Activation::ReLU, double l2 = 0.0) {
        return {ModelKind::Mlp, feature_dim, num_classes, hidden_dim, activation, l2};
    }

    std::size_t parameter_count() const {
        if (kind == ModelKind::Logistic) {
            return num_classes * feature_dim + num_classes;
        }
        return hidden_dim * feature_dim + hidden_dim + num_classes * hidden_dim + num_classes;
    }

    std::size_t embedding_dim() const { return kind == ModelKind::Logistic ? num_classes : hidden_dim; }

    void validate() const {
        require(feature_dim > 0, "architecture: feature_dim must be positive");
        require(num_classes > 0, "architecture: num_classes must be positive");
        require(kind == ModelKind::Logistic || hidden_dim > 0, "architecture: MLP needs hidden_dim > 0");
        require(l2 >= 0.0 && std::isfinite(l2), "architecture: l2 must be a finite non-negative number");
    }

    bool operator==(const Architecture&) const = default;
};

struct ModelState {
    Architecture arch;
    Vector theta;
    std::uint64_t rng_seed = 0;
};

enum class Optimizer : std::uint8_t { Adam, Sgd };

struct TrainConfig {
    std::size_t epochs = 10;
    double learning_rate = 1e-3;
    std::size_t batch_size = 32;
    Optimizer optimizer = Optimizer::Adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;

    void validate() const {
        require(learning_rate > 0.0, "train config: learning_rate must be positive");
        require(batch_size > 0, "train config: batch_size must be positive");
        require(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0, "train config: betas must lie in (0, 1)");
        require(adam_eps > 0.0, "train config: adam_eps must be positive");
    }
};

struct Prediction {
    int label = 0;
    Vector logits;
    Vector probabilities;
};

using SampleRefs = std::vector<const Sample*>;

inline SampleRefs refs_of(const Dataset& d) {
    SampleRefs out;
    out.reserve(d.size());
    for (const auto& s : d) {
        out.push_back(&s);
    }
    return out;
}

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstWeights = Eigen::Map<const RowMatrix>;
using Weights = Eigen::Map<RowMatrix>;

struct Batch {
    Matrix x; // one row per sample
    std::vector<int> y;
};

inline Batch gather(std::span<const Sample* const> samples, std::size_t dim) {
    Batch b;
    b.x.resize(static_cast<Eigen::Index>(samples.size()), static_cast<Eigen::Index>(dim));
    b.y.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        require(static_cast<std::size_t>(samples[i]->features.size()) == dim,
                "sample has " + std::to_string(samples[i]->features.size()) + " features, model expects " +
                    std::to_string(dim));
        b.x.row(static_cast<Eigen::Index>(i)) = samples[i]->features.transpose();
        b.y.push_back(samples[i]->label);
    }
    return b;
}

inline void softmax_rows(Matrix& z) {
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const double mx = z.row(i).maxCoeff();
        z.row(i) = (z.row(i).array() - mx).exp();
        z.row(i) /= z.row(i).sum();
    }
}

inline double activate(double v, Activation a) { return a == Activation::ReLU ? std::max(v, 0.0) : std::tanh(v); }

inline double activate_grad(double pre, double post, Activation a) {
    return a == Activation::ReLU ? (pre > 0.0 ? 1.0 : 0.0) : 1.0 - post * post;
}

/// Parameter blocks viewed in place: Logistic [W (C x D) | b (C)],
/// Mlp [W1 (H x D) | b1 (H) | W2 (C x H) | b2 (C)], all row-major.
struct Layout {
    std::size_t d, c, h;
    explicit Layout(const Architecture& a) : d(a.feature_dim), c(a.num_classes), h(a.hidden_dim) {}
    std::size_t w1() const { return 0; }
    std::size_t b1() const { return h * d; }
    std::size_t w2() const { return h * d + h; }
    std::size_t b2() const { return h * d + h + c * h; }
};

struct ForwardPass {
    Matrix pre;    // B x H (Mlp)
    Matrix hidden; // B x H (Mlp)
    Matrix logits; // B x C
    Matrix probs;  // B x C
};

inline ForwardPass forward(const Architecture& arch, const Vector& theta, const Matrix& x) {
    ForwardPass f;
    const auto B = x.rows();
    const auto C = static_cast<Eigen::Index>(arch.num_classes);
    const auto D = static_cast<Eigen::Index>(arch.feature_dim);
    if (arch.kind == ModelKind::Logistic) {
        ConstWeights w(theta.data(), C, D);
        f.logits = x * w.transpose();
        f.logits.rowwise() += theta.segment(C * D, C).transpose();
    } else {
        const Layout lay(arch);
        const auto H = static_cast<Eigen::Index>(arch.hidden_dim);
        ConstWeights w1(theta.data() + lay.w1(), H, D);
        ConstWeights w2(theta.data() + lay.w2(), C, H);
        f.pre = x * w1.transpose();
        f.pre.rowwise() += theta.segment(static_cast<Eigen::Index>(lay.b1()), H).transpose();
        f.hidden = f.pre.unaryExpr([&](double v) { return activate(v, arch.activation); });
        f.logits = f.hidden * w2.transpose();
        f.logits.rowwise() += theta.segment(static_cast<Eigen::Index>(lay.b2()), C).transpose();
    }
    f.probs = f.logits;
    softmax_rows(f.probs);
    (void)B;
    return f;
}

/// Sum over the batch of cross-entropy, and (if grad != nullptr) the sum of
/// per-sample cross-entropy gradients scaled by `scale` added into *grad.
inline double cross_entropy(const Architecture& arch, const Vector& theta, const Batch& b, Vector* grad,
                            double scale) {
    ForwardPass f = forward(arch, theta, b.x);
    const auto B = b.x.rows();
    double total = 0.0;
    for (Eigen::Index i = 0; i < B; ++i) {
        const double mx = f.logits.row(i).maxCoeff();
        const double lse = mx + std::log((f.logits.row(i).array() - mx).exp().sum());
        total += lse - f.logits(i, b.y[static_cast<std::size_t>(i)]);
    }
    if (grad == nullptr) {
        return total;
    }
    Matrix dz = f.probs;
    for (Eigen::Index i = 0; i < B; ++i) {
        dz(i, b.y[static_cast<std::size_t>(i)]) -= 1.0;
    }
    dz *= scale;
    const auto C = static_cast<Eigen::Index>(arch.num_classes);
    const auto D = static_cast<Eigen::Index>(arch.feature_dim);
    if (arch.kind == ModelKind::Logistic) {
        Weights gw(grad->data(), C, D);
        gw.noalias() += dz.transpose() * b.x;
        grad->segment(C * D, C) += dz.colwise().sum().transpose();
    } else {
        const Layout lay(arch);
        const auto H = static_cast<Eigen::Index>(arch.hidden_dim);
        ConstWeights w2(theta.data() + lay.w2(), C, H);
        Weights gw2(grad->data() + lay.w2(), C, H);
        gw2.noalias() += dz.transpose() * f.hidden;
        grad->segment(static_cast<Eigen::Index>(lay.b2()), C) += dz.colwise().sum().transpose();
        Matrix dh = dz * w2;
        for (Eigen::Index i = 0; i < dh.rows(); ++i) {
            for (Eigen::Index j = 0; j < dh.cols(); ++j) {
                dh(i, j) *= activate_grad(f.pre(i, j), f.hidden(i, j), arch.activation);
            }
        }
        Weights gw1(grad->data() + lay.w1(), H, D);
        gw1.noalias() += dh.transpose() * b.x;
        grad->segment(static_cast<Eigen::Index>(lay.b1()), H) += dh.colwise().sum().transpose();
    }
    return total;
}

inline void check_dims(const ModelState& m) {
    require(static_cast<std::size_t>(m.theta.size()) == m.arch.parameter_count(),
            "theta has " + std::to_string(m.theta.size()) + " entries, architecture needs " +
                std::to_string(m.arch.parameter_count()));
}

inline void check_sample(const ModelState& m, const Sample& s) {
    require(static_cast<std::size_t>(s.features.size()) == m.arch.feature_dim,
            "sample has " + std::to_string(s.features.size()) + " features, model expects " +
                std::to_string(m.arch.feature_dim));
}

inline int argmax_lowest(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
    int best = 0;
    for (Eigen::Index j = 1; j < row.size(); ++j) {
        if (row[j] > row[best]) {
            best = static_cast<int>(j);
        }
    }
    return best;
}

} // namespace detail

/// Zero weights for Logistic. Mlp weights are uniform in (-a, a) with
/// a = sqrt(6 / (fan_in + fan_out)) per layer; biases start at zero.
inline ModelState init(const Architecture& arch, std::uint64_t seed) {
    arch.validate();
    ModelState m{arch, Vector::Zero(static_cast<Eigen::Index>(arch.parameter_count())), seed};
    if (arch.kind == ModelKind::Mlp) {
        const detail::Layout lay(arch);
        Rng rng(derive_seed(seed, {0x1417}));
        auto fill = [&](std::size_t offset, std::size_t count, double fan_in, double fan_out) {
            const double a = std::sqrt(6.0 / (fan_in + fan_out));
            std::uniform_real_distribution<double> u(-a, a);
            for (std::size_t i = 0; i < count; ++i) {
                m.theta[static_cast<Eigen::Index>(offset + i)] = u(rng);
            }
        };
        const auto d = static_cast<double>(arch.feature_dim);
        const auto h = static_cast<double>(arch.hidden_dim);
        const auto c = static_cast<double>(arch.num_classes);
        fill(lay.w1(), arch.hidden_dim * arch.feature_dim, d, h);
        fill(lay.w2(), arch.num_classes * arch.hidden_dim, h, c);
    }
    return m;
}

/// Mean cross-entropy plus l2 * ||theta||^2 over the given samples.
inline double loss(const ModelState& m, std::span<const Sample* const> samples) {
    detail::check_dims(m);
    require(!samples.empty(), "loss: empty sample set");
    const auto b = detail::gather(samples, m.arch.feature_dim);
    return detail::cross_entropy(m.arch, m.theta, b, nullptr, 0.0) / static_cast<double>(samples.size()) +
           m.arch.l2 * m.theta.squaredNorm();
}

inline double loss(const ModelState& m, const Dataset& d) {
    const auto r = refs_of(d);
    return loss(m, r);
}

/// Gradient of `loss` with respect to theta.
inline Vector grad(const ModelState& m, std::span<const Sample* const> samples) {
    detail::check_dims(m);
    require(!samples.empty(), "grad: empty sample set");
    Vector g = Vector::Zero(m.theta.size());
    const auto b = detail::gather(samples, m.arch.feature_dim);
    detail::cross_entropy(m.arch, m.theta, b, &g, 1.0 / static_cast<double>(samples.size()));
    g += 2.0 * m.arch.l2 * m.theta;
    return g;
}

inline Vector grad(const ModelState& m, const Dataset& d) {
    const auto r = refs_of(d);
    return grad(m, r);
}

/// Gradient of the single-sample objective CE(z) + l2 * ||theta||^2.
inline Vector sample_grad(const ModelState& m, const Sample& s) {
    const Sample* p = &s;
    return grad(m, std::span<const Sample* const>(&p, 1));
}

/// Hessian-vector product of `loss`. Logistic uses the exact softmax
/// curvature; Mlp uses a central difference of grad along v / ||v||
/// with step 1e-4 * (1 + ||theta||_inf), rescaled by ||v||.
inline Vector hvp(const ModelState& m, std::span<const Sample* const> samples, const Vector& v) {
    detail::check_dims(m);
    require(!samples.empty(), "hvp: empty sample set");
    require(v.size() == m.theta.size(), "hvp: direction has " + std::to_string(v.size()) + " entries, expected " +
                                            std::to_string(m.theta.size()));
    const auto C = static_cast<Eigen::Index>(m.arch.num_classes);
    const auto D = static_cast<Eigen::Index>(m.arch.feature_dim);
    if (m.arch.kind == ModelKind::Logistic) {
        const auto b = detail::gather(samples, m.arch.feature_dim);
        const auto f = detail::forward(m.arch, m.theta, b.x);
        detail::ConstWeights vw(v.data(), C, D);
        Matrix dz = b.x * vw.transpose();
        dz.rowwise() += v.segment(C * D, C).transpose();
        Matrix pdz = f.probs.cwiseProduct(dz);
        const Vector inner = pdz.rowwise().sum();
        Matrix dg = pdz - (f.probs.array().colwise() * inner.array()).matrix();
        dg /= static_cast<double>(samples.size());
        Vector out(v.size());
        detail::Weights ow(out.data(), C, D);
        ow.noalias() = dg.transpose() * b.x;
        out.segment(C * D, C) = dg.colwise().sum().transpose();
        out += 2.0 * m.arch.l2 * v;
        return out;
    }
    const double norm = v.norm();
    if (norm == 0.0) {
        return Vector::Zero(v.size());
    }
    const Vector u = v / norm;
    const double eps = 1e-4 * (1.0 + m.theta.cwiseAbs().maxCoeff());
    ModelState plus = m;
    ModelState minus = m;
    plus.theta += eps * u;
    minus.theta -= eps * u;
    return (grad(plus, samples) - grad(minus, samples)) * (norm / (2.0 * eps));
}

inline Vector hvp(const ModelState& m, const Dataset& d, const Vector& v) {
    const auto r = refs_of(d);
    return hvp(m, r, v);
}

enum class FisherEstimator { SampledLabel, ExactEnumeration };

/// Diagonal of the empirical Fisher E[(d log p(y|x) / d theta)^2]. With
/// SampledLabel, y is drawn once per sample from the model's own predictive
/// distribution; ExactEnumeration sums over all classes weighted by p(y|x)
/// and is limited to 16 classes.
inline Vector fisher_diag(const ModelState& m, std::span<const Sample* const> samples, std::uint64_t seed,
                          FisherEstimator estimator = FisherEstimator::SampledLabel) {
    detail::check_dims(m);
    require(!samples.empty(), "fisher_diag: empty sample set");
    require(estimator == FisherEstimator::SampledLabel || m.arch.num_classes <= 16,
            "fisher_diag: exact enumeration supports at most 16 classes");
    Rng rng(derive_seed(seed, {0xf15e}));
    Vector acc = Vector::Zero(m.theta.size());
    detail::Batch one;
    one.y.resize(1);
    for (const Sample* s : samples) {
        detail::check_sample(m, *s);
        one.x = s->features.transpose();
        const auto f = detail::forward(m.arch, m.theta, one.x);
        const Eigen::RowVectorXd p = f.probs.row(0);
        if (estimator == FisherEstimator::SampledLabel) {
            std::discrete_distribution<int> draw(p.data(), p.data() + p.size());
            one.y[0] = draw(rng);
            Vector g = Vector::Zero(m.theta.size());
            detail::cross_entropy(m.arch, m.theta, one, &g, 1.0);
            acc += g.cwiseAbs2();
        } else {
            for (Eigen::Index y = 0; y < p.size(); ++y) {
                one.y[0] = static_cast<int>(y);
                Vector g = Vector::Zero(m.theta.size());
                detail::cross_entropy(m.arch, m.theta, one, &g, 1.0);
                acc += p[y] * g.cwiseAbs2();
            }
        }
    }
    return acc / static_cast<double>(samples.size());
}

inline Vector fisher_diag(const ModelState& m, const Dataset& d, std::uint64_t seed,
                          FisherEstimator estimator = FisherEstimator::SampledLabel) {
    const auto r = refs_of(d);
    return fisher_diag(m, r, seed, estimator);
}

/// Class prediction; ties go to the lowest class index.
inline Prediction predict(const ModelState& m, const Sample& s) {
    detail::check_dims(m);
    detail::check_sample(m, s);
    const Matrix x = s.features.transpose();
    const auto f = detail::forward(m.arch, m.theta, x);
    Prediction p;
    p.logits = f.logits.row(0).transpose();
    p.probabilities = f.probs.row(0).transpose();
    p.label = detail::argmax_lowest(f.probs.row(0));
    return p;
}

/// Logits for every sample of d, one row per sample.
inline Matrix logits(const ModelState& m, const Dataset& d) {
    detail::check_dims(m);
    const auto r = refs_of(d);
    const auto b = detail::gather(r, m.arch.feature_dim);
    return detail::forward(m.arch, m.theta, b.x).logits;
}

inline std::vector<int> predict_labels(const ModelState& m, const Dataset& d) {
    detail::check_dims(m);
    const auto r = refs_of(d);
    const auto b = detail::gather(r, m.arch.feature_dim);
    const auto f = detail::forward(m.arch, m.theta, b.x);
    std::vector<int> out(d.size());
    for (Eigen::Index i = 0; i < f.probs.rows(); ++i) {
        out[static_cast<std::size_t>(i)] = detail::argmax_lowest(f.probs.row(i));
    }
    return out;
}

inline double accuracy(const ModelState& m, const Dataset& d) {
    require(!d.empty(), "accuracy: empty dataset");
    const auto labels = predict_labels(m, d);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        correct += labels[i] == d[i].label ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(d.size());
}

/// Feature embedding: logits for Logistic, hidden activations for Mlp.
inline Vector embed(const ModelState& m, const Sample& s) {
    detail::check_dims(m);
    detail::check_sample(m, s);
    const Matrix x = s.features.transpose();
    const auto f = detail::forward(m.arch, m.theta, x);
    return m.arch.kind == ModelKind::Logistic ? Vector(f.logits.row(0).transpose())
                                              : Vector(f.hidden.row(0).transpose());
}

/// Minibatch training of mean cross-entropy (+ ridge). The visiting order of
/// epoch e is a shuffle seeded by (cfg.seed, e); optimizer state starts fresh.
inline ModelState train(const ModelState& m, const Dataset& d, const TrainConfig& cfg) {
    detail::check_dims(m);
    cfg.validate();
    require(!d.empty(), "train: empty dataset");
    require(d.feature_dim() == m.arch.feature_dim, "train: dataset feature_dim does not match the model");
    ModelState out = m;
    if (cfg.epochs == 0) {
        return out;
    }
    const auto all = refs_of(d);
    std::vector<std::size_t> order(all.size());
    Vector first_moment = Vector::Zero(m.theta.size());
    Vector second_moment = Vector::Zero(m.theta.size());
    std::uint64_t step = 0;
    SampleRefs batch;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(cfg.seed, {0xe90c, epoch}));
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            batch.clear();
            for (std::size_t k = start; k < stop; ++k) {
                batch.push_back(all[order[k]]);
            }
            const auto b = detail::gather(batch, m.arch.feature_dim);
            Vector g = Vector::Zero(out.theta.size());
            const double batch_loss =
                detail::cross_entropy(out.arch, out.theta, b, &g, 1.0 / static_cast<double>(batch.size())) /
                    static_cast<double>(batch.size()) +
                out.arch.l2 * out.theta.squaredNorm();
            if (!std::isfinite(batch_loss)) {
                throw Error(ErrorCode::Divergence, "training loss became non-finite at step " + std::to_string(step),
                            step);
            }
            g += 2.0 * out.arch.l2 * out.theta;
            ++step;
            if (cfg.optimizer == Optimizer::Sgd) {
                out.theta -= cfg.learning_rate * g;
            } else {
                first_moment = cfg.beta1 * first_moment + (1.0 - cfg.beta1) * g;
                second_moment = cfg.beta2 * second_moment + (1.0 - cfg.beta2) * g.cwiseAbs2();
                const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
                const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
                out.theta.array() -= cfg.learning_rate * (first_moment.array() / c1) /
                                     ((second_moment.array() / c2).sqrt() + cfg.adam_eps);
            }
            if (!out.theta.allFinite()) {
                throw Error(ErrorCode::Divergence, "parameters became non-finite at step " + std::to_string(step - 1),
                            step - 1);
            }
        }
    }
    return out;
}

// Checkpoint file layout, all little-endian:
//   "ULCK" | u16 version | u8 kind | u8 activation | u32 feature_dim |
//   u32 num_classes | u32 hidden_dim | f64 l2 | u64 rng_seed |
//   u64 parameter_count | f64 theta[count] | u32 crc32(all preceding bytes)
inline constexpr std::uint16_t checkpoint_version = 1;

namespace detail {

class ByteWriter {
public:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        bytes_.insert(bytes_.end(), b, b + n);
    }
    template <typename T>
    void le(T v) {
        using U = std::make_unsigned_t<T>;
        auto u = static_cast<U>(v);
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            bytes_.push_back(static_cast<unsigned char>(u >> (8 * i)));
        }
    }
    void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
    std::vector<unsigned char>& bytes() { return bytes_; }

private:
    std::vector<unsigned char> bytes_;
};

class ByteReader {
public:
    ByteReader(std::span<const unsigned char> bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}
    template <typename T>
    T le() {
        need(sizeof(T));
        std::make_unsigned_t<T> u = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            u |= static_cast<std::make_unsigned_t<T>>(bytes_[pos_ + i]) << (8 * i);
        }
        pos_ += sizeof(T);
        return static_cast<T>(u);
    }
    double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) {
            throw Error(ErrorCode::Truncated, origin_ + ": unexpected end of data at byte " + std::to_string(pos_));
        }
    }
    std::size_t position() const { return pos_; }

private:
    std::span<const unsigned char> bytes_;
    std::string origin_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::vector<unsigned char> serialize(const ModelState& m) {
    detail::check_dims(m);
    detail::ByteWriter w;
    w.raw("ULCK", 4);
    w.le<std::uint16_t>(checkpoint_version);
    w.le<std::uint8_t>(static_cast<std::uint8_t>(m.arch.kind));
    w.le<std::uint8_t>(static_cast<std::uint8_t>(m.arch.activation));
    w.le<std::uint32_t>(static_cast<std::uint32_t>(m.arch.feature_dim));
    w.le<std::uint32_t>(static_cast<std::uint32_t>(m.arch.num_classes));
    w.le<std::uint32_t>(static_cast<std::uint32_t>(m.arch.hidden_dim));
    w.f64(m.arch.l2);
    w.le<std::uint64_t>(m.rng_seed);
    w.le<std::uint64_t>(static_cast<std::uint64_t>(m.theta.size()));
    for (Eigen::Index i = 0; i < m.theta.size(); ++i) {
        w.f64(m.theta[i]);
    }
    const std::uint32_t crc = crc32_of(w.bytes());
    w.le<std::uint32_t>(crc);
    return std::move(w.bytes());
}

inline ModelState deserialize(std::span<const unsigned char> bytes, const std::string& origin = "checkpoint") {
    detail::ByteReader r(bytes, origin);
    r.need(4);
    if (std::string(reinterpret_cast<const char*>(bytes.data()), 4) != "ULCK") {
        throw Error(ErrorCode::BadMagic, origin + ": not a ULCK checkpoint");
    }
    (void)r.le<std::uint32_t>();
    const auto version = r.le<std::uint16_t>();
    if (version != checkpoint_version) {
        throw Error(ErrorCode::Parse, origin + ": unsupported checkpoint version " + std::to_string(version));
    }
    ModelState m;
    const auto kind = r.le<std::uint8_t>();
    const auto act = r.le<std::uint8_t>();
    if (kind > 1 || act > 1) {
        throw Error(ErrorCode::Parse, origin + ": unknown architecture descriptor");
    }
    m.arch.kind = static_cast<ModelKind>(kind);
    m.arch.activation = static_cast<Activation>(act);
    m.arch.feature_dim = r.le<std::uint32_t>();
    m.arch.num_classes = r.le<std::uint32_t>();
    m.arch.hidden_dim = r.le<std::uint32_t>();
    m.arch.l2 = r.f64();
    m.rng_seed = r.le<std::uint64_t>();
    const auto count = r.le<std::uint64_t>();
    m.arch.validate();
    if (count != m.arch.parameter_count()) {
        throw Error(ErrorCode::Parse, origin + ": parameter count does not match architecture");
    }
    r.need(count * 8 + 4);
    m.theta.resize(static_cast<Eigen::Index>(count));
    for (std::uint64_t i = 0; i < count; ++i) {
        m.theta[static_cast<Eigen::Index>(i)] = r.f64();
    }
    const std::size_t body = r.position();
    const auto stored = r.le<std::uint32_t>();
    if (stored != crc32_of(bytes.first(body))) {
        throw Error(ErrorCode::Parse, origin + ": CRC32 mismatch");
    }
    return m;
}

/// Writes a checkpoint and returns the FNV-1a digest of the written bytes.
inline std::uint64_t save_checkpoint(const ModelState& m, const std::filesystem::path& path) {
    const auto bytes = serialize(m);
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw Error(ErrorCode::Io, "cannot write checkpoint " + path.string());
    }
    Fnv1a h;
    h.update(bytes);
    return h.digest();
}

inline ModelState load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = detail::read_file_bytes(path.string());
    return deserialize(bytes, path.string());
}

inline std::uint64_t digest_of(const ModelState& m) {
    Fnv1a h;
    h.update(serialize(m));
    return h.digest();
}

} // namespace ulab

#endif
