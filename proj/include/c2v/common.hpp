// Shared error types, deterministic RNG, and the integer label map.
#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace c2v {

// Thrown when tensor extents do not satisfy an operation's contract.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Thrown when values violate an operation's contract (bad labels,
// non-normalized distributions, non-finite losses named at the call site).
struct ValueError : std::invalid_argument {
    explicit ValueError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Thrown when a training run produces a non-finite loss.
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// Counter-free splitmix64. Used directly and as the mixer for stream forks.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Deterministic RNG with portable output. std::*_distribution is
// implementation-defined, so uniform/normal are derived by hand to keep
// datasets and training curves bit-reproducible across toolchains.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // decorrelate trivially related seeds
        (void)next_u64();
        (void)next_u64();
    }

    uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; one fresh pair per call keeps the state a single word.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Independent child stream; safe for per-sample parallel generation.
    Rng fork(uint64_t stream) const {
        uint64_t s = state_ ^ (0xA0761D6478BD642Full ^ stream * 0xE7037ED1A0B428DBull);
        return Rng(s);
    }

private:
    uint64_t state_;
};

// Per-pixel integer class labels in [0, K-1], with kIgnoreLabel marking
// pixels excluded from losses and metrics.
constexpr int32_t kIgnoreLabel = 255;

struct LabelMap {
    int batch = 0;
    int height = 0;
    int width = 0;
    std::vector<int32_t> values;  // batch-major, row-major

    LabelMap() = default;
    LabelMap(int b, int h, int w, int32_t fill = 0)
        : batch(b), height(h), width(w), values(static_cast<size_t>(b) * h * w, fill) {}

    int32_t& at(int b, int y, int x) {
        return values[(static_cast<size_t>(b) * height + y) * width + x];
    }
    int32_t at(int b, int y, int x) const {
        return values[(static_cast<size_t>(b) * height + y) * width + x];
    }
    size_t size() const { return values.size(); }

    // every non-ignore value must be < num_classes
    void validate(int num_classes) const {
        for (int32_t v : values) {
            if (v == kIgnoreLabel) continue;
            if (v < 0 || v >= num_classes) {
                throw ValueError("label value " + std::to_string(v) +
                                 " out of range for " + std::to_string(num_classes) + " classes");
            }
        }
    }
};

}  // namespace c2v
