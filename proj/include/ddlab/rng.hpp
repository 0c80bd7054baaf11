#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

namespace ddlab {

// FNV-1a over the root seed and a stream name. Gives each purpose
// (init / masks / layer-select / data-shuffle) its own independent
// stream so toggling one feature does not perturb the others.
inline std::uint64_t stream_seed(std::uint64_t root, std::string_view name) {
    std::uint64_t h = 14695981039346656037ull;
    auto mix = [&h](unsigned char byte) {
        h ^= byte;
        h *= 1099511628211ull;
    };
    for (int i = 0; i < 8; ++i) mix(static_cast<unsigned char>(root >> (8 * i)));
    for (char c : name) mix(static_cast<unsigned char>(c));
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform on the open interval (0, 1).
    double uniform_open() {
        return (static_cast<double>(eng_() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_open(); }

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(eng_);
    }

    // Uniform index in [0, n).
    std::size_t index(std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(eng_);
    }

    template <typename It>
    void shuffle(It first, It last) {
        std::shuffle(first, last, eng_);
    }

    std::string serialize() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }

    void deserialize(const std::string& state) {
        std::istringstream is(state);
        is >> eng_;
    }

private:
    std::mt19937_64 eng_;
};

// The named sub-streams a training run draws from.
struct RngSuite {
    Rng init;
    Rng masks;
    Rng layer_select;
    Rng data_shuffle;

    explicit RngSuite(std::uint64_t root)
        : init(stream_seed(root, "init")),
          masks(stream_seed(root, "masks")),
          layer_select(stream_seed(root, "layer-select")),
          data_shuffle(stream_seed(root, "data-shuffle")) {}
};

}  // namespace ddlab
