#pragma once

#include <array>
#include <cstdint>

namespace mvsim::rng {

using Counter = std::array<std::uint32_t, 4>;
using Key = std::array<std::uint32_t, 2>;

/// Philox4x32 block cipher (Salmon et al., SC'11). Ten rounds is the
/// Crush-resistant default.
Counter philox4x32(Counter counter, Key key, int rounds = 10);

/// Noise source a stream belongs to. Distinct tags never share a counter, so
/// B, W, V and the initial-condition draws are mutually independent.
enum class Tag : std::uint32_t {
    kSlowNoise = 1,   // B
    kFastNoise = 2,   // W
    kLimitNoise = 3,  // V
    kInitSlow = 4,    // rho samples
    kInitFast = 5,    // xi samples
    kFrozen = 6,
    kFrozenInit = 7,
    kPoisson = 8,
    kPoissonOuter = 9,
    kProbe = 10,
    kBackground = 11,
    kCompanion = 12,
};

/// Identifies one independent Monte Carlo repetition.
struct StreamId {
    std::uint64_t seed = 1;
    std::uint32_t replica = 0;
};

/// Stream of standard normals addressed by (seed, replica, tag, particle,
/// step). Draw k of a stream is a pure function of those coordinates, so
/// results do not depend on how particles are scheduled across threads.
///
/// With `negate` set every normal has its sign flipped, which gives the
/// antithetic partner of the same stream.
class NormalStream {
public:
    NormalStream(StreamId id, Tag tag, std::uint32_t particle, std::uint32_t step,
                 bool negate = false);

    double normal();
    /// Uniform on the open interval (0, 1).
    double uniform();

private:
    void refill();

    Key key_{};
    Counter counter_{};
    std::array<std::uint32_t, 4> block_{};
    int used_ = 4;
    double spare_ = 0.0;
    bool has_spare_ = false;
    bool negate_ = false;
};

}  // namespace mvsim::rng
