#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>

namespace pbmeta {

// Philox4x32-10 (Salmon et al., SC'11) used as a counter-based engine. A stream
// is addressed by (seed, stream_a, stream_b); draws within it advance a 64-bit
// block counter, so any (replication, purpose) pair gets an independent stream
// without sequential state.
class Philox {
public:
    using result_type = uint64_t;
    using block = std::array<uint32_t, 4>;

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    explicit Philox(uint64_t seed = 0, uint32_t stream_a = 0, uint32_t stream_b = 0)
        : key_{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32)}, sa_(stream_a), sb_(stream_b) {}

    static block bijection(block ctr, std::array<uint32_t, 2> key) {
        for (int r = 0; r < 10; ++r) {
            if (r) {
                key[0] += 0x9E3779B9u;
                key[1] += 0xBB67AE85u;
            }
            const uint64_t p0 = uint64_t{0xD2511F53u} * ctr[0];
            const uint64_t p1 = uint64_t{0xCD9E8D57u} * ctr[2];
            ctr = {static_cast<uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<uint32_t>(p1),
                   static_cast<uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<uint32_t>(p0)};
        }
        return ctr;
    }

    result_type operator()() {
        if (pos_ == 4) refill();
        const uint64_t lo = buf_[pos_++];
        if (pos_ == 4) refill();
        const uint64_t hi = buf_[pos_++];
        return (hi << 32) | lo;
    }

    // Uniform on the open interval (0, 1).
    double uniform() { return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform(), u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1)), a = 6.283185307179586476925 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        const uint64_t lim = max() - max() % n;
        uint64_t x;
        do x = (*this)();
        while (x >= lim);
        return x % n;
    }

private:
    void refill() {
        buf_ = bijection({static_cast<uint32_t>(counter_), static_cast<uint32_t>(counter_ >> 32), sa_, sb_}, key_);
        ++counter_;
        pos_ = 0;
    }

    std::array<uint32_t, 2> key_;
    uint32_t sa_, sb_;
    uint64_t counter_ = 0;
    block buf_{};
    int pos_ = 4;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace pbmeta
