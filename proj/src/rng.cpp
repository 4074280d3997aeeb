#include "zskd/rng.hpp"

#include <cmath>

#include "zskd/errors.hpp"

namespace zskd {

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double x1, x2, r2;
    do {
        x1 = 2.0 * uniform() - 1.0;
        x2 = 2.0 * uniform() - 1.0;
        r2 = x1 * x1 + x2 * x2;
    } while (r2 >= 1.0 || r2 == 0.0);
    double f = std::sqrt(-2.0 * std::log(r2) / r2);
    spare_ = x2 * f;
    has_spare_ = true;
    return x1 * f;
}

double Rng::truncated_normal(double sigma, double bound_sigmas) {
    double z;
    do {
        z = normal();
    } while (std::fabs(z) > bound_sigmas);
    return sigma * z;
}

double Rng::gamma(double alpha) {
    if (!(alpha > 0.0)) {
        throw ParameterError("gamma: shape must be positive, got " + std::to_string(alpha));
    }
    if (alpha < 1.0) {
        double x = gamma(alpha + 1.0);
        return x * std::pow(uniform_pos(), 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x, v;
        do {
            x = normal();
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        const double u = uniform_pos();
        const double x2 = x * x;
        if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
        if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
    }
}

uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b, uint64_t c) {
    auto splitmix = [](uint64_t& s) {
        s += 0x9e3779b97f4a7c15ull;
        uint64_t z = s;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    };
    uint64_t s = base;
    uint64_t h = splitmix(s);
    s ^= a + 0x9e3779b97f4a7c15ull;
    h ^= splitmix(s);
    s ^= b + 0x7f4a7c159e3779b9ull;
    h ^= splitmix(s);
    s ^= c + 0x2545f4914f6cdd1dull;
    h ^= splitmix(s);
    return h;
}

}  // namespace zskd
