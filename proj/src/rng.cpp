#include "dex/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "dex/errors.hpp"

namespace dex {

double Rng::normal() {
    if (has_cache_) {
        has_cache_ = false;
        return cache_;
    }
    const double u1 = 1.0 - uniform();  // (0,1], keeps log finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    cache_ = r * std::sin(theta);
    has_cache_ = true;
    return r * std::cos(theta);
}

int Rng::uniform_int(int n) {
    if (n <= 0) throw ContractError("uniform_int requires n > 0");
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return static_cast<int>(x % un);
}

int Rng::categorical(std::span<const double> probs) {
    if (probs.empty()) throw ContractError("categorical requires a non-empty weight vector");
    double total = 0.0;
    for (double p : probs) total += p;
    if (!(total > 0.0)) throw ContractError("categorical requires positive total weight");
    const double u = uniform() * total;
    double acc = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
}

std::vector<int> Rng::permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    for (int i = n - 1; i > 0; --i) std::swap(p[i], p[uniform_int(i + 1)]);
    return p;
}

std::string Rng::serialize() const {
    std::ostringstream os;
    os << eng_ << " " << (has_cache_ ? 1 : 0);
    if (has_cache_) os << " " << std::hexfloat << cache_;
    return os.str();
}

void Rng::deserialize(const std::string &s) {
    std::istringstream is(s);
    int flag = 0;
    is >> eng_ >> flag;
    has_cache_ = flag != 0;
    cache_ = 0.0;
    if (has_cache_) is >> cache_;
    if (is.fail()) throw FormatError("malformed rng state");
}

}  // namespace dex
