#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "sidemoe/requant.hpp"

using namespace sidemoe;

namespace {

WeightGroup seeded_group(std::uint64_t seed, std::size_t n = 1000, int bits = 8) {
    Rng rng(seed);
    return make_weight_group("g", Tensor::random_normal({n}, rng, 0.0, 1.0), bits);
}

} // namespace

TEST_CASE("sample_subset counts and determinism") {
    const std::size_t sizes[] = {600, 400};

    {
        Rng rng(5);
        const auto all = sample_subset(sizes, 1.0, rng);
        CHECK(all.size() == 1000);
    }

    Rng a(123), b(123), c(124);
    const auto s1 = sample_subset(sizes, 0.10, a);
    const auto s2 = sample_subset(sizes, 0.10, b);
    const auto s3 = sample_subset(sizes, 0.10, c);
    CHECK(s1.size() == 100);
    CHECK(std::equal(s1.begin(), s1.end(), s2.begin(),
                     [](const ElementRef& x, const ElementRef& y) {
                         return x.group == y.group && x.index == y.index;
                     }));
    CHECK(!std::equal(s1.begin(), s1.end(), s3.begin(),
                      [](const ElementRef& x, const ElementRef& y) {
                          return x.group == y.group && x.index == y.index;
                      }));

    // without replacement
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const ElementRef& r : s1) seen.insert({r.group, r.index});
    CHECK(seen.size() == s1.size());

    Rng d(1);
    CHECK_THROWS_AS(sample_subset(sizes, 0.0, d), ConfigError);
    const std::vector<std::size_t> empty;
    CHECK_THROWS_AS(sample_subset(std::span<const std::size_t>(empty), 0.5, d), ConfigError);
}

TEST_CASE("fit_noise maximum-likelihood examples") {
    DriftRecord drift;
    drift.snapshot = Tensor::zeros({4});
    drift.deltas = {0, 0, 0, 0};
    const NoiseParams zero = fit_noise(drift);
    CHECK(zero.mu == 0.0);
    CHECK(zero.sigma == 0.0);

    drift.deltas = {1.0, 3.0};
    const NoiseParams two = fit_noise(drift);
    CHECK(two.mu == 2.0);
    CHECK(two.sigma == 1.0);

    drift.deltas = {5.0};
    const NoiseParams single = fit_noise(drift);
    CHECK(single.mu == 0.0);
    CHECK(single.sigma == 0.0);
}

TEST_CASE("fit_noise recovers the generating Gaussian") {
    Rng rng(77);
    DriftRecord drift;
    drift.deltas.resize(10000);
    for (double& d : drift.deltas) d = rng.normal(0.5, 0.1);
    const NoiseParams fit = fit_noise(drift);
    CHECK(fit.mu == Catch::Approx(0.5).margin(0.01));
    CHECK(fit.sigma == Catch::Approx(0.1).margin(0.01));
}

TEST_CASE("fit_noise is affine-consistent") {
    Rng rng(31);
    DriftRecord drift;
    drift.deltas.resize(500);
    for (double& d : drift.deltas) d = rng.normal(-0.2, 0.7);
    const NoiseParams base = fit_noise(drift);

    DriftRecord shifted = drift;
    for (double& d : shifted.deltas) d += 3.25;
    const NoiseParams moved = fit_noise(shifted);
    CHECK(moved.mu == Catch::Approx(base.mu + 3.25).margin(1e-12));
    CHECK(moved.sigma == Catch::Approx(base.sigma).margin(1e-12));
}

TEST_CASE("perturb identity and statistics") {
    Rng rng(9);
    const Tensor w = Tensor::random_normal({10000}, rng);

    Rng r1(10);
    const Tensor same = perturb(w, {0.0, 0.0, 1}, r1);
    CHECK(same.data == w.data);

    Rng r2(10);
    const Tensor shifted = perturb(w, {0.5, 0.0, 1}, r2);
    for (std::size_t i = 0; i < 100; ++i) CHECK(shifted.data[i] == w.data[i] + 0.5);

    Rng r3(10);
    const Tensor noisy = perturb(w, {0.0, 0.1, 1}, r3);
    double mean = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) mean += noisy.data[i] - w.data[i];
    mean /= static_cast<double>(w.size());
    double var = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double d = noisy.data[i] - w.data[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(w.size());
    CHECK(std::sqrt(var) == Catch::Approx(0.1).margin(0.01));
    // input untouched
    CHECK(w.data[0] != noisy.data[0]);
}

TEST_CASE("requantize_step is a no-op off the schedule") {
    WeightGroup g = seeded_group(1);
    const auto codes_before = g.quant.codes;
    Rng rng(2);
    const auto ev = requantize_step(g, {0.10, 10, 50, 0}, {0, 0, 1}, 3, rng);
    CHECK(!ev.has_value());
    CHECK(g.quant.codes == codes_before);
}

TEST_CASE("requantize_step with zero drift and zero noise is a fixed point") {
    WeightGroup g = seeded_group(4);
    const auto codes_before = g.quant.codes;
    const QuantParams params_before = g.quant.params;
    const double err_before = g.error();

    Rng rng(3);
    const auto ev = requantize_step(g, {0.10, 10, 50, 0}, {0, 0, 1}, 10, rng);
    REQUIRE(ev.has_value());
    CHECK(g.quant.codes == codes_before);
    CHECK(g.quant.params == params_before);
    CHECK(std::abs(g.error() - err_before) <= 1e-12);
    CHECK(std::abs(ev->error_after - ev->error_before) <= 1e-12);
}

TEST_CASE("requantize_step recovers from a uniform drift shift") {
    WeightGroup drifted = seeded_group(11);
    for (double& w : drifted.live.data) w += 0.3;
    const double stale_error = drifted.error();

    Rng rng(12);
    const auto ev = requantize_step(drifted, {0.10, 10, 50, 0}, {0, 0, 1}, 10, rng);
    REQUIRE(ev.has_value());
    CHECK(ev->error_before == Catch::Approx(stale_error).margin(1e-15));
    CHECK(ev->error_after < ev->error_before);
    CHECK(drifted.error() < stale_error);
}

TEST_CASE("schedule fires only on multiples of the interval") {
    const RequantSchedule sched{0.10, 10, 50, 0};
    CHECK(sched.events() == 5);
    int fired = 0;
    for (int epoch = 1; epoch <= 50; ++epoch) {
        WeightGroup g = seeded_group(100 + epoch, 64);
        Rng rng(epoch);
        const auto ev = requantize_step(g, sched, {0, 0, 1}, epoch, rng);
        if (ev.has_value()) {
            ++fired;
            CHECK(epoch % 10 == 0);
        }
    }
    CHECK(fired == 5);
}

TEST_CASE("whole-backbone events refresh drifted groups and lower the error") {
    // two groups, drift injected into both, fitted noise applied at events
    auto build = [](std::uint64_t seed) {
        Rng init(seed);
        std::vector<WeightGroup> groups;
        groups.push_back(make_weight_group("a", Tensor::random_normal({800}, init), 8));
        groups.push_back(make_weight_group("b", Tensor::random_normal({600}, init, 1.0, 2.0), 8));
        return groups;
    };

    std::vector<WeightGroup> with_requant = build(55);
    std::vector<WeightGroup> without = build(55);
    const RequantSchedule sched{0.10, 10, 50, 0};

    Rng drift_rng(900);
    Rng event_rng(901);
    for (int epoch = 1; epoch <= 50; ++epoch) {
        const auto events = requantize_all(with_requant, sched, epoch, event_rng);
        if (epoch % 10 == 0) CHECK(!events.empty());
        // identical drift stream applied to both arms
        for (std::size_t g = 0; g < with_requant.size(); ++g) {
            const double step = with_requant[g].quant.params.scale;
            for (std::size_t rep = 0; rep < with_requant[g].live.size() / 100; ++rep) {
                const std::size_t i = drift_rng.index(with_requant[g].live.size());
                const double delta = drift_rng.normal(0.0, 0.1 * step);
                with_requant[g].live.data[i] += delta;
                without[g].live.data[i] += delta;
            }
        }
    }
    CHECK(total_quantization_error(with_requant) < total_quantization_error(without));
}

TEST_CASE("requantize determinism under identical seeds") {
    auto run = [] {
        WeightGroup g = seeded_group(21, 500);
        for (std::size_t i = 0; i < g.live.size(); i += 7) g.live.data[i] += 0.05;
        g.drift.observe(g.live);
        Rng rng(22);
        const NoiseParams noise = fit_noise(g.drift, 1);
        requantize_step(g, {0.10, 10, 50, 0}, noise, 10, rng);
        return g;
    };
    const WeightGroup a = run();
    const WeightGroup b = run();
    CHECK(a.quant.codes == b.quant.codes);
    CHECK(a.quant.params == b.quant.params);
}
