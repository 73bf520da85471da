#include "magrelax/drt.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace magrelax;

namespace {

constexpr double kTwoPi = 2 * 3.14159265358979323846;

const std::vector<RcElement> kThreeRc{{0.004, 0.044}, {0.006, 47.0}, {0.010, 1000.0}};
constexpr double kThreeRcInf = 0.010;

ImpedanceSpectrum three_rc() { return synth_spectrum(kThreeRcInf, kThreeRc, default_frequencies()); }
ImpedanceSpectrum single_rc() { return synth_spectrum(0.0, {{1.0, 1.0}}, default_frequencies()); }

ParameterMap fits_with(const std::vector<std::vector<double>>& taus) {
  ParameterMap map;
  int k = 0;
  for (const auto& set : taus) {
    ChannelFit c;
    c.sensor_id = "s" + std::to_string(++k);
    RelaxationFit f;
    for (double tau : set) f.terms.push_back({1e-12, tau, 0, 0});
    f.converged = true;
    c.fit = f;
    c.status = "ok";
    map.channels.push_back(c);
  }
  return map;
}

}  // namespace

TEST_CASE("synthetic spectrum limits") {
  Eigen::VectorXd f(1);
  f << 1.0 / (kTwoPi * 2.5);
  auto apex = synth_spectrum(0.3, {{2.0, 2.5}}, f);
  CHECK(-apex.imag[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(apex.real[0] == doctest::Approx(1.3).epsilon(1e-14));

  Eigen::VectorXd ends(2);
  ends << 1e-5 / (kTwoPi * 1000.0), 1e5 / (kTwoPi * 0.044);
  auto z = synth_spectrum(kThreeRcInf, kThreeRc, ends);
  CHECK(z.real[0] == doctest::Approx(0.030).epsilon(1e-3));
  CHECK(z.real[1] == doctest::Approx(kThreeRcInf).epsilon(1e-3));

  CHECK_THROWS_AS(synth_spectrum(0.0, {{-1.0, 1.0}}, f), InputError);
  CHECK_THROWS_AS(synth_spectrum(0.0, {{1.0, 0.0}}, f), InputError);

  auto freq = default_frequencies();
  CHECK(freq.size() == 85);
  CHECK(freq[0] == doctest::Approx(0.8e-3));
  CHECK(freq[84] == doctest::Approx(6e6));
}

TEST_CASE("nnls matches an unconstrained solve when the solution is interior") {
  std::mt19937 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  Eigen::MatrixXd A(30, 6);
  for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] = u(rng);
  Eigen::VectorXd x(6);
  x << 0.5, 1, 2, 0.1, 3, 0.7;
  Eigen::VectorXd got = nnls(A, A * x, 100);
  CHECK((got - x).cwiseAbs().maxCoeff() < 1e-10);

  // Constrained case: KKT conditions hold.
  Eigen::VectorXd b = Eigen::VectorXd::NullaryExpr(30, [&](Eigen::Index) { return u(rng) - 0.5; });
  Eigen::VectorXd c = nnls(A, b, 100);
  Eigen::VectorXd grad = A.transpose() * (b - A * c);
  for (Eigen::Index i = 0; i < 6; ++i) {
    CHECK(c[i] >= 0);
    if (c[i] > 0) CHECK(std::abs(grad[i]) < 1e-10);
    else CHECK(grad[i] <= 1e-10);
  }
}

TEST_CASE("single RC inversion") {
  auto spec = single_rc();
  auto drt = drt_invert(spec, 20, 1e-3);
  CHECK((drt.gamma.array() >= 0).all());
  auto peaks = find_peaks(drt);
  REQUIRE(peaks.size() == 1);
  CHECK(std::abs(std::log(peaks[0].tau)) <= drt.log_step() * (1 + 1e-9));
  Eigen::Index arg;
  drt.gamma.maxCoeff(&arg);
  CHECK(peaks[0].tau == drt.tau[arg]);
  CHECK(drt.mass() == doctest::Approx(1.0).epsilon(0.05));

  auto exact = drt_invert(spec, 20, 0.0);
  CHECK(exact.residual <= 1e-8);
}

TEST_CASE("three-RC inversion: three peaks near the generator") {
  auto drt = drt_invert(three_rc());
  auto peaks = find_peaks(drt, 0.05);
  REQUIRE(peaks.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(peaks[i].tau / kThreeRc[i].tau <= 1.3);
    CHECK(kThreeRc[i].tau / peaks[i].tau <= 1.3);
    CHECK(peaks[i].weight > 0);
  }
  CHECK(drt.r_inf == doctest::Approx(kThreeRcInf).epsilon(0.05));
}

TEST_CASE("regularization sweep is monotone and conserves mass at small lambda") {
  auto spec = three_rc();
  std::vector<double> lambdas;
  for (int k = 0; k <= 10; ++k) lambdas.push_back(std::pow(10.0, -6 + 0.6 * k));
  auto curve = l_curve(spec, lambdas);
  REQUIRE(curve.size() == 11);
  for (std::size_t i = 1; i < curve.size(); ++i) {
    CHECK(curve[i].residual >= curve[i - 1].residual * (1 - 1e-9));
    CHECK(curve[i].roughness <= curve[i - 1].roughness * (1 + 1e-9));
  }
  for (double lambda : {1e-6, 1e-4, 1e-3}) {
    auto drt = drt_invert(spec, 20, lambda);
    CHECK(drt.mass() == doctest::Approx(0.020).epsilon(0.05));
    CHECK(drt.penalty_weight == doctest::Approx(lambda * (spec.real.array().square() + spec.imag.array().square()).mean()));
  }
}

TEST_CASE("grid refinement moves peaks by less than one coarse cell") {
  auto spec = three_rc();
  auto coarse = drt_invert(spec, 10);
  auto fine = drt_invert(spec, 20);
  auto pc = find_peaks(coarse), pf = find_peaks(fine);
  REQUIRE(pc.size() == pf.size());
  for (std::size_t i = 0; i < pc.size(); ++i)
    CHECK(std::abs(std::log(pf[i].tau / pc[i].tau)) < coarse.log_step());
}

TEST_CASE("grid covers the measured span plus a decade") {
  auto spec = three_rc();
  auto g = drt_grid(spec, 20);
  CHECK(g[0] <= 0.1 / (kTwoPi * 6e6));
  CHECK(g[g.size() - 1] >= 10 / (kTwoPi * 0.8e-3));
  for (Eigen::Index k = 1; k < g.size(); ++k) CHECK(std::log10(g[k] / g[k - 1]) == doctest::Approx(0.05));
}

TEST_CASE("reconstruction") {
  auto spec = three_rc();
  auto drt = drt_invert(spec);
  auto back = reconstruct_impedance(drt, spec.frequency);
  CHECK(spectrum_misfit(back, spec) == drt.residual);
  CHECK((back.imag.array() <= 0).all());

  DrtResult flat = drt;
  flat.gamma.setZero();
  auto z = reconstruct_impedance(flat, spec.frequency);
  CHECK((z.real.array() == drt.r_inf).all());
  CHECK((z.imag.array() == 0).all());
  CHECK(find_peaks(flat).empty());

  std::mt19937 rng(9);
  std::uniform_real_distribution<double> u(0, 1);
  DrtResult random = drt;
  for (auto& v : random.gamma) v = u(rng);
  CHECK((reconstruct_impedance(random, spec.frequency).imag.array() <= 0).all());

  DrtResult constant = drt;
  constant.gamma.setConstant(0.3);
  CHECK(find_peaks(constant).empty());
}

TEST_CASE("inversion input errors") {
  ImpedanceSpectrum empty;
  CHECK_THROWS_AS(drt_invert(empty), InputError);
  auto spec = three_rc();
  CHECK_THROWS_AS(drt_invert(spec, 20, -1.0), InputError);
  spec.frequency[3] = spec.frequency[2];
  CHECK_THROWS_AS(validate(spec), InputError);
}

TEST_CASE("compare timescales") {
  SUBCASE("distance in decades") {
    auto map = fits_with({{0.05, 47.0, 900.0}, {0.04, 47.0, 1100.0}});
    std::vector<DrtPeak> peaks{{0.044, 1, 1}, {49.0, 1, 1}, {1000.0, 1, 1}};
    auto rows = compare_timescales(peaks, map);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].label == "fast");
    CHECK(rows[1].label == "intermediate");
    CHECK(rows[2].label == "slow");
    CHECK(rows[1].count == 2);
    CHECK(rows[1].tau_mean == 47.0);
    CHECK(rows[1].tau_sd == 0.0);
    CHECK(rows[1].status == "matched");
    REQUIRE(rows[1].peak_tau);
    CHECK(*rows[1].peak_tau == 49.0);
    CHECK(rows[1].distance_decades == doctest::Approx(std::log10(49.0 / 47.0)));
    CHECK(rows[1].distance_decades == doctest::Approx(0.018).epsilon(0.02));
  }
  SUBCASE("no peaks") {
    auto rows = compare_timescales({}, fits_with({{5.0, 50.0}}));
    REQUIRE(!rows.empty());
    for (const auto& r : rows) {
      CHECK(r.status == "no counterpart");
      CHECK_FALSE(r.peak_tau);
    }
  }
  SUBCASE("empty map") { CHECK_THROWS_AS(compare_timescales({}, ParameterMap{}), InputError); }
}

TEST_CASE("csv formats") {
  auto spec = three_rc();
  spec.metadata["soc"] = "0.5";
  const std::string text = format_spectrum(spec);
  CHECK(text.find("freq_Hz,Z_real_Ohm,Z_imag_Ohm") != std::string::npos);
  auto back = parse_spectrum(text);
  CHECK(back.metadata.at("soc") == "0.5");
  CHECK(format_spectrum(back) == text);
  CHECK((back.real - spec.real).cwiseAbs().maxCoeff() <= 1e-12 * spec.real.cwiseAbs().maxCoeff());

  auto drt = drt_invert(spec);
  CHECK(format_drt(drt).find("tau_s,gamma_Ohm_per_lntau") != std::string::npos);
  CHECK(format_peaks(find_peaks(drt)).rfind("tau_s,height,weight_Ohm", 0) == 0);
  CHECK_THROWS_AS(parse_spectrum("freq_Hz,Z_real_Ohm\n1,2\n"), InputError);
}
