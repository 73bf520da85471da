#pragma once

#include "magrelax/relaxfit.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace magrelax {

struct ImpedanceSpectrum {
  Eigen::VectorXd frequency;  // Hz, strictly monotone
  Eigen::VectorXd real;       // ohm
  Eigen::VectorXd imag;       // ohm, negative for capacitive arcs
  std::map<std::string, std::string> metadata;
};

void validate(const ImpedanceSpectrum& s);

struct RcElement {
  double resistance = 0;  // ohm
  double tau = 0;         // s
};

ImpedanceSpectrum synth_spectrum(double r_inf, const std::vector<RcElement>& elements,
                                 const Eigen::VectorXd& frequency);

// 85 log-spaced points from 0.8 mHz to 6 MHz.
Eigen::VectorXd default_frequencies();

struct DrtResult {
  Eigen::VectorXd tau;    // s, increasing, uniform in log
  Eigen::VectorXd gamma;  // ohm per unit ln(tau), nonnegative
  double r_inf = 0;
  double lambda = 0;           // relative weight as requested
  double penalty_weight = 0;   // lambda x mean |Z|^2, the weight actually applied
  double residual = 0;         // RMS over real and imaginary parts, ohm
  int iterations = 0;

  double log_step() const;  // ln(tau) spacing
  double mass() const;      // sum gamma dln(tau)
};

// Nonnegative least squares: min |A x - b| s.t. x >= 0 (Lawson-Hanson active set).
Eigen::VectorXd nnls(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, int max_iterations, int* iterations = nullptr);

// Relaxation-time grid 10^(k/ppd) covering the spectrum's 1/(2 pi f) span plus one decade each side.
Eigen::VectorXd drt_grid(const ImpedanceSpectrum& spec, int points_per_decade);

// lambda is relative to mean |Z|^2 of the spectrum.
DrtResult drt_invert(const ImpedanceSpectrum& spec, int points_per_decade = 20, double lambda = 1e-3);

ImpedanceSpectrum reconstruct_impedance(const DrtResult& drt, const Eigen::VectorXd& frequency);

// RMS misfit over real and imaginary parts.
double spectrum_misfit(const ImpedanceSpectrum& a, const ImpedanceSpectrum& b);

// |second difference of gamma|
double roughness(const DrtResult& drt);

struct DrtPeak {
  double tau = 0;
  double height = 0;
  double weight = 0;  // ohm, trapezoid between flanking minima
};

// Local maxima whose prominence exceeds `prominence` x max gamma, ascending tau.
std::vector<DrtPeak> find_peaks(const DrtResult& drt, double prominence = 0.05);

struct LCurvePoint {
  double lambda = 0;
  double residual = 0;
  double roughness = 0;
};

std::vector<LCurvePoint> l_curve(const ImpedanceSpectrum& spec, const std::vector<double>& lambdas,
                                 int points_per_decade = 20);

struct TimescaleMatch {
  std::string label;  // fast / intermediate / slow, or cluster<k>
  int count = 0;
  double tau_mean = 0;
  double tau_sd = 0;
  std::optional<double> peak_tau;
  double distance_decades = 0;  // |log10(peak / mean)|
  std::string status;           // "matched" or "no counterpart"
};

// Groups fitted tau values by term order across channels and pairs each group with the nearest peak.
std::vector<TimescaleMatch> compare_timescales(const std::vector<DrtPeak>& peaks, const ParameterMap& fits);

std::string format_spectrum(const ImpedanceSpectrum& s);
void write_spectrum(const ImpedanceSpectrum& s, const std::filesystem::path& path);
ImpedanceSpectrum parse_spectrum(std::string_view text, std::string_view source = "<string>");
ImpedanceSpectrum load_spectrum(const std::filesystem::path& path);

std::string format_drt(const DrtResult& drt);
std::string format_peaks(const std::vector<DrtPeak>& peaks);
std::string format_timescales(const std::vector<TimescaleMatch>& rows);

}  // namespace magrelax
