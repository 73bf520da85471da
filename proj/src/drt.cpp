#include "magrelax/drt.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <complex>
#include <limits>

namespace magrelax {

namespace {

constexpr double kTwoPi = 2 * 3.14159265358979323846;

std::string num(double v) {
  char buf[40];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

// Stacked real/imaginary kernel with a leading column for the series resistance.
Eigen::MatrixXd kernel(const Eigen::VectorXd& frequency, const Eigen::VectorXd& tau, double step) {
  const Eigen::Index n = frequency.size(), m = tau.size();
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(2 * n, m + 1);
  A.col(0).head(n).setOnes();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = kTwoPi * frequency[i];
    for (Eigen::Index k = 0; k < m; ++k) {
      const double wt = w * tau[k];
      const double d = 1.0 + wt * wt;
      A(i, k + 1) = step / d;
      A(n + i, k + 1) = -step * wt / d;
    }
  }
  return A;
}

Eigen::MatrixXd second_difference(Eigen::Index m) {
  Eigen::MatrixXd D = Eigen::MatrixXd::Zero(std::max<Eigen::Index>(m - 2, 0), m + 1);
  for (Eigen::Index i = 0; i + 2 < m; ++i) {
    D(i, i + 1) = 1;
    D(i, i + 2) = -2;
    D(i, i + 3) = 1;
  }
  return D;
}

// Calls fn(line_number, line) for every non-empty line.
template <typename Fn>
void for_each_line(std::string_view text, Fn fn) {
  std::size_t start = 0, line_no = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string line = trim(text.substr(start, end - start));
    start = end + 1;
    ++line_no;
    if (!line.empty()) fn(line_no, line);
  }
}

}  // namespace

void validate(const ImpedanceSpectrum& s) {
  const Eigen::Index n = s.frequency.size();
  if (n == 0) throw InputError("empty spectrum");
  if (s.real.size() != n || s.imag.size() != n) throw InputError("spectrum columns differ in length");
  if (!s.frequency.allFinite() || !s.real.allFinite() || !s.imag.allFinite())
    throw InputError("non-finite spectrum value");
  if ((s.frequency.array() <= 0).any()) throw InputError("spectrum frequencies must be positive");
  if (n > 1) {
    const bool up = s.frequency[1] > s.frequency[0];
    for (Eigen::Index i = 1; i < n; ++i)
      if (up ? !(s.frequency[i] > s.frequency[i - 1]) : !(s.frequency[i] < s.frequency[i - 1]))
        throw InputError("spectrum frequencies must be strictly monotone");
  }
}

ImpedanceSpectrum synth_spectrum(double r_inf, const std::vector<RcElement>& elements,
                                 const Eigen::VectorXd& frequency) {
  if (!(r_inf >= 0)) throw InputError("series resistance must be nonnegative");
  for (const auto& e : elements)
    if (!(e.resistance > 0) || !(e.tau > 0)) throw InputError("RC elements need positive R and tau");
  ImpedanceSpectrum s;
  s.frequency = frequency;
  s.real.resize(frequency.size());
  s.imag.resize(frequency.size());
  for (Eigen::Index i = 0; i < frequency.size(); ++i) {
    std::complex<double> z = r_inf;
    for (const auto& e : elements)
      z += e.resistance / std::complex<double>(1.0, kTwoPi * frequency[i] * e.tau);
    s.real[i] = z.real();
    s.imag[i] = z.imag();
  }
  validate(s);
  return s;
}

Eigen::VectorXd default_frequencies() {
  Eigen::VectorXd f(85);
  const double lo = std::log10(0.8e-3), hi = std::log10(6e6);
  for (int i = 0; i < 85; ++i) f[i] = std::pow(10.0, lo + (hi - lo) * i / 84.0);
  return f;
}

double DrtResult::log_step() const {
  return tau.size() > 1 ? std::log(tau[1] / tau[0]) : 0.0;
}

double DrtResult::mass() const { return gamma.sum() * log_step(); }

Eigen::VectorXd nnls(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, int max_iterations, int* iterations) {
  const Eigen::Index n = A.cols();
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  std::vector<bool> passive(n, false);
  std::vector<bool> blocked(n, false);  // entered and was dropped at once; retried after progress
  const double tol = 10 * std::numeric_limits<double>::epsilon() * A.cwiseAbs().colwise().sum().maxCoeff() *
                     static_cast<double>(std::max(A.rows(), n));
  Eigen::VectorXd w = A.transpose() * (b - A * x);
  int iter = 0;

  auto solve_passive = [&](Eigen::VectorXd& s) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index j = 0; j < n; ++j)
      if (passive[j]) idx.push_back(j);
    Eigen::MatrixXd Ap(A.rows(), idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) Ap.col(k) = A.col(idx[k]);
    Eigen::VectorXd z = Ap.colPivHouseholderQr().solve(b);
    s.setZero(n);
    for (std::size_t k = 0; k < idx.size(); ++k) s[idx[k]] = z[k];
  };

  while (true) {
    Eigen::Index best = -1;
    double wmax = tol;
    for (Eigen::Index j = 0; j < n; ++j)
      if (!passive[j] && !blocked[j] && w[j] > wmax) {
        wmax = w[j];
        best = j;
      }
    if (best < 0) break;
    passive[best] = true;
    Eigen::VectorXd s;
    while (true) {
      if (++iter > max_iterations)
        throw NumericalError("nonnegative solve did not converge after " + std::to_string(max_iterations) +
                             " iterations (max gradient " + num(wmax) + ")");
      solve_passive(s);
      bool feasible = true;
      for (Eigen::Index j = 0; j < n; ++j)
        if (passive[j] && s[j] <= 0) feasible = false;
      if (feasible) break;
      double alpha = 1.0;
      for (Eigen::Index j = 0; j < n; ++j)
        if (passive[j] && s[j] <= 0) alpha = std::min(alpha, x[j] / (x[j] - s[j]));
      x += alpha * (s - x);
      for (Eigen::Index j = 0; j < n; ++j)
        if (passive[j] && x[j] <= tol) {
          passive[j] = false;
          x[j] = 0;
        }
    }
    x = s;
    if (passive[best]) std::fill(blocked.begin(), blocked.end(), false);
    else blocked[best] = true;
    w = A.transpose() * (b - A * x);
  }
  if (iterations) *iterations = iter;
  return x;
}

Eigen::VectorXd drt_grid(const ImpedanceSpectrum& spec, int points_per_decade) {
  if (points_per_decade < 1) throw InputError("grid density must be >= 1 point per decade");
  const double fmax = spec.frequency.maxCoeff(), fmin = spec.frequency.minCoeff();
  const double lo = std::log10(1.0 / (kTwoPi * fmax)) - 1.0;
  const double hi = std::log10(1.0 / (kTwoPi * fmin)) + 1.0;
  const long k0 = static_cast<long>(std::floor(lo * points_per_decade + 1e-9));
  const long k1 = static_cast<long>(std::ceil(hi * points_per_decade - 1e-9));
  Eigen::VectorXd tau(k1 - k0 + 1);
  for (long k = k0; k <= k1; ++k) tau[k - k0] = std::pow(10.0, static_cast<double>(k) / points_per_decade);
  return tau;
}

DrtResult drt_invert(const ImpedanceSpectrum& spec, int points_per_decade, double lambda) {
  validate(spec);
  if (!(lambda >= 0) || !std::isfinite(lambda)) throw InputError("lambda must be finite and nonnegative");
  DrtResult r;
  r.tau = drt_grid(spec, points_per_decade);
  r.lambda = lambda;
  const Eigen::Index n = spec.frequency.size(), m = r.tau.size();
  const double step = std::log(10.0) / points_per_decade;
  const Eigen::MatrixXd A = kernel(spec.frequency, r.tau, step);
  const Eigen::MatrixXd D = second_difference(m);
  r.penalty_weight = lambda * (spec.real.array().square() + spec.imag.array().square()).mean();

  Eigen::MatrixXd S(A.rows() + D.rows(), m + 1);
  S << A, std::sqrt(r.penalty_weight) * D;
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(S.rows());
  rhs.head(n) = spec.real;
  rhs.segment(n, n) = spec.imag;
  Eigen::VectorXd x = nnls(S, rhs, 20 * static_cast<int>(m + 1), &r.iterations);
  r.r_inf = x[0];
  r.gamma = x.tail(m);
  r.residual = spectrum_misfit(spec, reconstruct_impedance(r, spec.frequency));
  if (!std::isfinite(r.residual)) throw NumericalError("non-finite inversion residual");
  return r;
}

ImpedanceSpectrum reconstruct_impedance(const DrtResult& drt, const Eigen::VectorXd& frequency) {
  const Eigen::MatrixXd A = kernel(frequency, drt.tau, drt.log_step());
  Eigen::VectorXd x(drt.gamma.size() + 1);
  x << drt.r_inf, drt.gamma;
  const Eigen::VectorXd z = A * x;
  ImpedanceSpectrum s;
  s.frequency = frequency;
  s.real = z.head(frequency.size());
  s.imag = z.tail(frequency.size());
  return s;
}

double spectrum_misfit(const ImpedanceSpectrum& a, const ImpedanceSpectrum& b) {
  if (a.frequency.size() != b.frequency.size()) throw InputError("spectra differ in length");
  const double ss = (a.real - b.real).squaredNorm() + (a.imag - b.imag).squaredNorm();
  return std::sqrt(ss / (2.0 * static_cast<double>(a.frequency.size())));
}

double roughness(const DrtResult& drt) {
  Eigen::VectorXd x(drt.gamma.size() + 1);
  x << drt.r_inf, drt.gamma;
  return (second_difference(drt.gamma.size()) * x).norm();
}

std::vector<DrtPeak> find_peaks(const DrtResult& drt, double prominence) {
  std::vector<DrtPeak> out;
  const Eigen::VectorXd& g = drt.gamma;
  const Eigen::Index m = g.size();
  if (m < 3) return out;
  const double gmax = g.maxCoeff();
  if (!(gmax > 0)) return out;
  const double step = drt.log_step();
  for (Eigen::Index i = 1; i + 1 < m; ++i) {
    if (!(g[i] > g[i - 1])) continue;
    // Plateaus count once, at their left end, when they fall off on the right.
    Eigen::Index j = i;
    while (j + 1 < m && g[j + 1] == g[i]) ++j;
    if (j + 1 >= m || !(g[j + 1] < g[i])) continue;

    // Prominence: drop to the higher of the two lowest points before a taller neighbour.
    double left_min = g[i], right_min = g[i];
    for (Eigen::Index k = i - 1; k >= 0 && g[k] <= g[i]; --k) left_min = std::min(left_min, g[k]);
    for (Eigen::Index k = j + 1; k < m && g[k] <= g[i]; ++k) right_min = std::min(right_min, g[k]);
    if (g[i] - std::max(left_min, right_min) < prominence * gmax) continue;

    // Integrate between the flanking local minima.
    Eigen::Index a = i, b = j;
    while (a > 0 && g[a - 1] <= g[a]) --a;
    while (b + 1 < m && g[b + 1] <= g[b]) ++b;
    double weight = 0;
    for (Eigen::Index k = a; k < b; ++k) weight += 0.5 * (g[k] + g[k + 1]) * step;
    out.push_back({drt.tau[i], g[i], weight});
  }
  return out;
}

std::vector<LCurvePoint> l_curve(const ImpedanceSpectrum& spec, const std::vector<double>& lambdas,
                                 int points_per_decade) {
  std::vector<LCurvePoint> out;
  for (double l : lambdas) {
    DrtResult r = drt_invert(spec, points_per_decade, l);
    out.push_back({l, r.residual, roughness(r)});
  }
  return out;
}

std::vector<TimescaleMatch> compare_timescales(const std::vector<DrtPeak>& peaks, const ParameterMap& fits) {
  std::vector<std::vector<double>> groups;
  for (const auto& c : fits.channels) {
    if (!c.fit) continue;
    for (std::size_t k = 0; k < c.fit->terms.size(); ++k) {
      if (groups.size() <= k) groups.resize(k + 1);
      groups[k].push_back(c.fit->terms[k].tau);
    }
  }
  if (groups.empty()) throw InputError("parameter map has no fitted channels");
  std::vector<TimescaleMatch> out;
  for (std::size_t k = 0; k < groups.size(); ++k) {
    TimescaleMatch m;
    if (groups.size() == 3) m.label = k == 0 ? "fast" : (k == 1 ? "intermediate" : "slow");
    else if (groups.size() == 2) m.label = k == 0 ? "fast" : "slow";
    else m.label = "cluster" + std::to_string(k + 1);
    const auto& v = groups[k];
    m.count = static_cast<int>(v.size());
    double mean = 0;
    for (double x : v) mean += x;
    mean /= v.size();
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    m.tau_mean = mean;
    m.tau_sd = v.size() > 1 ? std::sqrt(ss / (v.size() - 1)) : 0.0;
    m.status = "no counterpart";
    double best = std::numeric_limits<double>::infinity();
    for (const auto& p : peaks) {
      double d = std::abs(std::log10(p.tau / mean));
      if (d < best) {
        best = d;
        m.peak_tau = p.tau;
        m.distance_decades = d;
        m.status = "matched";
      }
    }
    out.push_back(m);
  }
  return out;
}

std::string format_spectrum(const ImpedanceSpectrum& s) {
  std::string out;
  for (const auto& [k, v] : s.metadata) out += "# " + k + "=" + v + "\n";
  out += "freq_Hz,Z_real_Ohm,Z_imag_Ohm\n";
  for (Eigen::Index i = 0; i < s.frequency.size(); ++i)
    out += num(s.frequency[i]) + "," + num(s.real[i]) + "," + num(s.imag[i]) + "\n";
  return out;
}

void write_spectrum(const ImpedanceSpectrum& s, const std::filesystem::path& path) {
  write_file_atomic(path, format_spectrum(s));
}

ImpedanceSpectrum parse_spectrum(std::string_view text, std::string_view source) {
  const std::string where(source);
  ImpedanceSpectrum s;
  bool header = false;
  std::vector<double> f, re, im;
  for_each_line(text, [&](std::size_t line_no, const std::string& line) {
    const std::string at = where + ":" + std::to_string(line_no);
    if (line[0] == '#') {
      std::string body = trim(std::string_view(line).substr(1));
      auto eq = body.find('=');
      if (eq != std::string::npos)
        s.metadata[trim(std::string_view(body).substr(0, eq))] = trim(std::string_view(body).substr(eq + 1));
      return;
    }
    auto fields = split(line, ',');
    if (!header) {
      if (fields.size() != 3 || fields[0] != "freq_Hz" || fields[1] != "Z_real_Ohm" || fields[2] != "Z_imag_Ohm")
        throw InputError(at + ": expected header freq_Hz,Z_real_Ohm,Z_imag_Ohm");
      header = true;
      return;
    }
    if (fields.size() != 3) throw InputError(at + ": expected 3 fields");
    f.push_back(parse_double(fields[0], at));
    re.push_back(parse_double(fields[1], at));
    im.push_back(parse_double(fields[2], at));
  });
  if (!header) throw InputError(where + ": missing header");
  s.frequency = Eigen::Map<Eigen::VectorXd>(f.data(), f.size());
  s.real = Eigen::Map<Eigen::VectorXd>(re.data(), re.size());
  s.imag = Eigen::Map<Eigen::VectorXd>(im.data(), im.size());
  validate(s);
  return s;
}

ImpedanceSpectrum load_spectrum(const std::filesystem::path& path) {
  return parse_spectrum(read_file(path), path.string());
}

std::string format_drt(const DrtResult& drt) {
  std::string out = "# r_inf_Ohm=" + num(drt.r_inf) + "\n# lambda=" + num(drt.lambda) +
                    "\n# residual_Ohm=" + num(drt.residual) + "\ntau_s,gamma_Ohm_per_lntau\n";
  for (Eigen::Index i = 0; i < drt.tau.size(); ++i) out += num(drt.tau[i]) + "," + num(drt.gamma[i]) + "\n";
  return out;
}

std::string format_peaks(const std::vector<DrtPeak>& peaks) {
  std::string out = "tau_s,height,weight_Ohm\n";
  for (const auto& p : peaks) out += num(p.tau) + "," + num(p.height) + "," + num(p.weight) + "\n";
  return out;
}

std::string format_timescales(const std::vector<TimescaleMatch>& rows) {
  std::string out = "cluster,count,tau_mean_s,tau_sd_s,peak_tau_s,distance_decades,status\n";
  for (const auto& r : rows) {
    out += r.label + "," + std::to_string(r.count) + "," + num(r.tau_mean) + "," + num(r.tau_sd) + ",";
    if (r.peak_tau) out += num(*r.peak_tau) + "," + num(r.distance_decades);
    else out += ",";
    out += "," + r.status + "\n";
  }
  return out;
}

}  // namespace magrelax
