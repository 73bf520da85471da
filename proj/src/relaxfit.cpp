#include "magrelax/relaxfit.hpp"

#include "magrelax/recording_io.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>

namespace magrelax {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct Problem {
  Eigen::VectorXd t;  // measured from the first sample
  Eigen::VectorXd y;
  Eigen::VectorXd w;  // square-root weights
  bool baseline = true;
  double lo = 0, hi = 0;              // log-tau bounds
  double start_lo = 0, start_hi = 0;  // log-tau span for cold starts
};

struct Evaluation {
  Eigen::MatrixXd basis;  // weighted
  Eigen::VectorXd coef;
  Eigen::VectorXd residual;  // weighted
  double ss = 0;
};

struct Solution {
  Eigen::VectorXd theta;
  Eigen::VectorXd coef;
  double ss = std::numeric_limits<double>::infinity();
  bool converged = false;
  int iterations = 0;
};

Eigen::Index columns(const Problem& p, Eigen::Index n) { return n + (p.baseline ? 1 : 0); }

Evaluation evaluate(const Problem& p, const Eigen::VectorXd& theta) {
  const Eigen::Index n = theta.size(), N = p.t.size();
  Evaluation e;
  e.basis.resize(N, columns(p, n));
  for (Eigen::Index i = 0; i < n; ++i)
    e.basis.col(i) = p.w.cwiseProduct((-p.t.array() * std::exp(-theta[i])).exp().matrix());
  if (p.baseline) e.basis.col(n) = p.w;
  const Eigen::VectorXd yw = p.w.cwiseProduct(p.y);
  e.coef = e.basis.colPivHouseholderQr().solve(yw);
  e.residual = yw - e.basis * e.coef;
  e.ss = e.residual.squaredNorm();
  return e;
}

// Projected Jacobian of the weighted residual with respect to log-tau.
Eigen::MatrixXd reduced_jacobian(const Problem& p, const Eigen::VectorXd& theta, const Evaluation& e) {
  const Eigen::Index n = theta.size(), N = p.t.size();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(e.basis);
  const Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(N, e.basis.cols());
  Eigen::MatrixXd J(N, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const double inv_tau = std::exp(-theta[k]);
    Eigen::VectorXd g = e.coef[k] * (p.t.array() * inv_tau).matrix().cwiseProduct(e.basis.col(k));
    J.col(k) = -(g - Q * (Q.transpose() * g));
  }
  return J;
}

Eigen::VectorXd clamp(const Problem& p, Eigen::VectorXd theta) {
  return theta.cwiseMax(p.lo).cwiseMin(p.hi);
}

Solution optimize(const Problem& p, const Eigen::VectorXd& theta0, const FitOptions& o) {
  Solution s;
  s.theta = clamp(p, theta0);
  Evaluation e = evaluate(p, s.theta);
  const double scale = std::max(p.w.cwiseProduct(p.y).squaredNorm(), std::numeric_limits<double>::min());
  double mu = 1e-3;
  for (s.iterations = 0; s.iterations < o.max_iterations; ++s.iterations) {
    if (e.ss <= 1e-30 * scale) {
      s.converged = true;
      break;
    }
    const Eigen::MatrixXd J = reduced_jacobian(p, s.theta, e);
    const Eigen::MatrixXd H = J.transpose() * J;
    const Eigen::VectorXd g = J.transpose() * e.residual;
    bool accepted = false;
    while (!accepted) {
      Eigen::MatrixXd A = H;
      A.diagonal() += mu * H.diagonal().cwiseMax(1e-12 * std::max(1.0, H.diagonal().maxCoeff()));
      Eigen::VectorXd step = A.ldlt().solve(-g);
      Eigen::VectorXd trial = clamp(p, s.theta + step);
      if ((trial - s.theta).norm() <= 1e-14 * (1.0 + s.theta.norm())) break;
      Evaluation et = evaluate(p, trial);
      if (et.ss < e.ss) {
        const double rel = (e.ss - et.ss) / e.ss;
        s.theta = trial;
        e = std::move(et);
        mu = std::max(mu / 3.0, 1e-12);
        accepted = true;
        if (rel <= o.tolerance) s.converged = true;
      } else {
        mu *= 4.0;
        if (mu > 1e16) break;
      }
    }
    if (!accepted) {
      // No descent direction left: the point is stationary to working precision.
      s.converged = true;
      break;
    }
    if (s.converged) break;
  }
  s.coef = e.coef;
  s.ss = e.ss;
  return s;
}

std::vector<Eigen::VectorXd> cold_starts(const Problem& p, int n, int count) {
  std::vector<Eigen::VectorXd> out;
  const double span = p.start_hi - p.start_lo;
  for (int s = 0; s < count; ++s) {
    double shift = count > 1 ? -0.45 + 0.9 * s / (count - 1) : 0.0;
    Eigen::VectorXd theta(n);
    for (int i = 0; i < n; ++i) theta[i] = p.start_lo + span * (i + 0.5 + shift) / n;
    out.push_back(theta);
  }
  return out;
}

std::vector<Eigen::VectorXd> warm_starts(const Problem& p, const Eigen::VectorXd& previous) {
  std::vector<double> knots(previous.data(), previous.data() + previous.size());
  std::sort(knots.begin(), knots.end());
  std::vector<double> edges;
  edges.push_back(std::min(p.start_lo, knots.front() - 1.0));
  edges.insert(edges.end(), knots.begin(), knots.end());
  edges.push_back(std::max(p.start_hi, knots.back() + 1.0));
  std::vector<Eigen::VectorXd> out;
  for (std::size_t g = 0; g + 1 < edges.size(); ++g) {
    Eigen::VectorXd theta(previous.size() + 1);
    theta.head(previous.size()) = previous;
    theta[previous.size()] = 0.5 * (edges[g] + edges[g + 1]);
    out.push_back(theta);
  }
  return out;
}

Solution best_of(const Problem& p, const std::vector<Eigen::VectorXd>& starts, const FitOptions& o) {
  Solution best;
  for (const auto& s : starts) {
    Solution c = optimize(p, s, o);
    if (c.ss < best.ss || (c.ss == best.ss && c.converged && !best.converged)) best = std::move(c);
  }
  return best;
}

RelaxationFit finish(const Problem& p, const Solution& s, const Eigen::VectorXd& y_raw) {
  const Eigen::Index n = s.theta.size(), N = p.t.size();
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return s.theta[a] < s.theta[b]; });

  RelaxationFit fit;
  fit.samples = N;
  fit.converged = s.converged;
  fit.iterations = s.iterations;
  fit.baseline = p.baseline ? s.coef[n] : 0.0;

  // Uncertainties from the linearized covariance of all parameters.
  const Eigen::Index np = 2 * n + (p.baseline ? 1 : 0);
  Eigen::MatrixXd J(N, np);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double tau = std::exp(s.theta[i]);
    Eigen::VectorXd e = (-p.t.array() / tau).exp().matrix();
    J.col(2 * i) = p.w.cwiseProduct(e);
    J.col(2 * i + 1) = p.w.cwiseProduct((s.coef[i] * p.t.array() / (tau * tau)).matrix().cwiseProduct(e));
  }
  if (p.baseline) J.col(np - 1) = p.w;
  Eigen::VectorXd sd = Eigen::VectorXd::Constant(np, std::numeric_limits<double>::infinity());
  // Columns are equilibrated first so that the rank test does not depend on units.
  const Eigen::VectorXd scale = J.colwise().norm().transpose();
  if (N > np && (scale.array() > 0).all()) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(J * scale.cwiseInverse().asDiagonal(), Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    if (sv.size() > 0 && sv[sv.size() - 1] > 1e-13 * sv[0]) {
      const double sigma2 = s.ss / static_cast<double>(N - np);
      Eigen::MatrixXd V = svd.matrixV() * sv.cwiseInverse().asDiagonal();
      sd = (sigma2 * V.rowwise().squaredNorm()).cwiseSqrt().cwiseQuotient(scale);
    }
  }

  for (Eigen::Index k : order) {
    ExpTerm term{s.coef[k], std::exp(s.theta[k]), sd[2 * k], sd[2 * k + 1]};
    if (!fit.terms.empty() && std::abs(term.tau - fit.terms.back().tau) <= 1e-12 * term.tau) {
      fit.terms.back().amplitude += term.amplitude;
      continue;
    }
    fit.terms.push_back(term);
  }
  if (p.baseline) fit.baseline_sd = sd[np - 1];

  double ss = 0, mean = y_raw.mean(), tot = 0;
  for (Eigen::Index k = 0; k < N; ++k) {
    double r = y_raw[k] - fit.evaluate(p.t[k]);
    ss += r * r;
    tot += (y_raw[k] - mean) * (y_raw[k] - mean);
  }
  fit.ss_res = p.w.isOnes() ? s.ss : ss;
  fit.residual_rms = std::sqrt(ss / static_cast<double>(N));
  if (tot > 0) fit.r_squared = 1.0 - ss / tot;
  fit.criterion = kNaN;
  return fit;
}

Problem make_problem(const Eigen::VectorXd& t, const Eigen::VectorXd& y, const FitOptions& o) {
  if (t.size() != y.size()) throw InputError("time and value lengths differ");
  if (!y.allFinite() || !t.allFinite()) throw InputError("non-finite samples in series");
  Problem p;
  p.t = t.array() - t[0];
  p.y = y;
  p.w = Eigen::VectorXd::Ones(y.size());
  p.baseline = o.baseline;
  const double dt = sample_interval(t);
  const double T = p.t[p.t.size() - 1];
  const double tau_min = o.tau_min.value_or(dt);
  const double tau_max = o.tau_max.value_or(10.0 * T);
  if (!(tau_min > 0 && tau_max > tau_min)) throw InputError("invalid tau bounds");
  p.lo = std::log(tau_min);
  p.hi = std::log(tau_max);
  p.start_lo = std::max(p.lo, std::log(dt));
  p.start_hi = std::min(p.hi, std::log(T));
  if (!(p.start_hi > p.start_lo)) {
    p.start_lo = p.lo;
    p.start_hi = p.hi;
  }
  return p;
}

std::vector<Solution> nested_solutions(const Problem& p, int max_terms, const FitOptions& o) {
  std::vector<Solution> out;
  for (int n = 1; n <= max_terms; ++n) {
    auto starts = cold_starts(p, n, std::max(1, o.starts));
    if (!out.empty()) {
      auto warm = warm_starts(p, out.back().theta);
      starts.insert(starts.begin(), warm.begin(), warm.end());
    }
    out.push_back(best_of(p, starts, o));
  }
  return out;
}

Eigen::VectorXd tukey_weights(const Eigen::VectorXd& r, double c) {
  std::vector<double> v(r.data(), r.data() + r.size());
  auto median = [](std::vector<double> a) {
    std::nth_element(a.begin(), a.begin() + a.size() / 2, a.end());
    return a[a.size() / 2];
  };
  const double m = median(v);
  for (auto& x : v) x = std::abs(x - m);
  const double s = 1.4826 * median(v);
  Eigen::VectorXd w = Eigen::VectorXd::Ones(r.size());
  if (!(s > 0)) return w;
  for (Eigen::Index k = 0; k < r.size(); ++k) {
    double u = r[k] / (c * s);
    w[k] = std::abs(u) < 1 ? (1 - u * u) : 0.0;  // square root of the Tukey weight
  }
  return w;
}

void check_samples(const Eigen::VectorXd& t, int n_terms) {
  if (n_terms < 1) throw InputError("n_terms must be >= 1");
  if (t.size() < 2 * n_terms + 2) throw InputError("too few samples for the requested number of terms");
}

}  // namespace

double RelaxationFit::evaluate(double t) const {
  double v = baseline;
  for (const auto& term : terms) v += term.amplitude * std::exp(-t / term.tau);
  return v;
}

Criterion parse_criterion(std::string_view s) {
  if (s == "aicc") return Criterion::aicc;
  if (s == "f_test") return Criterion::f_test;
  throw InputError("unknown criterion '" + std::string(s) + "'");
}

const char* criterion_name(Criterion c) { return c == Criterion::aicc ? "aicc" : "f_test"; }

FitConfig parse_fit_config(const KeyValueConfig& cfg) {
  cfg.require_known({"baseline", "starts", "max_iterations", "tolerance", "tau_min_s", "tau_max_s",
                     "robust", "criterion", "max_terms"});
  FitConfig fc;
  auto& o = fc.options;
  o.baseline = cfg.flag("baseline", o.baseline);
  o.starts = static_cast<int>(cfg.integer("starts", o.starts));
  o.max_iterations = static_cast<int>(cfg.integer("max_iterations", o.max_iterations));
  o.tolerance = cfg.number("tolerance", o.tolerance);
  if (cfg.has("tau_min_s")) o.tau_min = cfg.number("tau_min_s");
  if (cfg.has("tau_max_s")) o.tau_max = cfg.number("tau_max_s");
  o.robust = cfg.flag("robust", o.robust);
  if (cfg.has("criterion")) fc.criterion = parse_criterion(cfg.text("criterion"));
  fc.max_terms = static_cast<int>(cfg.integer("max_terms", fc.max_terms));
  if (o.starts < 1 || o.max_iterations < 1 || !(o.tolerance > 0))
    throw InputError(cfg.source() + ": starts, max_iterations and tolerance must be positive");
  if (fc.max_terms < 1 || fc.max_terms > 5) throw InputError(cfg.source() + ": max_terms must be in [1, 5]");
  return fc;
}

std::vector<RelaxationFit> fit_nested(const Eigen::VectorXd& t, const Eigen::VectorXd& y, int max_terms,
                                      const FitOptions& options) {
  check_samples(t, max_terms);
  Problem p = make_problem(t, y, options);
  auto sols = nested_solutions(p, max_terms, options);
  std::vector<RelaxationFit> fits;
  for (auto& s : sols) {
    if (options.robust) {
      Problem q = p;
      for (int it = 0; it < options.robust_iterations; ++it) {
        // Residuals in data units: unweighted basis, weighted coefficients.
        const Eigen::VectorXd raw = p.y - evaluate(p, s.theta).basis * evaluate(q, s.theta).coef;
        Eigen::VectorXd w = tukey_weights(raw, options.tukey_c);
        if ((w - q.w).cwiseAbs().maxCoeff() < 1e-6) break;
        q.w = w;
        s = optimize(q, s.theta, options);
      }
      RelaxationFit f = finish(q, s, y);
      f.robust = true;
      fits.push_back(f);
    } else {
      fits.push_back(finish(p, s, y));
    }
  }
  return fits;
}

RelaxationFit fit_multiexp(const Eigen::VectorXd& t, const Eigen::VectorXd& y, int n_terms,
                           const FitOptions& options) {
  check_samples(t, n_terms);
  return fit_nested(t, y, n_terms, options).back();
}

double aicc(const RelaxationFit& fit, bool baseline) {
  const double N = static_cast<double>(fit.samples);
  const double k = 2.0 * fit.terms.size() + (baseline ? 1 : 0) + 1;
  if (!(fit.ss_res > 0)) return -std::numeric_limits<double>::infinity();
  double v = N * std::log(fit.ss_res / N) + 2 * k;
  if (N - k - 1 > 0) v += 2 * k * (k + 1) / (N - k - 1);
  else v = std::numeric_limits<double>::infinity();
  return v;
}

RelaxationFit select_model(const Eigen::VectorXd& t, const Eigen::VectorXd& y, int max_terms,
                           Criterion criterion, const FitOptions& options) {
  if (max_terms < 1 || max_terms > 5) throw InputError("max_terms must be in [1, 5]");
  check_samples(t, max_terms);
  auto fits = fit_nested(t, y, max_terms, options);
  // Fits whose parameters are not identifiable (e.g. two terms collapsing onto one tau
  // with cancelling amplitudes) are not candidates.
  auto identifiable = [](const RelaxationFit& f) {
    for (const auto& term : f.terms)
      if (!std::isfinite(term.amplitude_sd) || !std::isfinite(term.tau_sd)) return false;
    return true;
  };
  while (fits.size() > 1 && !identifiable(fits.back())) fits.pop_back();
  for (std::size_t n = 1; n < fits.size(); ++n)
    if (!identifiable(fits[n])) {
      fits.resize(n);
      break;
    }
  std::size_t chosen = 0;
  double value = kNaN;
  if (criterion == Criterion::aicc) {
    value = aicc(fits[0], options.baseline);
    for (std::size_t n = 1; n < fits.size(); ++n) {
      double v = aicc(fits[n], options.baseline);
      if (v < value) {
        value = v;
        chosen = n;
      }
    }
  } else {
    for (std::size_t n = 0; n + 1 < fits.size(); ++n) {
      const auto& small = fits[n];
      const auto& big = fits[n + 1];
      const double d2 = static_cast<double>(big.samples) - (2.0 * (n + 2) + (options.baseline ? 1 : 0));
      if (d2 <= 0) break;
      double pval = 1.0;
      if (big.ss_res <= 0) {
        pval = small.ss_res > 0 ? 0.0 : 1.0;
      } else {
        const double F = std::max(0.0, (small.ss_res - big.ss_res) / 2.0) / (big.ss_res / d2);
        pval = std::pow(1.0 + 2.0 * F / d2, -d2 / 2.0);
      }
      value = pval;
      if (pval >= 0.05) break;
      chosen = n + 1;
    }
  }
  RelaxationFit out = fits[chosen];
  out.criterion = value;
  return out;
}

Eigen::VectorXd resolve_amplitudes(const Eigen::VectorXd& t, const Eigen::VectorXd& y,
                                   const RelaxationFit& fit, bool baseline) {
  FitOptions o;
  o.baseline = baseline;
  Problem p = make_problem(t, y, o);
  Eigen::VectorXd theta(fit.terms.size());
  for (std::size_t i = 0; i < fit.terms.size(); ++i) theta[i] = std::log(fit.terms[i].tau);
  p.lo = -std::numeric_limits<double>::infinity();
  p.hi = std::numeric_limits<double>::infinity();
  return evaluate(p, theta).coef;
}

MonoTau mono_tau(const Eigen::VectorXd& t, const Eigen::VectorXd& y, const FitOptions& options) {
  if (t.size() < 4) throw InputError("too few samples for a decay fit");
  if ((y.array() == y[0]).all()) throw InputError("no decay detected");
  MonoTau out;
  out.fit = fit_multiexp(t, y, 1, options);
  if (out.fit.terms.empty()) throw InputError("no decay detected");
  const ExpTerm& term = out.fit.terms.front();
  const double T = t[t.size() - 1] - t[0];
  const double tau_max = options.tau_max.value_or(10.0 * T);
  if (term.tau >= 0.999 * tau_max || !(std::abs(term.amplitude) > 2.0 * term.amplitude_sd))
    throw InputError("no decay detected");
  // A fit still drifting toward longer tau than the record resolves is a trend, not a decay.
  if (!out.fit.converged && term.tau > T) throw InputError("no decay detected");
  out.tau = term.tau;
  out.tau_sd = term.tau_sd;
  out.crossing_time = kNaN;
  const double b = out.fit.baseline;
  const double y0 = y[0] - b;
  for (Eigen::Index k = 1; k < y.size(); ++k) {
    double f0 = (y[k - 1] - b) / y0, f1 = (y[k] - b) / y0;
    const double target = std::exp(-1.0);
    if (f0 > target && f1 <= target) {
      out.crossing_time = (t[k - 1] - t[0]) + (t[k] - t[k - 1]) * (f0 - target) / (f0 - f1);
      break;
    }
  }
  return out;
}

const ChannelFit* ParameterMap::find(std::string_view sensor_id, Axis axis) const {
  for (const auto& c : channels)
    if (c.sensor_id == sensor_id && c.axis == axis) return &c;
  return nullptr;
}

namespace {

template <typename Fn>
ParameterMap fit_channels(const SensorRecording& rec, int workers, Fn fn) {
  if (rec.channels.empty()) throw InputError("recording has no channels");
  ParameterMap map;
  map.metadata = rec.metadata;
  map.channels.resize(rec.channels.size());
  parallel_for(rec.channels.size(), workers, [&](std::size_t i) {
    ChannelFit& cf = map.channels[i];
    cf.sensor_id = rec.channels[i].sensor_id;
    cf.axis = rec.channels[i].axis;
    try {
      cf.fit = fn(rec.time, rec.channels[i].values);
      cf.status = cf.fit->converged ? "ok" : "not_converged";
    } catch (const std::exception& e) {
      cf.fit.reset();
      cf.status = std::string("failed: ") + e.what();
    }
  });
  return map;
}

std::string num(double v) {
  if (!std::isfinite(v)) return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
  char buf[40];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

double parse_num(const std::string& s, std::string_view what) {
  if (s == "nan") return kNaN;
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  return parse_double(s, what);
}

}  // namespace

ParameterMap fit_array(const SensorRecording& rec, int n_terms, const FitOptions& options, int workers) {
  return fit_channels(rec, workers, [&](const Eigen::VectorXd& t, const Eigen::VectorXd& y) {
    return fit_multiexp(t, y, n_terms, options);
  });
}

ParameterMap select_array(const SensorRecording& rec, int max_terms, Criterion criterion,
                          const FitOptions& options, int workers) {
  return fit_channels(rec, workers, [&](const Eigen::VectorXd& t, const Eigen::VectorXd& y) {
    return select_model(t, y, max_terms, criterion, options);
  });
}

std::string format_parameter_map(const ParameterMap& map) {
  std::size_t width = 1;
  for (const auto& c : map.channels)
    if (c.fit) width = std::max(width, c.fit->terms.size());
  std::string out;
  for (const auto& [k, v] : map.metadata) out += "# " + k + "=" + v + "\n";
  out += "sensor_id,axis,n_terms";
  for (std::size_t i = 1; i <= width; ++i)
    out += ",A" + std::to_string(i) + "_pT,tau" + std::to_string(i) + "_s";
  out += ",baseline_pT,r_squared,converged";
  for (std::size_t i = 1; i <= width; ++i)
    out += ",dA" + std::to_string(i) + "_pT,dtau" + std::to_string(i) + "_s";
  out += ",dbaseline_pT,residual_rms_pT,robust,criterion,status\n";
  for (const auto& c : map.channels) {
    out += c.sensor_id + "," + axis_label(c.axis) + ",";
    if (!c.fit) {
      out += "0";
      for (std::size_t i = 0; i < 4 * width + 7; ++i) out += ",";
      std::string status = c.status;
      std::replace(status.begin(), status.end(), ',', ';');
      out += "," + status + "\n";
      continue;
    }
    const auto& f = *c.fit;
    out += std::to_string(f.terms.size());
    for (std::size_t i = 0; i < width; ++i) {
      if (i < f.terms.size())
        out += "," + num(f.terms[i].amplitude / kPicotesla) + "," + num(f.terms[i].tau);
      else
        out += ",,";
    }
    out += "," + num(f.baseline / kPicotesla) + "," + (f.r_squared ? num(*f.r_squared) : "") + "," +
           (f.converged ? "1" : "0");
    for (std::size_t i = 0; i < width; ++i) {
      if (i < f.terms.size())
        out += "," + num(f.terms[i].amplitude_sd / kPicotesla) + "," + num(f.terms[i].tau_sd);
      else
        out += ",,";
    }
    out += "," + num(f.baseline_sd / kPicotesla) + "," + num(f.residual_rms / kPicotesla) + "," +
           (f.robust ? "1" : "0") + "," + num(f.criterion) + "," + c.status + "\n";
  }
  return out;
}

void write_parameter_map(const ParameterMap& map, const std::filesystem::path& path) {
  write_file_atomic(path, format_parameter_map(map));
}

ParameterMap parse_parameter_map(std::string_view text, std::string_view source) {
  const std::string where(source);
  ParameterMap map;
  std::vector<std::string> header;
  std::size_t start = 0, line_no = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string line = trim(text.substr(start, end - start));
    start = end + 1;
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (!header.empty()) continue;
      std::string body = trim(std::string_view(line).substr(1));
      auto eq = body.find('=');
      if (eq != std::string::npos)
        map.metadata[trim(std::string_view(body).substr(0, eq))] = trim(std::string_view(body).substr(eq + 1));
      continue;
    }
    auto f = split(line, ',');
    if (header.empty()) {
      header = f;
      if (header.size() < 3 || header[0] != "sensor_id" || header[1] != "axis" || header[2] != "n_terms")
        throw InputError(where + ": not a parameter-map CSV");
      continue;
    }
    const std::string at = where + ":" + std::to_string(line_no);
    if (f.size() != header.size()) throw InputError(at + ": field count does not match header");
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size(); ++i) row[header[i]] = f[i];
    ChannelFit cf;
    cf.sensor_id = row["sensor_id"];
    cf.axis = parse_axis(row["axis"]);
    cf.status = row.count("status") ? row["status"] : "ok";
    int n = static_cast<int>(parse_double(row["n_terms"], at + " n_terms"));
    if (cf.status.rfind("failed", 0) != 0) {
      RelaxationFit fit;
      for (int i = 1; i <= n; ++i) {
        ExpTerm term;
        const std::string k = std::to_string(i);
        term.amplitude = parse_num(row["A" + k + "_pT"], at) * kPicotesla;
        term.tau = parse_num(row["tau" + k + "_s"], at);
        if (row.count("dA" + k + "_pT") && !row["dA" + k + "_pT"].empty())
          term.amplitude_sd = parse_num(row["dA" + k + "_pT"], at) * kPicotesla;
        if (row.count("dtau" + k + "_s") && !row["dtau" + k + "_s"].empty())
          term.tau_sd = parse_num(row["dtau" + k + "_s"], at);
        fit.terms.push_back(term);
      }
      fit.baseline = parse_num(row["baseline_pT"], at) * kPicotesla;
      if (!row["r_squared"].empty()) fit.r_squared = parse_num(row["r_squared"], at);
      fit.converged = row["converged"] == "1";
      if (row.count("dbaseline_pT") && !row["dbaseline_pT"].empty())
        fit.baseline_sd = parse_num(row["dbaseline_pT"], at) * kPicotesla;
      if (row.count("residual_rms_pT") && !row["residual_rms_pT"].empty())
        fit.residual_rms = parse_num(row["residual_rms_pT"], at) * kPicotesla;
      fit.robust = row.count("robust") && row["robust"] == "1";
      fit.criterion = row.count("criterion") && !row["criterion"].empty() ? parse_num(row["criterion"], at) : kNaN;
      cf.fit = fit;
    }
    map.channels.push_back(std::move(cf));
  }
  if (header.empty()) throw InputError(where + ": missing header");
  return map;
}

ParameterMap load_parameter_map(const std::filesystem::path& path) {
  return parse_parameter_map(read_file(path), path.string());
}

}  // namespace magrelax
