#include "magrelax/cellsim.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SparseLU>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>

namespace magrelax {

namespace {

Tab make_tab(double x_mm, double width_mm, Polarity p) {
  Tab t;
  t.position = Eigen::Vector2d(x_mm * kMillimeter, 0.0);
  t.width = width_mm * kMillimeter;
  t.polarity = p;
  return t;
}

Eigen::SparseMatrix<double> sheet_laplacian(int nx, int ny, double gx, double gy) {
  std::vector<Eigen::Triplet<double>> trip;
  auto edge = [&](int a, int b, double g) {
    trip.emplace_back(a, a, g);
    trip.emplace_back(b, b, g);
    trip.emplace_back(a, b, -g);
    trip.emplace_back(b, a, -g);
  };
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      int a = j * nx + i;
      if (i + 1 < nx) edge(a, a + 1, gx);
      if (j + 1 < ny) edge(a, a + nx, gy);
    }
  Eigen::SparseMatrix<double> L(nx * ny, nx * ny);
  L.setFromTriplets(trip.begin(), trip.end());
  return L;
}

Eigen::VectorXd tab_weights(const CellNetwork& net, Polarity p, std::vector<int>& nodes) {
  Eigen::VectorXd w = Eigen::VectorXd::Zero(net.nodes());
  const double left = -net.geometry.width_x / 2;
  for (const auto& tab : net.geometry.tabs) {
    if (tab.polarity != p) continue;
    double lo = tab.position.x() - tab.width / 2, hi = tab.position.x() + tab.width / 2;
    for (int i = 0; i < net.nx; ++i) {
      double x0 = left + i * net.dx, x1 = x0 + net.dx;
      double overlap = std::min(x1, hi) - std::max(x0, lo);
      if (overlap > 0) w[net.node(i, 0)] += overlap;
    }
  }
  if (!(w.sum() > 0))
    throw InputError(std::string("empty ") + (p == Polarity::positive ? "positive" : "negative") +
                     " tab set");
  for (int a = 0; a < net.nodes(); ++a)
    if (w[a] > 0) nodes.push_back(a);
  return w / w.sum();
}

// Maps x to element emf E = v - sum_k u_k.
Eigen::MatrixXd emf_map(int n, int k) {
  Eigen::MatrixXd T = Eigen::MatrixXd::Zero(n, n * (1 + k));
  T.leftCols(n).setIdentity();
  for (int b = 0; b < k; ++b) T.middleCols(n * (1 + b), n) = -Eigen::MatrixXd::Identity(n, n);
  return T;
}

Eigen::VectorXd propagate_modal(const CellNetwork& net, const Eigen::VectorXd& x0, double current,
                                double t) {
  const Eigen::ArrayXd s = net.capacitance.array().rsqrt();
  Eigen::VectorXd y = net.modes.transpose() * (x0.array() / s).matrix();
  if (current != 0.0) {
    Eigen::VectorXd f = net.modes.transpose() * (s * net.forcing.array()).matrix();
    for (Eigen::Index k = 0; k < y.size(); ++k) {
      double lam = net.rates[k];
      double decay = std::exp(-lam * t);
      double gain = lam > 0 ? -std::expm1(-lam * t) / lam : t;
      y[k] = decay * y[k] + gain * f[k] * current;
    }
  } else {
    y.array() *= (-net.rates.array() * t).exp();
  }
  return (s * (net.modes * y).array()).matrix();
}

// Sparse implicit Euler on the joint state and sheet-potential system.
class ImplicitStepper {
 public:
  ImplicitStepper(const CellNetwork& net, double h) : net_(net), h_(h) {
    const int n = net.nodes(), k = net.branch_count(), ns = net.state_size();
    const int np = 2 * n - 1;
    std::vector<Eigen::Triplet<double>> trip;
    auto pot = [n](int a) { return a < n ? a : a - 1; };  // drops grounded negative node 0
    for (int r = 0; r < ns; ++r) {
      double d = net.capacitance[r] / h;
      if (r >= n) {
        int b = r / n - 1, a = r % n;
        d += 1.0 / net.branch_resistance(a, b);
      }
      trip.emplace_back(r, r, d);
    }
    // Element current i = g (E - phi_p + phi_n) couples states and potentials.
    for (int a = 0; a < n; ++a) {
      double g = 1.0 / net.series_resistance[a];
      std::vector<std::pair<int, double>> e{{a, 1.0}};
      for (int b = 0; b < k; ++b) e.push_back({n * (1 + b) + a, -1.0});
      std::vector<std::pair<int, double>> p{{ns + pot(a), 1.0}};
      if (a != 0) p.push_back({ns + pot(n + a), -1.0});
      // Rows of states: + T^T i ; rows of potentials: positive KCL - i, negative KCL + i.
      for (auto [ri, ci] : e) {
        for (auto [rj, cj] : e) trip.emplace_back(ri, rj, g * ci * cj);
        for (auto [rj, cj] : p) trip.emplace_back(ri, rj, -g * ci * cj);
      }
      for (auto [ri, ci] : p) {
        for (auto [rj, cj] : e) trip.emplace_back(ri, rj, -g * ci * cj);
        for (auto [rj, cj] : p) trip.emplace_back(ri, rj, g * ci * cj);
      }
    }
    for (int sheet = 0; sheet < 2; ++sheet) {
      const auto& L = sheet == 0 ? net.laplacian_positive : net.laplacian_negative;
      for (int c = 0; c < L.outerSize(); ++c)
        for (Eigen::SparseMatrix<double>::InnerIterator it(L, c); it; ++it) {
          int r = static_cast<int>(it.row()) + sheet * n, cc = static_cast<int>(it.col()) + sheet * n;
          if (r == n || cc == n) continue;
          trip.emplace_back(ns + pot(r), ns + pot(cc), it.value());
        }
    }
    A_.resize(ns + np, ns + np);
    A_.setFromTriplets(trip.begin(), trip.end());
    A_.makeCompressed();
    lu_.compute(A_);
    if (lu_.info() != Eigen::Success) throw NumericalError("sparse factorization failed");
    rhs_current_ = Eigen::VectorXd::Zero(ns + np);
    for (int a = 0; a < n; ++a) {
      rhs_current_[ns + pot(a)] -= net.positive_tab_weights[a];
      if (a != 0) rhs_current_[ns + pot(n + a)] += net.negative_tab_weights[a];
    }
  }

  // Advances x by one step; potentials of the new time level land in phi.
  Eigen::VectorXd step(const Eigen::VectorXd& x, double current, Eigen::VectorXd& phi) {
    const int ns = net_.state_size(), n = net_.nodes();
    Eigen::VectorXd rhs = current * rhs_current_;
    rhs.head(ns) += (net_.capacitance.array() * x.array()).matrix() / h_;
    Eigen::VectorXd z = lu_.solve(rhs);
    if (lu_.info() != Eigen::Success || !z.allFinite())
      throw NumericalError("implicit step produced non-finite values");
    phi = Eigen::VectorXd::Zero(2 * n);
    phi.head(n) = z.segment(ns, n);
    phi.tail(n - 1) = z.tail(n - 1);
    return z.head(ns);
  }

 private:
  const CellNetwork& net_;
  double h_;
  Eigen::SparseMatrix<double> A_;
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu_;
  Eigen::VectorXd rhs_current_;
};

Eigen::Matrix3Xd density_from(const CellNetwork& net, const Eigen::VectorXd& phi,
                              const Eigen::VectorXd& elem) {
  const int n = net.nodes();
  const VoxelGrid g = net.voxel_grid();
  Eigen::Matrix3Xd J = Eigen::Matrix3Xd::Zero(3, g.count());
  const double area = net.dx * net.dy;
  for (int sheet = 0; sheet < 2; ++sheet) {
    const auto& L = sheet == 0 ? net.laplacian_positive : net.laplacian_negative;
    const int iz = sheet == 0 ? 1 : 0;
    const double off = sheet == 0 ? 0 : n;
    for (int j = 0; j < net.ny; ++j)
      for (int i = 0; i < net.nx; ++i) {
        int a = net.node(i, j);
        if (i + 1 < net.nx) {
          int b = a + 1;
          double e = -L.coeff(a, b) * (phi[off + a] - phi[off + b]) / (net.dy * g.dz);
          J(0, g.index(i, j, iz)) += 0.5 * e;
          J(0, g.index(i + 1, j, iz)) += 0.5 * e;
        }
        if (j + 1 < net.ny) {
          int b = a + net.nx;
          double e = -L.coeff(a, b) * (phi[off + a] - phi[off + b]) / (net.dx * g.dz);
          J(1, g.index(i, j, iz)) += 0.5 * e;
          J(1, g.index(i, j + 1, iz)) += 0.5 * e;
        }
        J(2, g.index(i, j, iz)) = elem[a] / area;
      }
  }
  return J;
}

std::string format_g(double v) {
  char buf[40];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

CellPreset default_cell() {
  CellPreset p;
  p.geometry.length_y = 138.5e-3;
  p.geometry.width_x = 58e-3;
  p.geometry.thickness_z = 6e-3;
  p.geometry.nominal_capacity = 6.0;
  p.geometry.layer_count = 35;
  p.geometry.tabs = {make_tab(-14.5, 10, Polarity::positive), make_tab(14.5, 10, Polarity::negative)};
  p.params.nx = 4;
  p.params.ny = 8;
  return p;
}

CellPreset single_layer_cell() {
  CellPreset p;
  p.geometry.length_y = 138e-3;
  p.geometry.width_x = 60e-3;
  p.geometry.thickness_z = 170e-6;
  p.geometry.nominal_capacity = 62.4e-3;
  p.geometry.layer_count = 1;
  p.geometry.tabs = {make_tab(-15, 10, Polarity::positive), make_tab(15, 10, Polarity::negative)};
  p.params.nx = 12;
  p.params.ny = 28;
  return p;
}

const std::set<std::string>& network_config_keys() {
  static const std::set<std::string> keys{
      "preset", "width_mm", "length_mm", "thickness_mm", "capacity_mAh", "layer_count",
      "tab_width_mm", "positive_tab_mm", "negative_tab_mm", "grid", "series_resistance_ohm_m2",
      "branch", "branch_tau", "sheet_resistance_positive_ohm_sq", "sheet_resistance_negative_ohm_sq",
      "ocv_slope_V", "resistance_soc_coefficient", "resistance_gradient_y"};
  return keys;
}

CellPreset parse_network_config(const KeyValueConfig& cfg) {
  std::string preset = cfg.text("preset", "6ah");
  CellPreset p;
  if (preset == "6ah") p = default_cell();
  else if (preset == "single_layer") p = single_layer_cell();
  else throw InputError(cfg.source() + ": unknown preset '" + preset + "'");

  auto& g = p.geometry;
  g.width_x = cfg.number("width_mm", g.width_x / kMillimeter) * kMillimeter;
  g.length_y = cfg.number("length_mm", g.length_y / kMillimeter) * kMillimeter;
  g.thickness_z = cfg.number("thickness_mm", g.thickness_z / kMillimeter) * kMillimeter;
  g.nominal_capacity = cfg.number("capacity_mAh", g.nominal_capacity * 1e3) * 1e-3;
  g.layer_count = static_cast<int>(cfg.integer("layer_count", g.layer_count));
  if (cfg.has("tab_width_mm") || cfg.has("positive_tab_mm") || cfg.has("negative_tab_mm")) {
    double width = cfg.number("tab_width_mm", g.tabs.empty() ? 10.0 : g.tabs[0].width / kMillimeter);
    std::vector<double> pos, neg;
    for (const auto& t : g.tabs)
      (t.polarity == Polarity::positive ? pos : neg).push_back(t.position.x() / kMillimeter);
    if (cfg.has("positive_tab_mm")) pos = cfg.numbers("positive_tab_mm");
    if (cfg.has("negative_tab_mm")) neg = cfg.numbers("negative_tab_mm");
    g.tabs.clear();
    for (double x : pos) g.tabs.push_back(make_tab(x, width, Polarity::positive));
    for (double x : neg) g.tabs.push_back(make_tab(x, width, Polarity::negative));
  }

  auto& n = p.params;
  if (cfg.has("grid")) {
    auto parts = split(cfg.text("grid"), 'x');
    if (parts.size() != 2) throw InputError(cfg.source() + ": grid must look like 4x8");
    n.nx = static_cast<int>(parse_double(parts[0], "grid nx"));
    n.ny = static_cast<int>(parse_double(parts[1], "grid ny"));
  }
  n.series_resistance = cfg.number("series_resistance_ohm_m2", n.series_resistance);
  auto branch_rc = cfg.all("branch");
  auto branch_tau = cfg.all("branch_tau");
  if (!branch_rc.empty() || !branch_tau.empty()) {
    n.branches.clear();
    for (const auto& s : branch_rc) {
      auto v = parse_double_list(s, "branch");
      if (v.size() != 2) throw InputError(cfg.source() + ": branch needs R_ohm_m2, C_F_m2");
      n.branches.push_back({v[0], v[1]});
    }
    for (const auto& s : branch_tau) {
      auto v = parse_double_list(s, "branch_tau");
      if (v.size() != 2) throw InputError(cfg.source() + ": branch_tau needs R_ohm_m2, tau_s");
      if (!(v[0] > 0)) throw InputError(cfg.source() + ": branch resistance must be positive");
      n.branches.push_back({v[0], v[1] / v[0]});
    }
  }
  n.sheet_resistance_positive = cfg.number("sheet_resistance_positive_ohm_sq", n.sheet_resistance_positive);
  n.sheet_resistance_negative = cfg.number("sheet_resistance_negative_ohm_sq", n.sheet_resistance_negative);
  n.ocv_slope = cfg.number("ocv_slope_V", n.ocv_slope);
  n.resistance_soc_coefficient = cfg.number("resistance_soc_coefficient", n.resistance_soc_coefficient);
  n.resistance_gradient_y = cfg.number("resistance_gradient_y", n.resistance_gradient_y);
  return p;
}

Integrator parse_integrator(std::string_view s) {
  if (s == "exact") return Integrator::exact;
  if (s == "implicit_euler") return Integrator::implicit_euler;
  throw InputError("unknown integrator '" + std::string(s) + "'");
}

Eigen::Vector3d VoxelGrid::center(int v) const {
  int ix = v % nx, iy = (v / nx) % ny, iz = v / (nx * ny);
  return origin + Eigen::Vector3d(ix * dx, iy * dy, iz * dz);
}

VoxelGrid CellNetwork::voxel_grid() const {
  VoxelGrid g;
  g.nx = nx;
  g.ny = ny;
  g.nz = 2;
  g.dx = dx;
  g.dy = dy;
  const double pair = geometry.thickness_z / geometry.layer_count;
  g.dz = pair / 2;
  g.origin = Eigen::Vector3d(-geometry.width_x / 2 + dx / 2, dy / 2, -0.75 * pair);
  return g;
}

CellNetwork build_network(const CellGeometry& geometry, const NetworkParams& params, double soc) {
  validate(geometry);
  if (params.nx < 1 || params.ny < 1) throw InputError("grid must have at least one node");
  if (!(soc > 0 && soc <= 1)) throw InputError("soc must lie in (0, 1]");
  if (!(params.series_resistance > 0)) throw InputError("series resistance must be positive");
  if (!(params.sheet_resistance_positive > 0 && params.sheet_resistance_negative > 0))
    throw InputError("sheet resistances must be positive");
  if (!(params.ocv_slope > 0)) throw InputError("ocv_slope must be positive");
  for (const auto& b : params.branches)
    if (!(b.resistance > 0 && b.capacitance > 0))
      throw InputError("branch R and C must be positive");

  CellNetwork net;
  net.geometry = geometry;
  net.nx = params.nx;
  net.ny = params.ny;
  net.dx = geometry.width_x / net.nx;
  net.dy = geometry.length_y / net.ny;
  net.soc = soc;
  net.ocv_slope = params.ocv_slope;
  const int n = net.nodes();
  const int k = static_cast<int>(params.branches.size());
  const double layers = geometry.layer_count;
  const double area = net.dx * net.dy * layers;

  net.series_resistance.resize(n);
  net.branch_resistance.resize(n, k);
  net.branch_capacitance.resize(n, k);
  const double soc_scale = 1.0 + params.resistance_soc_coefficient * (1.0 - soc);
  for (int j = 0; j < net.ny; ++j) {
    double y = (j + 0.5) * net.dy;
    double scale = soc_scale * (1.0 + params.resistance_gradient_y * (y / geometry.length_y - 0.5));
    if (!(scale > 0)) throw InputError("resistance field scale must stay positive");
    for (int i = 0; i < net.nx; ++i) {
      int a = net.node(i, j);
      net.series_resistance[a] = params.series_resistance / area * scale;
      for (int b = 0; b < k; ++b) {
        net.branch_resistance(a, b) = params.branches[b].resistance / area * scale;
        net.branch_capacitance(a, b) = params.branches[b].capacitance * area;
      }
    }
  }
  net.node_charge = Eigen::VectorXd::Constant(n, geometry.nominal_capacity * 3600.0 / n);
  net.ocv_capacitance = net.node_charge / params.ocv_slope;

  const double rp = params.sheet_resistance_positive / layers;
  const double rn = params.sheet_resistance_negative / layers;
  net.laplacian_positive = sheet_laplacian(net.nx, net.ny, net.dy / net.dx / rp, net.dx / net.dy / rp);
  net.laplacian_negative = sheet_laplacian(net.nx, net.ny, net.dy / net.dx / rn, net.dx / net.dy / rn);
  net.positive_tab_weights = tab_weights(net, Polarity::positive, net.positive_tab_nodes);
  net.negative_tab_weights = tab_weights(net, Polarity::negative, net.negative_tab_nodes);

  // Node potentials with the negative sheet grounded at node 0.
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(2 * n, 2 * n);
  A.topLeftCorner(n, n) = Eigen::MatrixXd(net.laplacian_positive);
  A.bottomRightCorner(n, n) = Eigen::MatrixXd(net.laplacian_negative);
  const Eigen::VectorXd gs = net.series_resistance.cwiseInverse();
  for (int a = 0; a < n; ++a) {
    A(a, a) += gs[a];
    A(n + a, n + a) += gs[a];
    A(a, n + a) -= gs[a];
    A(n + a, a) -= gs[a];
  }
  Eigen::MatrixXd BE(2 * n, n);
  BE << Eigen::MatrixXd(gs.asDiagonal()), -Eigen::MatrixXd(gs.asDiagonal());
  Eigen::VectorXd BI(2 * n);
  BI << -net.positive_tab_weights, net.negative_tab_weights;

  std::vector<int> keep;
  for (int r = 0; r < 2 * n; ++r)
    if (r != n) keep.push_back(r);
  const int m = 2 * n - 1;
  Eigen::MatrixXd Ar(m, m);
  Eigen::MatrixXd rhs(m, n + 1);
  for (int r = 0; r < m; ++r) {
    for (int c = 0; c < m; ++c) Ar(r, c) = A(keep[r], keep[c]);
    rhs.row(r).head(n) = BE.row(keep[r]);
    rhs(r, n) = BI[keep[r]];
  }
  Eigen::LLT<Eigen::MatrixXd> llt(Ar);
  if (llt.info() != Eigen::Success) throw NumericalError("sheet network is singular");
  Eigen::MatrixXd sol = llt.solve(rhs);
  net.emf_to_potential = Eigen::MatrixXd::Zero(2 * n, n);
  net.pulse_to_potential = Eigen::VectorXd::Zero(2 * n);
  for (int r = 0; r < m; ++r) {
    net.emf_to_potential.row(keep[r]) = sol.row(r).head(n);
    net.pulse_to_potential[keep[r]] = sol(r, n);
  }
  Eigen::MatrixXd drop = net.emf_to_potential.topRows(n) - net.emf_to_potential.bottomRows(n);
  Eigen::MatrixXd M = Eigen::MatrixXd(gs.asDiagonal()) - gs.asDiagonal() * drop;
  net.emf_to_current = 0.5 * (M + M.transpose());
  net.pulse_to_current =
      -(gs.array() * (net.pulse_to_potential.head(n) - net.pulse_to_potential.tail(n)).array()).matrix();

  const Eigen::MatrixXd T = emf_map(n, k);
  const int ns = net.state_size();
  net.capacitance.resize(ns);
  net.capacitance.head(n) = net.ocv_capacitance;
  Eigen::VectorXd damping = Eigen::VectorXd::Zero(ns);
  for (int b = 0; b < k; ++b) {
    net.capacitance.segment(n * (1 + b), n) = net.branch_capacitance.col(b);
    damping.segment(n * (1 + b), n) = net.branch_resistance.col(b).cwiseInverse();
  }
  net.stiffness = T.transpose() * net.emf_to_current * T;
  net.stiffness.diagonal() += damping;
  net.stiffness = 0.5 * (net.stiffness + net.stiffness.transpose()).eval();
  net.forcing = -T.transpose() * net.pulse_to_current;

  const Eigen::ArrayXd s = net.capacitance.array().rsqrt();
  Eigen::MatrixXd S = s.matrix().asDiagonal() * net.stiffness * s.matrix().asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (S + S.transpose()));
  if (es.info() != Eigen::Success) throw NumericalError("eigen decomposition failed");
  net.rates = es.eigenvalues().cwiseMax(0.0);
  net.modes = es.eigenvectors();
  return net;
}

NetworkState rest_state(const CellNetwork& net) {
  NetworkState s;
  s.soc_offset = Eigen::VectorXd::Zero(net.nodes());
  s.branch_voltage = Eigen::MatrixXd::Zero(net.nodes(), net.branch_count());
  return s;
}

Eigen::VectorXd state_vector(const CellNetwork& net, const NetworkState& s) {
  const int n = net.nodes();
  if (s.soc_offset.size() != n || s.branch_voltage.rows() != n ||
      s.branch_voltage.cols() != net.branch_count())
    throw InputError("state dimension does not match network");
  Eigen::VectorXd x(net.state_size());
  x.head(n) = s.soc_offset * net.ocv_slope;
  for (int b = 0; b < net.branch_count(); ++b) x.segment(n * (1 + b), n) = s.branch_voltage.col(b);
  return x;
}

NetworkState state_from_vector(const CellNetwork& net, const Eigen::VectorXd& x, double time) {
  if (!x.allFinite()) throw NumericalError("non-finite network state");
  const int n = net.nodes();
  NetworkState s;
  s.soc_offset = x.head(n) / net.ocv_slope;
  s.branch_voltage.resize(n, net.branch_count());
  for (int b = 0; b < net.branch_count(); ++b) s.branch_voltage.col(b) = x.segment(n * (1 + b), n);
  s.time = time;
  return s;
}

double pulse_delta_soc(const CellNetwork& net, double current, double duration) {
  return current * duration / (net.geometry.nominal_capacity * 3600.0);
}

NetworkState apply_pulse(const CellNetwork& net, const NetworkState& state, double current,
                         double duration, double dt, Integrator integrator) {
  if (!(dt > 0)) throw InputError("dt must be positive");
  if (!(duration >= dt)) throw InputError("pulse duration must be at least dt");
  if (!std::isfinite(current)) throw InputError("pulse current must be finite");
  double dsoc = pulse_delta_soc(net, current, duration);
  double available = net.soc + state.soc_offset.mean();
  if (dsoc > available || dsoc > 1.0) throw InputError("pulse would discharge more than the available charge");
  Eigen::VectorXd x = state_vector(net, state);
  if (integrator == Integrator::exact) {
    x = propagate_modal(net, x, current, duration);
  } else {
    long steps = std::max(1L, static_cast<long>(std::ceil(duration / dt - 1e-9)));
    ImplicitStepper stepper(net, duration / steps);
    Eigen::VectorXd phi;
    for (long s = 0; s < steps; ++s) x = stepper.step(x, current, phi);
  }
  return state_from_vector(net, x, state.time + duration);
}

CurrentDensityHistory relax(const CellNetwork& net, const NetworkState& state, double t_end,
                            double dt, Integrator integrator) {
  if (!(dt > 0)) throw InputError("dt must be positive");
  if (!(t_end >= dt)) throw InputError("t_end must be at least dt");
  long steps = std::lround(t_end / dt);
  CurrentDensityHistory h;
  h.grid = net.voxel_grid();
  h.times.resize(steps + 1);
  h.density.reserve(steps + 1);
  Eigen::VectorXd x = state_vector(net, state);
  if (integrator == Integrator::exact) {
    const Eigen::ArrayXd s = net.capacitance.array().rsqrt();
    const Eigen::VectorXd y0 = net.modes.transpose() * (x.array() / s).matrix();
    for (long i = 0; i <= steps; ++i) {
      double t = i * dt;
      Eigen::VectorXd y = (y0.array() * (-net.rates.array() * t).exp()).matrix();
      Eigen::VectorXd xt = (s * (net.modes * y).array()).matrix();
      h.times[i] = t;
      h.density.push_back(current_density(net, xt, 0.0));
    }
  } else {
    ImplicitStepper stepper(net, dt);
    h.times[0] = 0.0;
    h.density.push_back(current_density(net, x, 0.0));
    Eigen::VectorXd phi;
    for (long i = 1; i <= steps; ++i) {
      x = stepper.step(x, 0.0, phi);
      const int n = net.nodes();
      Eigen::VectorXd E = x.head(n);
      for (int b = 0; b < net.branch_count(); ++b) E -= x.segment(n * (1 + b), n);
      Eigen::VectorXd elem =
          (E - phi.head(n) + phi.tail(n)).cwiseQuotient(net.series_resistance);
      h.times[i] = i * dt;
      h.density.push_back(density_from(net, phi, elem));
    }
  }
  for (const auto& J : h.density)
    if (!J.allFinite()) throw NumericalError("non-finite current density during relaxation");
  return h;
}

Eigen::VectorXd eigen_rates(const CellNetwork& net) { return net.rates; }

Eigen::MatrixXd system_matrix(const CellNetwork& net) {
  return net.capacitance.cwiseInverse().asDiagonal() * net.stiffness;
}

ModalExpansion modal_expansion(const CellNetwork& net, const NetworkState& state) {
  const Eigen::ArrayXd s = net.capacitance.array().rsqrt();
  ModalExpansion m;
  m.rates = net.rates;
  m.shapes = s.matrix().asDiagonal() * net.modes;
  m.coefficients = net.modes.transpose() * (state_vector(net, state).array() / s).matrix();
  return m;
}

Eigen::VectorXd element_currents(const CellNetwork& net, const Eigen::VectorXd& x, double current) {
  const int n = net.nodes();
  Eigen::VectorXd E = x.head(n);
  for (int b = 0; b < net.branch_count(); ++b) E -= x.segment(n * (1 + b), n);
  return net.emf_to_current * E + net.pulse_to_current * current;
}

Eigen::MatrixXd branch_currents(const CellNetwork& net, const NetworkState& state) {
  return state.branch_voltage.cwiseQuotient(net.branch_resistance);
}

Eigen::Matrix3Xd current_density(const CellNetwork& net, const Eigen::VectorXd& x, double current) {
  const int n = net.nodes();
  Eigen::VectorXd E = x.head(n);
  for (int b = 0; b < net.branch_count(); ++b) E -= x.segment(n * (1 + b), n);
  Eigen::VectorXd phi = net.emf_to_potential * E + net.pulse_to_potential * current;
  Eigen::VectorXd elem = net.emf_to_current * E + net.pulse_to_current * current;
  return density_from(net, phi, elem);
}

double stored_energy(const CellNetwork& net, const NetworkState& state) {
  Eigen::VectorXd x = state_vector(net, state);
  return 0.5 * (net.capacitance.array() * x.array().square()).sum();
}

double total_charge(const CellNetwork& net, const NetworkState& state) {
  return state.soc_offset.dot(net.node_charge);
}

std::filesystem::path grid_sidecar_path(const std::filesystem::path& csv) {
  std::filesystem::path p = csv;
  p.replace_extension(".grid.txt");
  return p;
}

void write_current_density(const CurrentDensityHistory& h, const std::filesystem::path& csv) {
  const auto& g = h.grid;
  std::string meta;
  meta += "nx = " + std::to_string(g.nx) + "\n";
  meta += "ny = " + std::to_string(g.ny) + "\n";
  meta += "nz = " + std::to_string(g.nz) + "\n";
  meta += "dx_m = " + format_g(g.dx) + "\n";
  meta += "dy_m = " + format_g(g.dy) + "\n";
  meta += "dz_m = " + format_g(g.dz) + "\n";
  meta += "origin_x_m = " + format_g(g.origin.x()) + "\n";
  meta += "origin_y_m = " + format_g(g.origin.y()) + "\n";
  meta += "origin_z_m = " + format_g(g.origin.z()) + "\n";
  meta += "times = " + std::to_string(h.times.size()) + "\n";

  std::string out = "time_s,ix,iy,iz,Jx_A_m2,Jy_A_m2,Jz_A_m2\n";
  out.reserve(static_cast<std::size_t>(h.times.size()) * g.count() * 70);
  for (Eigen::Index t = 0; t < h.times.size(); ++t) {
    const std::string ts = format_g(h.times[t]);
    for (int v = 0; v < g.count(); ++v) {
      int ix = v % g.nx, iy = (v / g.nx) % g.ny, iz = v / (g.nx * g.ny);
      out += ts + ',' + std::to_string(ix) + ',' + std::to_string(iy) + ',' + std::to_string(iz);
      for (int c = 0; c < 3; ++c) out += ',' + format_g(h.density[t](c, v));
      out += '\n';
    }
  }
  write_file_atomic(grid_sidecar_path(csv), meta);
  write_file_atomic(csv, out);
}

CurrentDensityHistory load_current_density(const std::filesystem::path& csv) {
  KeyValueConfig meta = KeyValueConfig::load(grid_sidecar_path(csv));
  CurrentDensityHistory h;
  auto& g = h.grid;
  g.nx = static_cast<int>(meta.integer("nx", 0));
  g.ny = static_cast<int>(meta.integer("ny", 0));
  g.nz = static_cast<int>(meta.integer("nz", 0));
  if (g.nx < 1 || g.ny < 1 || g.nz < 1) throw InputError("invalid voxel grid in sidecar");
  g.dx = meta.number("dx_m");
  g.dy = meta.number("dy_m");
  g.dz = meta.number("dz_m");
  g.origin = Eigen::Vector3d(meta.number("origin_x_m"), meta.number("origin_y_m"), meta.number("origin_z_m"));

  std::string text = read_file(csv);
  std::size_t start = 0, line_no = 0;
  std::vector<double> times;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = trim(std::string_view(text).substr(start, end - start));
    start = end + 1;
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != "time_s,ix,iy,iz,Jx_A_m2,Jy_A_m2,Jz_A_m2")
        throw InputError(csv.string() + ": unexpected current-density header");
      continue;
    }
    auto f = split(line, ',');
    if (f.size() != 7) throw InputError(csv.string() + ":" + std::to_string(line_no) + ": expected 7 fields");
    double t = parse_double(f[0], "time_s");
    int ix = static_cast<int>(parse_double(f[1], "ix"));
    int iy = static_cast<int>(parse_double(f[2], "iy"));
    int iz = static_cast<int>(parse_double(f[3], "iz"));
    if (ix < 0 || ix >= g.nx || iy < 0 || iy >= g.ny || iz < 0 || iz >= g.nz)
      throw InputError(csv.string() + ":" + std::to_string(line_no) + ": voxel index out of range");
    if (times.empty() || t != times.back()) {
      if (!times.empty() && t < times.back()) throw InputError(csv.string() + ": non-monotonic time");
      times.push_back(t);
      h.density.push_back(Eigen::Matrix3Xd::Constant(3, g.count(), std::nan("")));
    }
    int v = g.index(ix, iy, iz);
    for (int c = 0; c < 3; ++c) h.density.back()(c, v) = parse_double(f[4 + c], "J");
  }
  for (const auto& J : h.density)
    if (!J.allFinite()) throw InputError(csv.string() + ": missing voxels in current-density file");
  h.times = Eigen::Map<Eigen::VectorXd>(times.data(), static_cast<Eigen::Index>(times.size()));
  return h;
}

}  // namespace magrelax
