#include "magrelax/cellsim.hpp"

#include <doctest.h>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <filesystem>

using namespace magrelax;

namespace {

CellPreset single_rc(double r_area, double c_area) {
  CellPreset p = default_cell();
  p.params.nx = 1;
  p.params.ny = 1;
  p.params.branches = {{r_area, c_area}};
  return p;
}

CellPreset grid_cell(int nx, int ny) {
  CellPreset p = default_cell();
  p.params.nx = nx;
  p.params.ny = ny;
  return p;
}

// Tabs of both polarities at +-14.5 mm: the network is its own mirror image in x.
CellPreset mirror_cell() {
  CellPreset p = default_cell();
  p.geometry.tabs.clear();
  for (double x : {-14.5e-3, 14.5e-3})
    for (Polarity pol : {Polarity::positive, Polarity::negative}) {
      Tab t;
      t.position = Eigen::Vector2d(x, 0);
      t.polarity = pol;
      p.geometry.tabs.push_back(t);
    }
  return p;
}

CellNetwork build(const CellPreset& p, double soc = 1.0) { return build_network(p.geometry, p.params, soc); }

double rel_max(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(b.cwiseAbs().maxCoeff(), 1e-300);
}

}  // namespace

TEST_CASE("single RC unit: rates and closed-form decay") {
  const double R = 2e-4, C = 5e4;  // tau = 10 s
  auto net = build(single_rc(R, C));
  Eigen::VectorXd rates = eigen_rates(net);
  REQUIRE(rates.size() == 2);
  CHECK(std::abs(rates[0]) < 1e-12);
  CHECK(rates[1] == doctest::Approx(1.0 / (R * C)).epsilon(1e-12));

  // Long pulse: the branch capacitor charges to I R_node.
  const double I = 0.5;
  const double r_node = net.branch_resistance(0, 0);
  auto charged = apply_pulse(net, rest_state(net), I, 500.0, 0.25);
  CHECK(std::abs(charged.branch_voltage(0, 0)) == doctest::Approx(I * r_node).epsilon(1e-9));

  // Open circuit: branch current decays as exp(-t/RC).
  const double j0 = branch_currents(net, charged)(0, 0);
  for (double t : {1.0, 7.5, 30.0}) {
    auto s = apply_pulse(net, charged, 0.0, t, 0.25);
    double expect = j0 * std::exp(-t / (R * C));
    CHECK(std::abs(branch_currents(net, s)(0, 0) - expect) <= 1e-6 * std::abs(expect));
  }
}

TEST_CASE("network construction") {
  auto net = build(grid_cell(4, 8));
  CHECK(net.nodes() == 32);
  CHECK(net.branch_count() == 3);
  auto offdiag = [](const Eigen::SparseMatrix<double>& L) {
    int n = 0;
    for (int k = 0; k < L.outerSize(); ++k)
      for (Eigen::SparseMatrix<double>::InnerIterator it(L, k); it; ++it)
        if (it.row() != it.col() && it.value() != 0) ++n;
    return n;
  };
  CHECK(offdiag(net.laplacian_positive) == 2 * 52);
  CHECK(offdiag(net.laplacian_negative) == 2 * 52);

  auto zero_c = default_cell();
  zero_c.params.branches[1].capacitance = 0;
  CHECK_THROWS_AS(build(zero_c), InputError);
  auto no_tabs = default_cell();
  no_tabs.geometry.tabs.clear();
  CHECK_THROWS_AS(build(no_tabs), InputError);
  CHECK_THROWS_AS(build(default_cell(), 0.0), InputError);
  CHECK_THROWS_AS(build(default_cell(), 1.2), InputError);
}

TEST_CASE("pulse bookkeeping") {
  auto net = build(default_cell());
  CHECK(pulse_delta_soc(net, 0.5, 60.0) == doctest::Approx(0.5 * 60 / (6.0 * 3600)).epsilon(1e-12));
  CHECK(100 * pulse_delta_soc(net, 0.5, 60.0) == doctest::Approx(0.139).epsilon(2e-3));

  auto rest = rest_state(net);
  auto same = apply_pulse(net, rest, 0.0, 60.0, 0.25);
  CHECK(state_vector(net, same).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK_THROWS_AS(apply_pulse(net, rest, 7.0, 3600.0, 1.0), InputError);
  CHECK_THROWS_AS(apply_pulse(net, rest, 0.5, 60.0, 0.0), InputError);
  CHECK_THROWS_AS(apply_pulse(net, rest, 0.5, 0.1, 0.25), InputError);
}

TEST_CASE("eigen rates agree with a general dense eigensolver") {
  for (auto [nx, ny] : {std::pair{2, 2}, std::pair{4, 8}}) {
    auto net = build(grid_cell(nx, ny));
    Eigen::VectorXd rates = eigen_rates(net);
    CHECK(rates.size() == net.state_size());
    for (Eigen::Index k = 1; k < rates.size(); ++k) CHECK(rates[k] >= rates[k - 1]);
    CHECK(rates.minCoeff() > -1e-12 * rates.maxCoeff());

    Eigen::EigenSolver<Eigen::MatrixXd> es(system_matrix(net));
    Eigen::VectorXd dense = es.eigenvalues().real();
    CHECK(es.eigenvalues().imag().cwiseAbs().maxCoeff() <= 1e-8 * rates.maxCoeff());
    std::sort(dense.data(), dense.data() + dense.size());
    for (Eigen::Index k = 0; k < rates.size(); ++k)
      CHECK(std::abs(dense[k] - rates[k]) <= 1e-8 * std::max(rates[k], 1e-3 * rates.maxCoeff()));
  }
}

TEST_CASE("two decoupled identical units give a repeated rate") {
  // Two nodes with negligible sheet conductance behave as independent units.
  auto p = single_rc(2e-4, 5e4);
  p.params.nx = 2;
  p.params.sheet_resistance_positive = 1e9;
  p.params.sheet_resistance_negative = 1e9;
  auto net = build(p);
  Eigen::VectorXd r = eigen_rates(net);
  int near = 0;
  for (Eigen::Index k = 0; k < r.size(); ++k)
    if (std::abs(r[k] - 0.1) < 1e-6) ++near;
  CHECK(near == 2);
}

TEST_CASE("relaxation history matches the modal oracle on a 2x2 grid") {
  auto net = build(grid_cell(2, 2));
  auto state = apply_pulse(net, rest_state(net), 0.6, 60.0, 0.25);
  auto h = relax(net, state, 120.0, 0.5);
  const auto m = modal_expansion(net, state);
  for (Eigen::Index ti : {0, 7, 60, 240}) {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(net.state_size());
    for (Eigen::Index k = 0; k < m.rates.size(); ++k)
      x += m.coefficients[k] * std::exp(-m.rates[k] * h.times[ti]) * m.shapes.col(k);
    Eigen::Matrix3Xd J = current_density(net, x, 0.0);
    CHECK(rel_max(h.density[ti], J) <= 1e-6);
  }
}

TEST_CASE("relaxation reaches equilibrium and conserves charge") {
  auto net = build(default_cell());
  auto state = apply_pulse(net, rest_state(net), 0.6, 60.0, 0.25);
  const double slow = 1.0 / eigen_rates(net).tail(net.state_size() - 1).minCoeff();
  auto h = relax(net, state, 40 * slow, 4 * slow);
  const double j0 = h.density.front().cwiseAbs().maxCoeff();
  CHECK(h.density.back().cwiseAbs().maxCoeff() <= 1e-6 * j0);

  const double q0 = total_charge(net, state);
  double e_prev = stored_energy(net, state);
  NetworkState s = state;
  for (int i = 0; i < 20; ++i) {
    s = apply_pulse(net, s, 0.0, 15.0, 15.0);
    CHECK(std::abs(total_charge(net, s) - q0) <= 1e-10 * std::abs(q0));
    const double e = stored_energy(net, s);
    CHECK(e <= e_prev * (1 + 1e-12));
    e_prev = e;
  }
}

TEST_CASE("current density is linear in the pulse current") {
  auto net = build(default_cell());
  auto h1 = relax(net, apply_pulse(net, rest_state(net), 0.6, 30.0, 0.25), 60.0, 1.0);
  auto h3 = relax(net, apply_pulse(net, rest_state(net), 1.8, 30.0, 0.25), 60.0, 1.0);
  for (std::size_t t = 0; t < h1.density.size(); t += 10) CHECK(rel_max(h3.density[t], 3.0 * h1.density[t]) <= 1e-8);
}

TEST_CASE("mirror-symmetric network gives mirror-symmetric current density") {
  auto net = build(mirror_cell());
  auto h = relax(net, apply_pulse(net, rest_state(net), 0.6, 60.0, 0.25), 30.0, 10.0);
  const VoxelGrid g = h.grid;
  for (const auto& J : h.density) {
    const double scale = J.cwiseAbs().maxCoeff();
    double worst = 0;
    for (int iz = 0; iz < g.nz; ++iz)
      for (int iy = 0; iy < g.ny; ++iy)
        for (int ix = 0; ix < g.nx; ++ix) {
          int a = g.index(ix, iy, iz), b = g.index(g.nx - 1 - ix, iy, iz);
          worst = std::max({worst, std::abs(J(0, a) + J(0, b)), std::abs(J(1, a) - J(1, b)), std::abs(J(2, a) - J(2, b))});
        }
    CHECK(worst <= 1e-8 * scale);
  }
}

TEST_CASE("modal shapes are eigenvectors of the system matrix") {
  auto net = build(grid_cell(4, 8));
  auto state = apply_pulse(net, rest_state(net), 0.6, 60.0, 0.25);
  const auto m = modal_expansion(net, state);
  // Modal shapes are eigenvectors of the system matrix with the reported rates.
  const Eigen::MatrixXd A = system_matrix(net);
  for (Eigen::Index k = 1; k < m.rates.size(); k += 17)
    CHECK((A * m.shapes.col(k) - m.rates[k] * m.shapes.col(k)).norm() <= 1e-8 * m.rates.maxCoeff() * m.shapes.col(k).norm());
}

TEST_CASE("implicit Euler converges to the exact propagator at first order") {
  auto net = build(grid_cell(4, 8));
  auto state = apply_pulse(net, rest_state(net), 0.6, 60.0, 0.25);
  auto exact = relax(net, state, 8.0, 0.5).density.back();
  std::vector<double> err;
  for (double dt : {0.5, 0.25, 0.125}) {
    auto h = relax(net, state, 8.0, dt, Integrator::implicit_euler);
    err.push_back(rel_max(h.density.back(), exact));
  }
  CHECK(err[0] / err[1] == doctest::Approx(2.0).epsilon(0.15));
  CHECK(err[1] / err[2] == doctest::Approx(2.0).epsilon(0.15));
  auto pulse_ie = apply_pulse(net, rest_state(net), 0.6, 60.0, 0.05, Integrator::implicit_euler);
  CHECK(rel_max(state_vector(net, pulse_ie), state_vector(net, state)) < 1e-2);
}

TEST_CASE("network config parsing") {
  auto cfg = KeyValueConfig::parse(
      "preset = single_layer\ngrid = 6x14\nbranch_tau = 1e-4, 10\nocv_slope_V = 0.01\npositive_tab_mm = -10\n"
      "negative_tab_mm = 10\n");
  auto p = parse_network_config(cfg);
  CHECK(p.params.nx == 6);
  CHECK(p.params.ny == 14);
  REQUIRE(p.params.branches.size() == 1);
  CHECK(p.params.branches[0].resistance * p.params.branches[0].capacitance == doctest::Approx(10.0));
  CHECK(p.geometry.layer_count == 1);
  CHECK(p.geometry.tabs.size() == 2);
  CHECK_THROWS_AS(parse_network_config(KeyValueConfig::parse("grid = 4by8\n")), InputError);
}

TEST_CASE("current density export round trip") {
  auto net = build(grid_cell(2, 3));
  auto h = relax(net, apply_pulse(net, rest_state(net), 0.6, 10.0, 0.25), 4.0, 1.0);
  auto path = std::filesystem::temp_directory_path() / "magrelax_density_test.csv";
  write_current_density(h, path);
  auto back = load_current_density(path);
  CHECK(back.grid.nx == h.grid.nx);
  CHECK(back.grid.nz == h.grid.nz);
  CHECK(back.grid.dz == h.grid.dz);
  CHECK(back.times == h.times);
  for (std::size_t t = 0; t < h.density.size(); ++t) CHECK(back.density[t] == h.density[t]);
  std::filesystem::remove(path);
  std::filesystem::remove(grid_sidecar_path(path));
}
