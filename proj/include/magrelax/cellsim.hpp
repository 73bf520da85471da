#pragma once

#include "magrelax/config.hpp"
#include "magrelax/core.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <filesystem>
#include <set>
#include <string>
#include <vector>

namespace magrelax {

// Area-specific RC branch of one electrode pair: ohm m^2 and F/m^2.
struct BranchParams {
  double resistance = 1e-4;
  double capacitance = 4.6e4;
};

struct NetworkParams {
  int nx = 4;
  int ny = 8;
  double series_resistance = 6e-4;  // ohm m^2
  std::vector<BranchParams> branches{{1e-4, 4.6 / 1e-4}, {2e-4, 20.3 / 2e-4}, {3e-4, 95.5 / 3e-4}};
  double sheet_resistance_positive = 1.8e-3;  // ohm per square, one layer
  double sheet_resistance_negative = 1.9e-3;
  double ocv_slope = 0.002;  // V per unit SoC
  // Resistances scale by (1 + soc_coefficient (1 - soc)) and by
  // (1 + gradient_y (y / L - 1/2)) along the cell.
  double resistance_soc_coefficient = 0.0;
  double resistance_gradient_y = 0.0;
};

struct CellPreset {
  CellGeometry geometry;
  NetworkParams params;
};

CellPreset default_cell();       // 6 A h pouch, 4x8 grid
CellPreset single_layer_cell();  // 60 x 138 mm single electrode pair, 12x28 grid

// Keys understood by parse_network_config.
const std::set<std::string>& network_config_keys();
// Starts from `preset` (default "6ah") and applies the overrides found in cfg.
CellPreset parse_network_config(const KeyValueConfig& cfg);

enum class Integrator { exact, implicit_euler };
Integrator parse_integrator(std::string_view s);

// Voxel centers: origin + (ix dx, iy dy, iz dz); voxel index (iz ny + iy) nx + ix.
struct VoxelGrid {
  int nx = 1, ny = 1, nz = 1;
  double dx = 1, dy = 1, dz = 1;
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();

  int count() const { return nx * ny * nz; }
  int index(int ix, int iy, int iz) const { return (iz * ny + iy) * nx + ix; }
  Eigen::Vector3d center(int v) const;
  double volume() const { return dx * dy * dz; }
};

struct CurrentDensityHistory {
  VoxelGrid grid;
  Eigen::VectorXd times;
  std::vector<Eigen::Matrix3Xd> density;  // per time: 3 x voxels, A/m^2
};

struct CellNetwork {
  CellGeometry geometry;
  int nx = 1, ny = 1;
  double dx = 0, dy = 0;
  double soc = 1.0;
  double ocv_slope = 0;

  Eigen::VectorXd series_resistance;   // ohm per node
  Eigen::MatrixXd branch_resistance;   // nodes x branches, ohm
  Eigen::MatrixXd branch_capacitance;  // nodes x branches, F
  Eigen::VectorXd ocv_capacitance;     // F per node
  Eigen::VectorXd node_charge;         // coulombs of capacity per node

  Eigen::SparseMatrix<double> laplacian_positive;
  Eigen::SparseMatrix<double> laplacian_negative;
  std::vector<int> positive_tab_nodes, negative_tab_nodes;
  Eigen::VectorXd positive_tab_weights, negative_tab_weights;  // per node, each sums to 1

  // Sheet network reduced to the elements: currents and potentials per element emf
  // and per ampere of terminal current. Potentials stack [positive; negative].
  Eigen::MatrixXd emf_to_current;
  Eigen::VectorXd pulse_to_current;
  Eigen::MatrixXd emf_to_potential;
  Eigen::VectorXd pulse_to_potential;

  // C x' = -K x + F I with x = [ocv voltage; branch voltages by branch].
  Eigen::VectorXd capacitance;
  Eigen::MatrixXd stiffness;
  Eigen::VectorXd forcing;

  // Symmetric modes of C^-1/2 K C^-1/2, rates ascending.
  Eigen::VectorXd rates;
  Eigen::MatrixXd modes;

  int nodes() const { return nx * ny; }
  int branch_count() const { return static_cast<int>(branch_resistance.cols()); }
  int state_size() const { return nodes() * (1 + branch_count()); }
  int node(int i, int j) const { return j * nx + i; }
  VoxelGrid voxel_grid() const;
};

struct NetworkState {
  Eigen::VectorXd soc_offset;      // per node
  Eigen::MatrixXd branch_voltage;  // nodes x branches, V
  double time = 0.0;
};

CellNetwork build_network(const CellGeometry& geometry, const NetworkParams& params, double soc);

NetworkState rest_state(const CellNetwork& net);
Eigen::VectorXd state_vector(const CellNetwork& net, const NetworkState& s);
NetworkState state_from_vector(const CellNetwork& net, const Eigen::VectorXd& x, double time);

double pulse_delta_soc(const CellNetwork& net, double current, double duration);

NetworkState apply_pulse(const CellNetwork& net, const NetworkState& state, double current,
                         double duration, double dt, Integrator integrator = Integrator::exact);

CurrentDensityHistory relax(const CellNetwork& net, const NetworkState& state, double t_end,
                            double dt, Integrator integrator = Integrator::exact);

Eigen::VectorXd eigen_rates(const CellNetwork& net);

// C^-1 K assembled densely, for checks against a general eigensolver.
Eigen::MatrixXd system_matrix(const CellNetwork& net);

// x(t) = sum_k coefficients[k] exp(-rates[k] t) shapes.col(k) at zero current.
struct ModalExpansion {
  Eigen::VectorXd rates;
  Eigen::MatrixXd shapes;
  Eigen::VectorXd coefficients;
};
ModalExpansion modal_expansion(const CellNetwork& net, const NetworkState& state);

// Element (through-plane) current per node, A, positive upward.
Eigen::VectorXd element_currents(const CellNetwork& net, const Eigen::VectorXd& x, double current);
// Branch resistor currents u_k / R_k, nodes x branches.
Eigen::MatrixXd branch_currents(const CellNetwork& net, const NetworkState& state);
// Voxel current density for state vector x while `current` flows at the tabs.
Eigen::Matrix3Xd current_density(const CellNetwork& net, const Eigen::VectorXd& x, double current);

double stored_energy(const CellNetwork& net, const NetworkState& state);
double total_charge(const CellNetwork& net, const NetworkState& state);

// CSV `time_s,ix,iy,iz,Jx_A_m2,Jy_A_m2,Jz_A_m2` plus `<stem>.grid.txt`.
void write_current_density(const CurrentDensityHistory& h, const std::filesystem::path& csv);
CurrentDensityHistory load_current_density(const std::filesystem::path& csv);
std::filesystem::path grid_sidecar_path(const std::filesystem::path& csv);

}  // namespace magrelax
