#pragma once

#include "magrelax/cellsim.hpp"
#include "magrelax/core.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace magrelax {

struct FieldSamples {
  Eigen::VectorXd time;
  SensorArray array;
  std::vector<Eigen::Matrix3Xd> field;  // per time: 3 x sensors, tesla
};

struct BiotSavartOptions {
  // In-plane split of each voxel into s x s point elements; 0 picks s from the stand-off.
  int subdivisions = 0;
  int workers = 1;
};

// Field of one current element J dV at `source`, observed at `point`.
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 1> element_field(const Eigen::Matrix<Scalar, 3, 1>& moment,
                                          const Eigen::Matrix<Scalar, 3, 1>& source,
                                          const Eigen::Matrix<Scalar, 3, 1>& point) {
  const Eigen::Matrix<Scalar, 3, 1> d = point - source;
  const Scalar r2 = d.squaredNorm();
  return Scalar(kMu0 / (4 * 3.14159265358979323846)) * moment.cross(d) / (r2 * std::sqrt(r2));
}

int auto_subdivisions(const VoxelGrid& grid, const std::vector<Eigen::Vector3d>& points);

// Field at `points` of one voxel snapshot (3 x voxels, A/m^2).
Eigen::Matrix3Xd biot_savart_snapshot(const VoxelGrid& grid, const Eigen::Matrix3Xd& density,
                                      const std::vector<Eigen::Vector3d>& points,
                                      const BiotSavartOptions& options = {});

FieldSamples biot_savart(const CurrentDensityHistory& history, const SensorArray& array,
                         const BiotSavartOptions& options = {});

// Channels for every measured axis of every sensor, in the recording schema.
SensorRecording to_recording(const FieldSamples& samples,
                             const std::map<std::string, std::string>& metadata = {});

struct FieldMap {
  double plane_z = 0;
  Eigen::VectorXd x, y;                // grid coordinates, m
  std::array<Eigen::MatrixXd, 3> component;  // rows along y, cols along x, tesla
};

// Regular nx x ny grid over the source footprint plus a margin of one voxel pitch,
// end points included.
FieldMap field_map_grid(const CurrentDensityHistory& history, Eigen::Index time_index,
                        double plane_z, int nx, int ny, const BiotSavartOptions& options = {});

struct StandoffRow {
  double standoff = 0;
  double peak_field = 0;  // max |B| over the array, tesla
};

std::vector<StandoffRow> standoff_study(const CurrentDensityHistory& history, Eigen::Index time_index,
                                       const SensorArray& array, const std::vector<double>& standoffs,
                                       const BiotSavartOptions& options = {});

}  // namespace magrelax
