#include "magrelax/fieldmap.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace magrelax {

namespace {

constexpr double kMuOver4Pi = kMu0 / (4 * 3.14159265358979323846);

// Neumaier-compensated running sum of 3-vectors.
struct CompensatedSum3 {
  Eigen::Vector3d sum = Eigen::Vector3d::Zero();
  Eigen::Vector3d carry = Eigen::Vector3d::Zero();

  void add(const Eigen::Vector3d& v) {
    for (int c = 0; c < 3; ++c) {
      double t = sum[c] + v[c];
      if (std::abs(sum[c]) >= std::abs(v[c]))
        carry[c] += (sum[c] - t) + v[c];
      else
        carry[c] += (v[c] - t) + sum[c];
      sum[c] = t;
    }
  }
  Eigen::Vector3d value() const { return sum + carry; }
};

// Per point and voxel: sum over the voxel's point elements of d / |d|^3.
class Kernel {
 public:
  Kernel(const VoxelGrid& grid, const std::vector<Eigen::Vector3d>& points, const BiotSavartOptions& options)
      : grid_(grid), points_(points) {
    int s = options.subdivisions > 0 ? options.subdivisions : auto_subdivisions(grid, points);
    const double sx = grid.dx / s, sy = grid.dy / s;
    const double limit = 0.25 * (sx * sx + sy * sy + grid.dz * grid.dz);
    sub_volume_ = sx * sy * grid.dz;
    std::vector<Eigen::Vector2d> offsets;
    for (int b = 0; b < s; ++b)
      for (int a = 0; a < s; ++a)
        offsets.emplace_back(-grid.dx / 2 + (a + 0.5) * sx, -grid.dy / 2 + (b + 0.5) * sy);
    const int nv = grid.count();
    geometry_.assign(points.size(), Eigen::Matrix3Xd::Zero(3, nv));
    parallel_for(points.size(), options.workers, [&](std::size_t p) {
      const Eigen::Vector3d& r = points_[p];
      for (int v = 0; v < nv; ++v) {
        const Eigen::Vector3d c = grid_.center(v);
        CompensatedSum3 acc;
        for (const auto& o : offsets) {
          Eigen::Vector3d d = r - Eigen::Vector3d(c.x() + o.x(), c.y() + o.y(), c.z());
          double r2 = d.squaredNorm();
          if (r2 < limit) throw InputError("singular stand-off: sensor within half a voxel diagonal of a source element");
          acc.add(d / (r2 * std::sqrt(r2)));
        }
        geometry_[p].col(v) = acc.value();
      }
    });
  }

  Eigen::Vector3d field(std::size_t p, const Eigen::Matrix3Xd& density) const {
    CompensatedSum3 acc;
    const auto& G = geometry_[p];
    for (Eigen::Index v = 0; v < G.cols(); ++v) {
      Eigen::Vector3d j = density.col(v);
      if (j.isZero(0.0)) continue;
      acc.add(j.cross(G.col(v)));
    }
    return kMuOver4Pi * sub_volume_ * acc.value();
  }

 private:
  const VoxelGrid& grid_;
  const std::vector<Eigen::Vector3d>& points_;
  double sub_volume_ = 0;
  std::vector<Eigen::Matrix3Xd> geometry_;
};

std::vector<Eigen::Vector3d> positions(const SensorArray& array) {
  std::vector<Eigen::Vector3d> out;
  for (const auto& s : array.sensors) out.push_back(s.position);
  return out;
}

}  // namespace

int auto_subdivisions(const VoxelGrid& grid, const std::vector<Eigen::Vector3d>& points) {
  const double top = grid.origin.z() + (grid.nz - 0.5) * grid.dz;
  double clearance = std::numeric_limits<double>::infinity();
  for (const auto& p : points) clearance = std::min(clearance, p.z() - top);
  if (!(clearance > 0)) return 1;
  double diag = std::hypot(grid.dx, grid.dy);
  int s = static_cast<int>(std::ceil(2.0 * diag / clearance - 1e-9));
  return std::clamp(s, 1, 64);
}

Eigen::Matrix3Xd biot_savart_snapshot(const VoxelGrid& grid, const Eigen::Matrix3Xd& density,
                                      const std::vector<Eigen::Vector3d>& points,
                                      const BiotSavartOptions& options) {
  if (density.cols() != grid.count()) throw InputError("current density does not match voxel grid");
  Kernel kernel(grid, points, options);
  Eigen::Matrix3Xd B(3, points.size());
  for (std::size_t p = 0; p < points.size(); ++p) B.col(p) = kernel.field(p, density);
  return B;
}

FieldSamples biot_savart(const CurrentDensityHistory& history, const SensorArray& array,
                         const BiotSavartOptions& options) {
  validate(array);
  const auto pts = positions(array);
  Kernel kernel(history.grid, pts, options);
  FieldSamples out;
  out.time = history.times;
  out.array = array;
  out.field.assign(history.density.size(), Eigen::Matrix3Xd::Zero(3, pts.size()));
  for (const auto& J : history.density)
    if (J.cols() != history.grid.count()) throw InputError("current density does not match voxel grid");
  parallel_for(pts.size(), options.workers, [&](std::size_t p) {
    for (std::size_t t = 0; t < history.density.size(); ++t)
      out.field[t].col(p) = kernel.field(p, history.density[t]);
  });
  for (const auto& B : out.field)
    if (!B.allFinite()) throw NumericalError("non-finite field value");
  return out;
}

SensorRecording to_recording(const FieldSamples& samples, const std::map<std::string, std::string>& metadata) {
  SensorRecording rec;
  rec.time = samples.time;
  rec.metadata = metadata;
  const Eigen::Index nt = samples.time.size();
  for (std::size_t s = 0; s < samples.array.sensors.size(); ++s) {
    const auto& sensor = samples.array.sensors[s];
    for (Axis a : sensor.axes) {
      Channel c;
      c.sensor_id = sensor.id;
      c.axis = a;
      c.values.resize(nt);
      for (Eigen::Index t = 0; t < nt; ++t) c.values[t] = samples.field[t](static_cast<int>(a), s);
      rec.channels.push_back(std::move(c));
    }
  }
  sort_channels(rec);
  validate(rec);
  return rec;
}

FieldMap field_map_grid(const CurrentDensityHistory& history, Eigen::Index time_index, double plane_z,
                        int nx, int ny, const BiotSavartOptions& options) {
  if (time_index < 0 || time_index >= static_cast<Eigen::Index>(history.density.size()))
    throw InputError("snapshot index out of range");
  if (nx < 2 || ny < 2) throw InputError("field map needs at least 2 x 2 points");
  const auto& g = history.grid;
  const double x0 = g.origin.x() - 1.5 * g.dx, x1 = g.origin.x() + (g.nx + 0.5) * g.dx;
  const double y0 = g.origin.y() - 1.5 * g.dy, y1 = g.origin.y() + (g.ny + 0.5) * g.dy;
  FieldMap map;
  map.plane_z = plane_z;
  map.x.resize(nx);
  map.y.resize(ny);
  for (int i = 0; i < nx; ++i) map.x[i] = x0 + (x1 - x0) * i / (nx - 1);
  for (int j = 0; j < ny; ++j) map.y[j] = y0 + (y1 - y0) * j / (ny - 1);
  std::vector<Eigen::Vector3d> pts;
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) pts.emplace_back(map.x[i], map.y[j], plane_z);
  BiotSavartOptions opt = options;
  if (opt.subdivisions == 0) opt.subdivisions = auto_subdivisions(g, pts);
  Eigen::Matrix3Xd B = biot_savart_snapshot(g, history.density[time_index], pts, opt);
  for (int c = 0; c < 3; ++c) {
    map.component[c].resize(ny, nx);
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i) map.component[c](j, i) = B(c, j * nx + i);
  }
  return map;
}

std::vector<StandoffRow> standoff_study(const CurrentDensityHistory& history, Eigen::Index time_index,
                                       const SensorArray& array, const std::vector<double>& standoffs,
                                       const BiotSavartOptions& options) {
  std::vector<StandoffRow> rows;
  if (standoffs.empty()) return rows;
  if (time_index < 0 || time_index >= static_cast<Eigen::Index>(history.density.size()))
    throw InputError("snapshot index out of range");
  if (array.sensors.empty()) throw InputError("empty sensor array");
  double zmin = std::numeric_limits<double>::infinity();
  for (const auto& s : array.sensors) zmin = std::min(zmin, s.position.z());
  for (double z : standoffs) {
    SensorArray moved = array.translated(Eigen::Vector3d(0, 0, z - zmin));
    Eigen::Matrix3Xd B = biot_savart_snapshot(history.grid, history.density[time_index], positions(moved), options);
    rows.push_back({z, B.colwise().norm().maxCoeff()});
  }
  return rows;
}

}  // namespace magrelax
