#pragma once

#include "magrelax/config.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace magrelax {

inline constexpr double kMu0 = 1.25663706212e-6;  // H/m
inline constexpr double kPicotesla = 1e-12;
inline constexpr double kMillimeter = 1e-3;

// Bad files, configs or arguments. The CLI maps this to exit code 2.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Solver breakdown or non-finite results. The CLI maps this to exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Axis { x = 0, y = 1, z = 2 };

char axis_label(Axis a);
Axis parse_axis(std::string_view s);
std::vector<Axis> parse_axes(std::string_view s);

enum class Polarity { positive, negative };

struct Tab {
  Eigen::Vector2d position{0.0, 0.0};  // (x, y), y = 0 on the tab edge
  double width = 10e-3;
  Polarity polarity = Polarity::positive;
};

struct CellGeometry {
  double length_y = 138.5e-3;
  double width_x = 58e-3;
  double thickness_z = 6e-3;
  std::vector<Tab> tabs;
  double nominal_capacity = 6.0;  // A h
  int layer_count = 35;
};

void validate(const CellGeometry& g);

struct Sensor {
  std::string id;
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  std::vector<Axis> axes{Axis::x, Axis::y, Axis::z};

  bool measures(Axis a) const;
};

struct SensorArray {
  std::vector<Sensor> sensors;
  std::optional<std::pair<int, int>> grid_shape;  // (rows, cols); empty means irregular

  const Sensor* find(std::string_view id) const;
  SensorArray translated(const Eigen::Vector3d& shift) const;
};

void validate(const SensorArray& a);

struct Channel {
  std::string sensor_id;
  Axis axis = Axis::z;
  Eigen::VectorXd values;  // tesla
};

struct SensorRecording {
  Eigen::VectorXd time;           // seconds, strictly increasing
  std::vector<Channel> channels;  // sorted by (sensor_id, axis)
  std::map<std::string, std::string> metadata;

  Eigen::Index samples() const { return time.size(); }
  const Channel* find(std::string_view sensor_id, Axis axis) const;
  std::string channel_name(std::size_t i) const;
};

void validate(const SensorRecording& rec);
void sort_channels(SensorRecording& rec);

// Median spacing of the time base.
double sample_interval(const Eigen::VectorXd& time);
// Index of the sample nearest t (earlier sample on ties).
Eigen::Index nearest_sample(const Eigen::VectorXd& time, double t);

SensorRecording moving_average(const SensorRecording& rec, double window);
SensorRecording subtract_baseline(const SensorRecording& rec, double t_ref);

// Centered boxcar of n samples on one series, truncated at the edges.
Eigen::VectorXd centered_mean(const Eigen::VectorXd& y, Eigen::Index n);

struct LayoutConfig {
  std::optional<std::string> builtin;
  double standoff = 8.4e-3;
  std::vector<Sensor> sensors;
};

LayoutConfig parse_layout_config(const KeyValueConfig& cfg);
LayoutConfig load_layout_config(const std::filesystem::path& path);
SensorArray array_layout(const LayoutConfig& spec);
SensorArray builtin_layout(std::string_view name, double standoff = 8.4e-3);

// Regular grid of sensors covering the cell footprint plus `margin` on every side.
SensorArray footprint_scan_array(const CellGeometry& g, double pitch, double standoff,
                                 double margin = 0.0);

// Runs fn(i) for i in [0, count) split into contiguous blocks across `workers` threads.
void parallel_for(std::size_t count, int workers, const std::function<void(std::size_t)>& fn);

// Writes to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

}  // namespace magrelax
