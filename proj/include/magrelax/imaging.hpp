#pragma once

#include "magrelax/core.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace magrelax {

// Pixel (row, col) holds the sensor at array index row * cols + col; rows run along +y.
// Missing pixels are NaN in memory, empty cells in CSV and gray 0 in PGM.
struct MagneticImage {
  Eigen::MatrixXd values;  // tesla
  Axis component = Axis::z;
  double time = 0;
  std::optional<double> reference;
  std::vector<std::string> pixel_sensor;  // row-major; empty string for pixels without a sensor
  std::vector<Eigen::Vector2d> outline;   // cell corners as (col, row) in pixel units
  double scale = 0;                       // symmetric display range, tesla

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }
  bool missing(Eigen::Index r, Eigen::Index c) const { return std::isnan(values(r, c)); }
};

MagneticImage render_frame(const SensorRecording& rec, const SensorArray& array, double t, Axis component,
                           std::optional<double> t_ref = std::nullopt,
                           const std::optional<CellGeometry>& geometry = std::nullopt);

// Frames sharing one display scale: max |value| over all frames.
std::vector<MagneticImage> render_series(const SensorRecording& rec, const SensorArray& array,
                                         const std::vector<double>& times, Axis component,
                                         std::optional<double> t_ref = std::nullopt,
                                         const std::optional<CellGeometry>& geometry = std::nullopt);

struct StepResponse {
  std::string channel;  // "<sensor>:<axis>"
  double onset = 0;
  double amplitude = 0;   // tesla, signed
  double decay_span = 0;  // time to fall to 1/e of the step, or to the record end
};

struct StepEvent {
  int group_id = 0;
  double onset = 0;  // onset of the largest response
  double amplitude = 0;
  double decay_span = 0;
  std::vector<StepResponse> responses;
};

// Steps where adjacent window means (window = min_persist) differ by at least min_amplitude.
std::vector<StepEvent> detect_steps(const SensorRecording& rec, double min_amplitude, double min_persist);

std::string format_image_csv(const MagneticImage& image);
MagneticImage parse_image_csv(std::string_view text, std::string_view source = "<string>");
std::string format_pgm(const MagneticImage& image);       // 16-bit, 0 reserved for missing
std::string format_mask_pgm(const MagneticImage& image);  // 8-bit, 255 where measured
std::string frame_stem(const MagneticImage& image);       // frame_<component>_<time_ms>

// Writes <stem>.csv, <stem>.pgm and <stem>_mask.pgm; returns the stem.
std::string write_frame(const MagneticImage& image, const std::filesystem::path& dir);

std::string format_step_events(const std::vector<StepEvent>& events);
std::vector<StepEvent> parse_step_events(std::string_view text, std::string_view source = "<string>");

}  // namespace magrelax
