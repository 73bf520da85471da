#include "magrelax/recording_io.hpp"

#include <charconv>
#include <cmath>
#include <map>
#include <set>
#include <string>

namespace magrelax {

namespace {

void append_fixed(std::string& out, double v, int precision) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, precision);
  if (ec != std::errc()) throw NumericalError("cannot format value");
  out.append(buf, ptr);
}

}  // namespace

SensorRecording parse_recording(std::string_view text, std::string_view source) {
  const std::string where(source);
  SensorRecording rec;
  std::vector<double> times;
  std::map<std::pair<std::string, int>, std::vector<double>> data;
  std::set<std::pair<std::string, int>> current;
  std::set<std::pair<std::string, int>> first_set;
  bool header_seen = false;
  std::size_t line_no = 0, start = 0;

  auto close_sample = [&]() {
    if (times.empty()) return;
    if (times.size() == 1) {
      first_set = current;
    } else if (current != first_set) {
      throw InputError(where + ": ragged channels at time " + std::to_string(times.back()));
    }
    current.clear();
  };

  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string line = trim(text.substr(start, end - start));
    start = end + 1;
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (header_seen) continue;
      std::string body = trim(std::string_view(line).substr(1));
      auto eq = body.find('=');
      if (eq != std::string::npos)
        rec.metadata[trim(std::string_view(body).substr(0, eq))] =
            trim(std::string_view(body).substr(eq + 1));
      continue;
    }
    if (!header_seen) {
      if (line != "time_s,sensor_id,axis,value_pT")
        throw InputError(where + ": expected header 'time_s,sensor_id,axis,value_pT'");
      header_seen = true;
      continue;
    }
    auto f = split(line, ',');
    const std::string at = where + ":" + std::to_string(line_no);
    if (f.size() != 4) throw InputError(at + ": expected 4 fields");
    double t = parse_double(f[0], at + " time_s");
    if (f[1].empty()) throw InputError(at + ": empty sensor_id");
    Axis axis = parse_axis(f[2]);
    double v = parse_double(f[3], at + " value_pT");
    if (times.empty() || t > times.back()) {
      close_sample();
      times.push_back(t);
    } else if (t < times.back()) {
      throw InputError(at + ": non-monotonic time");
    }
    auto key = std::make_pair(f[1], static_cast<int>(axis));
    if (!current.insert(key).second)
      throw InputError(at + ": duplicate sample for channel " + f[1] + ":" + axis_label(axis));
    auto& series = data[key];
    if (series.size() + 1 != times.size())
      throw InputError(at + ": ragged channels (" + f[1] + ":" + axis_label(axis) + ")");
    series.push_back(v * kPicotesla);
  }
  if (!header_seen) throw InputError(where + ": missing header");
  close_sample();

  rec.time = Eigen::Map<Eigen::VectorXd>(times.data(), static_cast<Eigen::Index>(times.size()));
  for (auto& [key, series] : data) {
    if (series.size() != times.size())
      throw InputError(where + ": ragged channels (" + key.first + ")");
    Channel c;
    c.sensor_id = key.first;
    c.axis = static_cast<Axis>(key.second);
    c.values = Eigen::Map<Eigen::VectorXd>(series.data(), static_cast<Eigen::Index>(series.size()));
    rec.channels.push_back(std::move(c));
  }
  sort_channels(rec);
  validate(rec);
  return rec;
}

SensorRecording load_recording(const std::filesystem::path& path, RecordingFormat format) {
  if (format != RecordingFormat::csv) throw InputError("unsupported recording format");
  return parse_recording(read_file(path), path.string());
}

std::string format_recording(const SensorRecording& rec) {
  validate(rec);
  SensorRecording sorted = rec;
  sort_channels(sorted);
  std::string out;
  out.reserve(static_cast<std::size_t>(rec.samples()) * rec.channels.size() * 40 + 256);
  for (const auto& [k, v] : sorted.metadata) out += "# " + k + "=" + v + "\n";
  out += "time_s,sensor_id,axis,value_pT\n";
  for (Eigen::Index k = 0; k < sorted.samples(); ++k) {
    for (const auto& c : sorted.channels) {
      append_fixed(out, sorted.time[k], 6);
      out += ',';
      out += c.sensor_id;
      out += ',';
      out += axis_label(c.axis);
      out += ',';
      double v = c.values[k] / kPicotesla;
      if (!std::isfinite(v)) throw NumericalError("non-finite value in channel " + c.sensor_id);
      append_fixed(out, v, 9);
      out += '\n';
    }
  }
  return out;
}

void write_recording(const SensorRecording& rec, const std::filesystem::path& path) {
  write_file_atomic(path, format_recording(rec));
}

std::string format_array(const SensorArray& array) {
  std::string out;
  if (array.grid_shape)
    out += "# grid_shape=" + std::to_string(array.grid_shape->first) + "x" +
           std::to_string(array.grid_shape->second) + "\n";
  else
    out += "# grid_shape=irregular\n";
  out += "id,x_mm,y_mm,z_mm,axes\n";
  for (const auto& s : array.sensors) {
    out += s.id;
    for (int i = 0; i < 3; ++i) {
      out += ',';
      append_fixed(out, s.position[i] / kMillimeter, 4);
    }
    out += ',';
    for (Axis a : s.axes) out += axis_label(a);
    out += '\n';
  }
  return out;
}

SensorArray parse_array(std::string_view text, std::string_view source) {
  const std::string where(source);
  SensorArray array;
  bool header = false, shape_seen = false;
  std::size_t start = 0, line_no = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string line = trim(text.substr(start, end - start));
    start = end + 1;
    ++line_no;
    if (line.empty()) continue;
    const std::string at = where + ":" + std::to_string(line_no);
    if (line[0] == '#') {
      std::string body = trim(std::string_view(line).substr(1));
      if (body.rfind("grid_shape=", 0) != 0) continue;
      shape_seen = true;
      std::string shape = body.substr(11);
      if (shape == "irregular") continue;
      auto rc = split(shape, 'x');
      if (rc.size() != 2) throw InputError(at + ": bad grid_shape '" + shape + "'");
      array.grid_shape = std::make_pair(static_cast<int>(parse_double(rc[0], at)), static_cast<int>(parse_double(rc[1], at)));
      continue;
    }
    auto f = split(line, ',');
    if (!header) {
      if (line != "id,x_mm,y_mm,z_mm,axes") throw InputError(at + ": expected header id,x_mm,y_mm,z_mm,axes");
      header = true;
      continue;
    }
    if (f.size() != 5) throw InputError(at + ": expected 5 fields");
    Sensor s;
    s.id = f[0];
    for (int i = 0; i < 3; ++i) s.position[i] = parse_double(f[i + 1], at) * kMillimeter;
    s.axes = parse_axes(f[4]);
    array.sensors.push_back(std::move(s));
  }
  if (!header) throw InputError(where + ": missing header");
  if (!shape_seen) throw InputError(where + ": missing grid_shape line");
  validate(array);
  return array;
}

SensorArray load_array(const std::filesystem::path& path) { return parse_array(read_file(path), path.string()); }

}  // namespace magrelax
