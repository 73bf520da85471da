#include "magrelax/core.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

namespace magrelax {

char axis_label(Axis a) {
  switch (a) {
    case Axis::x: return 'x';
    case Axis::y: return 'y';
    case Axis::z: return 'z';
  }
  return '?';
}

Axis parse_axis(std::string_view s) {
  std::string t = trim(s);
  if (t == "x" || t == "X") return Axis::x;
  if (t == "y" || t == "Y") return Axis::y;
  if (t == "z" || t == "Z") return Axis::z;
  throw InputError("unknown axis label '" + t + "'");
}

std::vector<Axis> parse_axes(std::string_view s) {
  std::string t = trim(s);
  std::set<int> seen;
  for (char c : t) seen.insert(static_cast<int>(parse_axis(std::string(1, c))));
  if (seen.empty()) throw InputError("empty axis set");
  std::vector<Axis> out;
  for (int a : seen) out.push_back(static_cast<Axis>(a));
  return out;
}

void validate(const CellGeometry& g) {
  if (!(g.length_y > 0 && g.width_x > 0 && g.thickness_z > 0))
    throw InputError("cell dimensions must be positive");
  if (!(g.nominal_capacity > 0)) throw InputError("nominal capacity must be positive");
  if (g.layer_count < 1) throw InputError("layer_count must be >= 1");
  for (const auto& t : g.tabs) {
    if (std::abs(t.position.x()) > g.width_x / 2 + 1e-12)
      throw InputError("tab position outside the cell width");
    if (t.position.y() != 0.0) throw InputError("tabs must lie on the y = 0 edge");
    if (!(t.width > 0)) throw InputError("tab width must be positive");
  }
}

bool Sensor::measures(Axis a) const {
  return std::find(axes.begin(), axes.end(), a) != axes.end();
}

const Sensor* SensorArray::find(std::string_view id) const {
  for (const auto& s : sensors)
    if (s.id == id) return &s;
  return nullptr;
}

SensorArray SensorArray::translated(const Eigen::Vector3d& shift) const {
  SensorArray out = *this;
  for (auto& s : out.sensors) s.position += shift;
  return out;
}

void validate(const SensorArray& a) {
  std::set<std::string> ids;
  std::set<std::tuple<double, double, double>> positions;
  for (const auto& s : a.sensors) {
    if (s.id.empty()) throw InputError("sensor id must not be empty");
    if (!ids.insert(s.id).second) throw InputError("duplicate sensor id '" + s.id + "'");
    if (!(s.position.z() > 0)) throw InputError("sensor '" + s.id + "' has z <= 0");
    if (s.axes.empty()) throw InputError("sensor '" + s.id + "' measures no axis");
    if (!positions.insert({s.position.x(), s.position.y(), s.position.z()}).second)
      throw InputError("duplicate sensor position at '" + s.id + "'");
  }
  if (a.grid_shape) {
    auto [r, c] = *a.grid_shape;
    if (r < 1 || c < 1 || static_cast<std::size_t>(r * c) != a.sensors.size())
      throw InputError("grid shape does not match sensor count");
  }
}

const Channel* SensorRecording::find(std::string_view sensor_id, Axis axis) const {
  for (const auto& c : channels)
    if (c.sensor_id == sensor_id && c.axis == axis) return &c;
  return nullptr;
}

std::string SensorRecording::channel_name(std::size_t i) const {
  return channels.at(i).sensor_id + ":" + axis_label(channels[i].axis);
}

void validate(const SensorRecording& rec) {
  for (Eigen::Index k = 0; k < rec.time.size(); ++k) {
    if (!std::isfinite(rec.time[k])) throw InputError("non-finite time value");
    if (k > 0 && !(rec.time[k] > rec.time[k - 1])) throw InputError("non-monotonic time");
  }
  std::set<std::pair<std::string, int>> keys;
  for (const auto& c : rec.channels) {
    if (c.values.size() != rec.time.size())
      throw InputError("ragged channels: '" + c.sensor_id + "' has " +
                       std::to_string(c.values.size()) + " samples, expected " +
                       std::to_string(rec.time.size()));
    if (!keys.insert({c.sensor_id, static_cast<int>(c.axis)}).second)
      throw InputError("duplicate channel '" + c.sensor_id + "'");
  }
}

void sort_channels(SensorRecording& rec) {
  std::stable_sort(rec.channels.begin(), rec.channels.end(), [](const Channel& a, const Channel& b) {
    return std::tie(a.sensor_id, a.axis) < std::tie(b.sensor_id, b.axis);
  });
}

double sample_interval(const Eigen::VectorXd& time) {
  if (time.size() < 2) throw InputError("need at least two samples for a sample interval");
  std::vector<double> d(time.size() - 1);
  for (Eigen::Index k = 1; k < time.size(); ++k) d[k - 1] = time[k] - time[k - 1];
  std::nth_element(d.begin(), d.begin() + d.size() / 2, d.end());
  return d[d.size() / 2];
}

Eigen::Index nearest_sample(const Eigen::VectorXd& time, double t) {
  if (time.size() == 0) throw InputError("empty time base");
  const double* b = time.data();
  const double* e = b + time.size();
  const double* it = std::lower_bound(b, e, t);
  if (it == b) return 0;
  if (it == e) return time.size() - 1;
  Eigen::Index hi = it - b;
  return (time[hi] - t < t - time[hi - 1]) ? hi : hi - 1;
}

Eigen::VectorXd centered_mean(const Eigen::VectorXd& y, Eigen::Index n) {
  const Eigen::Index m = y.size();
  std::vector<long double> prefix(m + 1, 0.0L);
  for (Eigen::Index k = 0; k < m; ++k) prefix[k + 1] = prefix[k] + y[k];
  Eigen::VectorXd out(m);
  const Eigen::Index lead = n / 2;
  for (Eigen::Index k = 0; k < m; ++k) {
    Eigen::Index a = std::max<Eigen::Index>(0, k - lead);
    Eigen::Index b = std::min<Eigen::Index>(m, k - lead + n);
    out[k] = static_cast<double>((prefix[b] - prefix[a]) / static_cast<long double>(b - a));
  }
  return out;
}

SensorRecording moving_average(const SensorRecording& rec, double window) {
  if (rec.samples() < 2) throw InputError("recording too short for a moving average");
  double dt = sample_interval(rec.time);
  if (window < dt * (1.0 - 1e-9)) throw InputError("window too small");
  Eigen::Index n = std::max<Eigen::Index>(1, std::llround(window / dt));
  SensorRecording out = rec;
  for (auto& c : out.channels) c.values = centered_mean(c.values, n);
  out.metadata["moving_average_s"] = std::to_string(window);
  return out;
}

SensorRecording subtract_baseline(const SensorRecording& rec, double t_ref) {
  if (rec.samples() == 0 || t_ref < rec.time[0] || t_ref > rec.time[rec.samples() - 1])
    throw InputError("reference time outside recorded span");
  Eigen::Index k = nearest_sample(rec.time, t_ref);
  SensorRecording out = rec;
  for (auto& c : out.channels) c.values.array() -= c.values[k];
  return out;
}

namespace {

Sensor make_sensor(std::string id, double x, double y, double z) {
  Sensor s;
  s.id = std::move(id);
  s.position = Eigen::Vector3d(x, y, z);
  return s;
}

std::string numbered_id(const char* prefix, std::size_t i, int width) {
  std::string n = std::to_string(i + 1);
  if (static_cast<int>(n.size()) < width) n.insert(0, width - n.size(), '0');
  return prefix + n;
}

SensorArray grid_array(const std::vector<double>& xs_mm, const std::vector<double>& ys_mm,
                       double z) {
  SensorArray a;
  for (double y : ys_mm)
    for (double x : xs_mm)
      a.sensors.push_back(make_sensor(numbered_id("s", a.sensors.size(), 2), x * kMillimeter,
                                      y * kMillimeter, z));
  a.grid_shape = std::make_pair(static_cast<int>(ys_mm.size()), static_cast<int>(xs_mm.size()));
  return a;
}

void sort_row_major(std::vector<Sensor>& sensors) {
  std::stable_sort(sensors.begin(), sensors.end(), [](const Sensor& a, const Sensor& b) {
    return std::make_tuple(a.position.y(), a.position.x(), a.position.z(), a.id) <
           std::make_tuple(b.position.y(), b.position.x(), b.position.z(), b.id);
  });
}

std::optional<std::pair<int, int>> detect_grid(const std::vector<Sensor>& sensors) {
  std::set<double> xs, ys;
  std::set<std::pair<double, double>> cells;
  for (const auto& s : sensors) {
    xs.insert(s.position.x());
    ys.insert(s.position.y());
    cells.insert({s.position.x(), s.position.y()});
  }
  if (cells.size() != sensors.size() || xs.size() * ys.size() != sensors.size()) return std::nullopt;
  return std::make_pair(static_cast<int>(ys.size()), static_cast<int>(xs.size()));
}

}  // namespace

SensorArray builtin_layout(std::string_view name, double standoff) {
  SensorArray a;
  if (name == "4x1") {
    a = grid_array({-22.5, -7.5, 7.5, 22.5}, {60.0}, standoff);
  } else if (name == "2x3") {
    a = grid_array({-13.5, 13.5}, {30.0, 60.0, 90.0}, standoff);
  } else if (name == "4x4") {
    a = grid_array({-45.0, -15.0, 15.0, 45.0}, {30.0, 60.0, 90.0, 120.0}, standoff);
  } else if (name == "squid") {
    Sensor s = make_sensor("squid", 0.0, 69.25 * kMillimeter, standoff);
    s.axes = {Axis::z};
    a.sensors.push_back(s);
    a.grid_shape = std::make_pair(1, 1);
  } else {
    throw InputError("unknown builtin layout '" + std::string(name) + "'");
  }
  validate(a);
  return a;
}

LayoutConfig parse_layout_config(const KeyValueConfig& cfg) {
  cfg.require_known({"builtin", "standoff_mm", "sensor"});
  LayoutConfig spec;
  if (cfg.has("builtin")) spec.builtin = cfg.text("builtin");
  double default_mm = (spec.builtin && *spec.builtin == "squid") ? 50.0 : 8.4;
  spec.standoff = cfg.number("standoff_mm", default_mm) * kMillimeter;
  for (const auto& line : cfg.all("sensor")) {
    auto f = split(line, ',');
    if (f.size() != 5) throw InputError("sensor entry needs id,x_mm,y_mm,z_mm,axes: '" + line + "'");
    Sensor s = make_sensor(f[0], parse_double(f[1], "sensor x_mm") * kMillimeter,
                           parse_double(f[2], "sensor y_mm") * kMillimeter,
                           parse_double(f[3], "sensor z_mm") * kMillimeter);
    s.axes = parse_axes(f[4]);
    spec.sensors.push_back(std::move(s));
  }
  return spec;
}

LayoutConfig load_layout_config(const std::filesystem::path& path) {
  return parse_layout_config(KeyValueConfig::load(path));
}

SensorArray array_layout(const LayoutConfig& spec) {
  SensorArray a;
  if (spec.builtin) {
    a = builtin_layout(*spec.builtin, spec.standoff);
    if (!spec.sensors.empty()) {
      if (spec.sensors.size() != a.sensors.size())
        throw InputError("builtin '" + *spec.builtin + "' expects " +
                         std::to_string(a.sensors.size()) + " sensors, got " +
                         std::to_string(spec.sensors.size()));
      a.sensors = spec.sensors;
      sort_row_major(a.sensors);
    }
  } else {
    if (spec.sensors.empty()) throw InputError("layout names no builtin and no sensors");
    a.sensors = spec.sensors;
    sort_row_major(a.sensors);
    a.grid_shape = detect_grid(a.sensors);
  }
  validate(a);
  return a;
}

SensorArray footprint_scan_array(const CellGeometry& g, double pitch, double standoff,
                                 double margin) {
  if (!(pitch > 0)) throw InputError("scan pitch must be positive");
  auto axis_points = [&](double lo, double hi) {
    int n = static_cast<int>(std::floor((hi - lo) / pitch + 1e-9)) + 1;
    double start = 0.5 * (lo + hi) - 0.5 * (n - 1) * pitch;
    std::vector<double> v(n);
    for (int i = 0; i < n; ++i) v[i] = start + i * pitch;
    return v;
  };
  auto xs = axis_points(-g.width_x / 2 - margin, g.width_x / 2 + margin);
  auto ys = axis_points(-margin, g.length_y + margin);
  SensorArray a;
  for (double y : ys)
    for (double x : xs) a.sensors.push_back(make_sensor(numbered_id("g", a.sensors.size(), 4), x, y, standoff));
  a.grid_shape = std::make_pair(static_cast<int>(ys.size()), static_cast<int>(xs.size()));
  validate(a);
  return a;
}

void parallel_for(std::size_t count, int workers, const std::function<void(std::size_t)>& fn) {
  std::size_t w = static_cast<std::size_t>(std::max(1, workers));
  w = std::min(w, std::max<std::size_t>(1, count));
  if (w <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(w);
  for (std::size_t t = 0; t < w; ++t) {
    std::size_t lo = count * t / w, hi = count * (t + 1) / w;
    threads.emplace_back([&, lo, hi, t] {
      try {
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  static std::atomic<unsigned long> counter{0};
  fs::path tmp = path;
  tmp += ".tmp" + std::to_string(counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write '" + tmp.string() + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw InputError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw InputError("cannot move '" + tmp.string() + "' into place: " + ec.message());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace magrelax
