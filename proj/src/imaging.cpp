#include "magrelax/imaging.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>

namespace magrelax {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string num(double v) {
  char buf[40];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::pair<int, int> image_shape(const SensorArray& array) {
  if (array.grid_shape) return *array.grid_shape;
  return {1, static_cast<int>(array.sensors.size())};
}

void check_time(const SensorRecording& rec, double t, const char* what) {
  if (rec.samples() == 0) throw InputError("empty recording");
  if (!(t >= rec.time[0] && t <= rec.time[rec.samples() - 1]))
    throw InputError(std::string(what) + " " + num(t) + " s outside recorded span");
}

std::vector<Eigen::Vector2d> outline_pixels(const SensorArray& array, int rows, int cols, const CellGeometry& g) {
  // Affine map from (x, y) to (col, row) through the first and last sensor of the grid.
  const auto& first = array.sensors.front().position;
  const auto& last = array.sensors.back().position;
  const double sx = cols > 1 ? (last.x() - first.x()) / (cols - 1) : 1.0;
  const double sy = rows > 1 ? (last.y() - first.y()) / (rows - 1) : 1.0;
  auto px = [&](double x, double y) {
    return Eigen::Vector2d(sx != 0 ? (x - first.x()) / sx : 0.0, sy != 0 ? (y - first.y()) / sy : 0.0);
  };
  const double w = g.width_x / 2;
  return {px(-w, 0), px(w, 0), px(w, g.length_y), px(-w, g.length_y)};
}

}  // namespace

MagneticImage render_frame(const SensorRecording& rec, const SensorArray& array, double t, Axis component,
                           std::optional<double> t_ref, const std::optional<CellGeometry>& geometry) {
  check_time(rec, t, "frame time");
  if (t_ref) check_time(rec, *t_ref, "reference time");
  if (array.sensors.empty()) throw InputError("empty sensor array");
  const auto [rows, cols] = image_shape(array);
  const Eigen::Index k = nearest_sample(rec.time, t);
  const Eigen::Index k_ref = t_ref ? nearest_sample(rec.time, *t_ref) : -1;

  MagneticImage img;
  img.values = Eigen::MatrixXd::Constant(rows, cols, kNaN);
  img.component = component;
  img.time = t;
  img.reference = t_ref;
  img.pixel_sensor.assign(static_cast<std::size_t>(rows) * cols, "");
  bool any = false;
  for (std::size_t s = 0; s < array.sensors.size(); ++s) {
    const Channel* ch = rec.find(array.sensors[s].id, component);
    if (!ch) continue;
    double v = ch->values[k];
    if (k_ref >= 0) v -= ch->values[k_ref];
    img.values(s / cols, s % cols) = v;
    img.pixel_sensor[s] = array.sensors[s].id;
    any = true;
  }
  if (!any) throw InputError(std::string("no sensor measures component ") + axis_label(component));
  for (Eigen::Index r = 0; r < img.rows(); ++r)
    for (Eigen::Index c = 0; c < img.cols(); ++c)
      if (!img.missing(r, c)) img.scale = std::max(img.scale, std::abs(img.values(r, c)));
  if (geometry) img.outline = outline_pixels(array, rows, cols, *geometry);
  return img;
}

std::vector<MagneticImage> render_series(const SensorRecording& rec, const SensorArray& array,
                                         const std::vector<double>& times, Axis component,
                                         std::optional<double> t_ref, const std::optional<CellGeometry>& geometry) {
  std::vector<MagneticImage> frames;
  double scale = 0;
  for (double t : times) {
    frames.push_back(render_frame(rec, array, t, component, t_ref, geometry));
    scale = std::max(scale, frames.back().scale);
  }
  for (auto& f : frames) f.scale = scale;
  return frames;
}

std::vector<StepEvent> detect_steps(const SensorRecording& rec, double min_amplitude, double min_persist) {
  if (!(min_amplitude > 0) || !(min_persist > 0)) throw InputError("step thresholds must be positive");
  const Eigen::Index N = rec.samples();
  if (N < 2 || !(rec.time[N - 1] - rec.time[0] > 2 * min_persist))
    throw InputError("recording shorter than twice the persistence window");
  const double dt = sample_interval(rec.time);
  const Eigen::Index n = std::max<Eigen::Index>(1, std::llround(min_persist / dt));
  if (2 * n > N) throw InputError("recording shorter than twice the persistence window");

  std::vector<StepResponse> found;
  for (std::size_t c = 0; c < rec.channels.size(); ++c) {
    const Eigen::VectorXd& y = rec.channels[c].values;
    std::vector<long double> prefix(N + 1, 0.0L);
    for (Eigen::Index i = 0; i < N; ++i) prefix[i + 1] = prefix[i] + y[i];
    auto mean = [&](Eigen::Index a, Eigen::Index b) {  // [a, b)
      return static_cast<double>((prefix[b] - prefix[a]) / static_cast<long double>(b - a));
    };
    // Difference between the window after boundary k and the window before it.
    Eigen::VectorXd d = Eigen::VectorXd::Zero(N + 1);
    Eigen::VectorXd smooth;
    for (Eigen::Index k = n; k + n <= N; ++k) d[k] = mean(k, k + n) - mean(k - n, k);
    for (Eigen::Index k = n; k + n <= N; ++k) {
      const double a = std::abs(d[k]);
      if (a < min_amplitude) continue;
      bool peak = true;
      for (Eigen::Index j = std::max(n, k - n); j <= std::min(N - n, k + n) && peak; ++j)
        if (std::abs(d[j]) > a || (std::abs(d[j]) == a && j < k)) peak = false;
      if (!peak) continue;

      StepResponse r;
      r.channel = rec.channel_name(c);
      r.onset = rec.time[k];
      r.amplitude = d[k];
      const double level = mean(k - n, k);
      if (smooth.size() == 0) smooth = centered_mean(y, n);
      r.decay_span = rec.time[N - 1] - r.onset;
      for (Eigen::Index i = k; i < N; ++i) {
        if ((smooth[i] - level) / r.amplitude <= std::exp(-1.0)) {
          r.decay_span = rec.time[i] - r.onset;
          break;
        }
      }
      r.decay_span = std::max(r.decay_span, dt);
      found.push_back(r);
    }
  }

  std::stable_sort(found.begin(), found.end(), [](const auto& a, const auto& b) { return a.onset < b.onset; });
  std::vector<StepEvent> events;
  for (std::size_t i = 0; i < found.size();) {
    StepEvent e;
    e.group_id = static_cast<int>(events.size()) + 1;
    const double start = found[i].onset;
    while (i < found.size() && found[i].onset - start <= min_persist) e.responses.push_back(found[i++]);
    const auto& lead = *std::max_element(e.responses.begin(), e.responses.end(), [](const auto& a, const auto& b) {
      return std::abs(a.amplitude) < std::abs(b.amplitude);
    });
    e.onset = lead.onset;
    e.amplitude = lead.amplitude;
    e.decay_span = lead.decay_span;
    events.push_back(std::move(e));
  }
  return events;
}

std::string frame_stem(const MagneticImage& image) {
  return std::string("frame_") + axis_label(image.component) + "_" + std::to_string(std::llround(image.time * 1000));
}

std::string format_image_csv(const MagneticImage& image) {
  std::string out = "# time_s=" + num(image.time) + "\n# component=" + axis_label(image.component) +
                    "\n# t_ref_s=" + (image.reference ? num(*image.reference) : "") +
                    "\n# scale_pT=" + num(image.scale / kPicotesla) + "\n";
  if (!image.outline.empty()) {
    out += "# outline_px=";
    for (std::size_t i = 0; i < image.outline.size(); ++i)
      out += (i ? ";" : "") + num(image.outline[i].x()) + " " + num(image.outline[i].y());
    out += "\n";
  }
  for (Eigen::Index r = 0; r < image.rows(); ++r) {
    for (Eigen::Index c = 0; c < image.cols(); ++c) {
      if (c) out += ",";
      if (!image.missing(r, c)) out += num(image.values(r, c) / kPicotesla);
    }
    out += "\n";
  }
  return out;
}

MagneticImage parse_image_csv(std::string_view text, std::string_view source) {
  const std::string where(source);
  MagneticImage img;
  std::vector<std::vector<double>> rows;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view raw = text.substr(start, end - start);
    start = end + 1;
    std::string line = trim(raw);
    if (line.empty() && raw.empty()) continue;
    if (!line.empty() && line[0] == '#') {
      std::string body = trim(std::string_view(line).substr(1));
      auto eq = body.find('=');
      if (eq == std::string::npos) continue;
      std::string key = trim(std::string_view(body).substr(0, eq)), value = trim(std::string_view(body).substr(eq + 1));
      if (key == "time_s") img.time = parse_double(value, where + " time_s");
      else if (key == "component") img.component = parse_axis(value);
      else if (key == "t_ref_s" && !value.empty()) img.reference = parse_double(value, where + " t_ref_s");
      else if (key == "scale_pT") img.scale = parse_double(value, where + " scale_pT") * kPicotesla;
      continue;
    }
    std::vector<double> row;
    for (const auto& f : split(raw, ','))
      row.push_back(trim(f).empty() ? kNaN : parse_double(f, where) * kPicotesla);
    if (!rows.empty() && row.size() != rows.front().size()) throw InputError(where + ": ragged image rows");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw InputError(where + ": image has no rows");
  img.values.resize(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) img.values(r, c) = rows[r][c];
  return img;
}

std::string format_pgm(const MagneticImage& image) {
  std::string out = "P5\n" + std::to_string(image.cols()) + " " + std::to_string(image.rows()) + "\n65535\n";
  for (Eigen::Index r = 0; r < image.rows(); ++r) {
    for (Eigen::Index c = 0; c < image.cols(); ++c) {
      unsigned gray = 0;
      if (!image.missing(r, c)) {
        const double u = image.scale > 0 ? std::clamp(image.values(r, c) / image.scale, -1.0, 1.0) : 0.0;
        gray = 1 + static_cast<unsigned>(std::lround((u + 1.0) / 2.0 * 65534.0));
      }
      out += static_cast<char>(gray >> 8);
      out += static_cast<char>(gray & 0xff);
    }
  }
  return out;
}

std::string format_mask_pgm(const MagneticImage& image) {
  std::string out = "P5\n" + std::to_string(image.cols()) + " " + std::to_string(image.rows()) + "\n255\n";
  for (Eigen::Index r = 0; r < image.rows(); ++r)
    for (Eigen::Index c = 0; c < image.cols(); ++c) out += static_cast<char>(image.missing(r, c) ? 0 : 255);
  return out;
}

std::string write_frame(const MagneticImage& image, const std::filesystem::path& dir) {
  const std::string stem = frame_stem(image);
  write_file_atomic(dir / (stem + ".csv"), format_image_csv(image));
  write_file_atomic(dir / (stem + ".pgm"), format_pgm(image));
  write_file_atomic(dir / (stem + "_mask.pgm"), format_mask_pgm(image));
  return stem;
}

std::string format_step_events(const std::vector<StepEvent>& events) {
  std::string out = "onset_s,channel,amplitude_pT,decay_span_s,group_id\n";
  for (const auto& e : events)
    for (const auto& r : e.responses)
      out += num(r.onset) + "," + r.channel + "," + num(r.amplitude / kPicotesla) + "," + num(r.decay_span) + "," +
             std::to_string(e.group_id) + "\n";
  return out;
}

std::vector<StepEvent> parse_step_events(std::string_view text, std::string_view source) {
  const std::string where(source);
  std::vector<StepEvent> events;
  bool header = false;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string line = trim(text.substr(start, end - start));
    start = end + 1;
    if (line.empty() || line[0] == '#') continue;
    auto f = split(line, ',');
    if (!header) {
      if (line != "onset_s,channel,amplitude_pT,decay_span_s,group_id") throw InputError(where + ": not an event CSV");
      header = true;
      continue;
    }
    if (f.size() != 5) throw InputError(where + ": expected 5 fields");
    StepResponse r{f[1], parse_double(f[0], where), parse_double(f[2], where) * kPicotesla, parse_double(f[3], where)};
    const int id = static_cast<int>(parse_double(f[4], where));
    if (events.empty() || events.back().group_id != id) events.push_back(StepEvent{id, 0, 0, 0, {}});
    events.back().responses.push_back(r);
  }
  if (!header) throw InputError(where + ": missing header");
  for (auto& e : events) {
    const auto& lead = *std::max_element(e.responses.begin(), e.responses.end(), [](const auto& a, const auto& b) {
      return std::abs(a.amplitude) < std::abs(b.amplitude);
    });
    e.onset = lead.onset;
    e.amplitude = lead.amplitude;
    e.decay_span = lead.decay_span;
  }
  return events;
}

}  // namespace magrelax
