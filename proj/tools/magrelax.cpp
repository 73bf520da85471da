// Command-line front end: simulate, fit, image, drt, study, layout, synth-spectrum, steps.
#include "magrelax/cellsim.hpp"
#include "magrelax/config.hpp"
#include "magrelax/core.hpp"
#include "magrelax/drt.hpp"
#include "magrelax/fieldmap.hpp"
#include "magrelax/imaging.hpp"
#include "magrelax/recording_io.hpp"
#include "magrelax/relaxfit.hpp"
#include "magrelax/study.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

using namespace magrelax;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kInput = 2, kNumerical = 3, kStudyFailed = 4 };

struct Globals {
  std::optional<std::uint64_t> seed;
  int workers = 1;
  std::string out_dir = ".";
  bool quiet = false;
};

std::string num(double v) {
  char buf[40];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

void say(const Globals& g, const std::string& line) {
  if (!g.quiet) std::cout << line << "\n";
}

KeyValueConfig load_config(const std::string& path) {
  if (!fs::exists(path)) throw InputError("config file not found: " + path);
  return KeyValueConfig::load(path);
}

SensorRecording load_nonempty(const std::string& path) {
  if (!fs::exists(path)) throw InputError("recording not found: " + path);
  SensorRecording rec = load_recording(path);
  if (rec.channels.empty() || rec.samples() == 0) throw InputError(path + ": recording has no samples");
  return rec;
}

// Array from --array (array CSV or layout config), else from the recording's layout metadata.
SensorArray resolve_array(const std::string& array_path, const SensorRecording& rec) {
  if (!array_path.empty()) {
    if (!fs::exists(array_path)) throw InputError("array file not found: " + array_path);
    const std::string text = read_file(array_path);
    if (text.find("id,x_mm,y_mm,z_mm,axes") != std::string::npos) return parse_array(text, array_path);
    return array_layout(parse_layout_config(KeyValueConfig::parse(text, array_path)));
  }
  auto it = rec.metadata.find("layout");
  if (it == rec.metadata.end() || it->second == "custom")
    throw InputError("recording names no builtin layout; pass --array");
  auto st = rec.metadata.find("standoff_mm");
  double standoff = st != rec.metadata.end() ? parse_double(st->second, "standoff_mm") * kMillimeter
                                             : (it->second == "squid" ? 50e-3 : 8.4e-3);
  return builtin_layout(it->second, standoff);
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
  std::string config, layout;
  std::optional<double> noise, current, pulse, duration, rate, soc;
  std::string integrator;
  double density_every = 1.0;
};

int cmd_simulate(const Globals& g, const SimulateArgs& a) {
  SimulationConfig c;
  if (!a.config.empty()) c = parse_simulation_config(load_config(a.config));
  if (!a.layout.empty()) {
    LayoutConfig spec = parse_layout_config(load_config(a.layout));
    c.array = array_layout(spec);
    c.layout_name = spec.builtin ? *spec.builtin : "custom";
  }
  if (a.noise) c.noise_rms = *a.noise;
  if (a.current) c.current = *a.current;
  if (a.pulse) c.pulse_duration = *a.pulse;
  if (a.duration) c.record_length = *a.duration;
  if (a.rate) c.sample_rate = *a.rate;
  if (a.soc) c.soc = *a.soc;
  if (!a.integrator.empty()) c.integrator = parse_integrator(a.integrator);
  if (g.seed) c.seed = *g.seed;
  if (!(c.noise_rms >= 0)) throw InputError("--noise must be nonnegative");

  Simulation sim = simulate(c, g.workers);
  double zmin = std::numeric_limits<double>::infinity();
  for (const auto& s : c.array.sensors) zmin = std::min(zmin, s.position.z());
  sim.recording.metadata["standoff_mm"] = num(zmin / kMillimeter);

  const fs::path out(g.out_dir);
  write_recording(sim.recording, out / "recording.csv");
  write_file_atomic(out / "array.csv", format_array(c.array));
  if (a.density_every > 0) {
    CurrentDensityHistory h;
    h.grid = sim.density.grid;
    const double dt = 1.0 / c.sample_rate;
    const long stride = std::max(1L, std::lround(a.density_every / dt));
    std::vector<double> times;
    for (long k = 0; k < sim.density.times.size(); k += stride) {
      times.push_back(sim.density.times[k]);
      h.density.push_back(sim.density.density[k]);
    }
    h.times = Eigen::Map<Eigen::VectorXd>(times.data(), times.size());
    write_current_density(h, out / "current_density.csv");
  }
  const Eigen::VectorXd rates =
      dominant_rates(sim.network, apply_pulse(sim.network, rest_state(sim.network), c.current, c.pulse_duration,
                                              std::min(1.0 / c.sample_rate, c.pulse_duration), c.integrator),
                     c.array);
  std::string taus;
  for (Eigen::Index k = 0; k < rates.size(); ++k) taus += (k ? ", " : "") + num(1.0 / rates[k]);
  say(g, "simulated " + std::to_string(sim.recording.channels.size()) + " channels x " +
             std::to_string(sim.recording.samples()) + " samples; dominant tau [s]: " + taus);
  say(g, "wrote " + (out / "recording.csv").string());
  return kOk;
}

// ---------------------------------------------------------------- fit

struct FitArgs {
  std::string recording, config, output = "fits.csv";
  int terms = 0;
  int max_terms = 0;
  std::string criterion;
  bool robust = false;
  bool no_baseline = false;
};

int cmd_fit(const Globals& g, const FitArgs& a) {
  FitConfig fc;
  if (!a.config.empty()) fc = parse_fit_config(load_config(a.config));
  if (a.max_terms) fc.max_terms = a.max_terms;
  if (!a.criterion.empty()) fc.criterion = parse_criterion(a.criterion);
  if (a.robust) fc.options.robust = true;
  if (a.no_baseline) fc.options.baseline = false;
  if (a.terms < 0 || a.terms > 5 || fc.max_terms < 1 || fc.max_terms > 5)
    throw InputError("term counts must lie in [1, 5]");
  SensorRecording rec = load_nonempty(a.recording);
  ParameterMap map = a.terms > 0 ? fit_array(rec, a.terms, fc.options, g.workers)
                                 : select_array(rec, fc.max_terms, fc.criterion, fc.options, g.workers);
  map.metadata["recording"] = fs::path(a.recording).filename().string();
  map.metadata["criterion"] = a.terms > 0 ? "fixed" : criterion_name(fc.criterion);
  write_parameter_map(map, fs::path(g.out_dir) / a.output);
  for (const auto& c : map.channels) {
    std::string line = c.sensor_id + ":" + axis_label(c.axis) + " " + c.status;
    if (c.fit) {
      line += " tau_s=";
      for (std::size_t k = 0; k < c.fit->terms.size(); ++k) line += (k ? "," : "") + num(c.fit->terms[k].tau);
      line += " r2=" + (c.fit->r_squared ? num(*c.fit->r_squared) : std::string("n/a"));
    }
    say(g, line);
  }
  return kOk;
}

// ---------------------------------------------------------------- image

struct ImageArgs {
  std::string recording, array, component = "z", times;
  std::optional<double> ref;
};

int cmd_image(const Globals& g, const ImageArgs& a) {
  const Axis component = parse_axis(a.component);
  if (a.times.empty()) throw InputError("--times is required");
  const std::vector<double> times = parse_double_list(a.times, "--times");
  SensorRecording rec = load_nonempty(a.recording);
  SensorArray array = resolve_array(a.array, rec);
  std::optional<CellGeometry> geometry;
  if (rec.metadata.count("layout")) geometry = default_cell().geometry;
  const auto frames = render_series(rec, array, times, component, a.ref, geometry);
  const fs::path out(g.out_dir);
  std::string manifest = "# scale_pT=" + num(frames.empty() ? 0.0 : frames.front().scale / kPicotesla) +
                         "\n# component=" + axis_label(component) + "\n# t_ref_s=" + (a.ref ? num(*a.ref) : "") +
                         "\ntime_s,csv,pgm,mask\n";
  for (const auto& f : frames) {
    const std::string stem = write_frame(f, out);
    manifest += num(f.time) + "," + stem + ".csv," + stem + ".pgm," + stem + "_mask.pgm\n";
  }
  write_file_atomic(out / "manifest.csv", manifest);
  say(g, "wrote " + std::to_string(frames.size()) + " frames, scale " +
             num(frames.empty() ? 0.0 : frames.front().scale / kPicotesla) + " pT");
  return kOk;
}

// ---------------------------------------------------------------- drt

struct DrtArgs {
  std::string spectrum, fits;
  double lambda = 1e-3;
  int ppd = 20;
  double prominence = 0.05;
};

int cmd_drt(const Globals& g, const DrtArgs& a) {
  if (!fs::exists(a.spectrum)) throw InputError("spectrum not found: " + a.spectrum);
  const ImpedanceSpectrum spec = load_spectrum(a.spectrum);
  const DrtResult r = drt_invert(spec, a.ppd, a.lambda);
  const auto peaks = find_peaks(r, a.prominence);
  const fs::path out(g.out_dir);
  write_file_atomic(out / "drt.csv", format_drt(r));
  write_file_atomic(out / "peaks.csv", format_peaks(peaks));
  say(g, "R_inf " + num(r.r_inf) + " Ohm, polarization " + num(r.mass()) + " Ohm, residual " + num(r.residual) +
             " Ohm, " + std::to_string(peaks.size()) + " peaks");
  for (const auto& p : peaks) say(g, "  peak tau " + num(p.tau) + " s, weight " + num(p.weight) + " Ohm");
  if (!a.fits.empty()) {
    if (!fs::exists(a.fits)) throw InputError("fits not found: " + a.fits);
    const auto rows = compare_timescales(peaks, load_parameter_map(a.fits));
    write_file_atomic(out / "overlap.csv", format_timescales(rows));
    for (const auto& m : rows)
      say(g, "  " + m.label + " " + num(m.tau_mean) + " +- " + num(m.tau_sd) + " s: " + m.status +
                 (m.peak_tau ? " (" + num(m.distance_decades) + " decades)" : ""));
  }
  return kOk;
}

// ---------------------------------------------------------------- study

int cmd_study(const Globals& g, const std::string& plan_path) {
  StudyPlan plan = parse_study_plan(load_config(plan_path));
  if (g.seed) plan.seed = *g.seed;
  const StudyResult result = run_study(plan, g.out_dir, g.workers);
  say(g, "study: " + std::to_string(result.succeeded()) + " of " + std::to_string(result.runs.size()) +
             " runs succeeded; probe " + result.probe);
  for (const auto& r : result.runs)
    if (!r.ok()) say(g, "  " + r.directory + ": " + r.status);
  return result.succeeded() > 0 ? kOk : kStudyFailed;
}

// ---------------------------------------------------------------- layout

int cmd_layout(const Globals& g, const std::string& builtin, const std::string& config, std::optional<double> standoff_mm) {
  SensorArray array;
  if (!config.empty()) {
    array = array_layout(parse_layout_config(load_config(config)));
  } else {
    const std::string name = builtin.empty() ? "4x4" : builtin;
    const double standoff = standoff_mm ? *standoff_mm * kMillimeter : (name == "squid" ? 50e-3 : 8.4e-3);
    array = builtin_layout(name, standoff);
  }
  const std::string text = format_array(array);
  write_file_atomic(fs::path(g.out_dir) / "array.csv", text);
  if (!g.quiet) std::cout << text;
  return kOk;
}

// ---------------------------------------------------------------- synth-spectrum

int cmd_synth(const Globals& g, double r_inf, const std::vector<std::string>& elements, const std::string& freqs,
              const std::string& output) {
  std::vector<RcElement> els;
  for (const auto& e : elements) {
    auto v = parse_double_list(e, "--element");
    if (v.size() != 2) throw InputError("--element takes R,tau");
    els.push_back({v[0], v[1]});
  }
  if (els.empty()) els = {{0.004, 0.044}, {0.006, 47.0}, {0.010, 1000.0}};
  Eigen::VectorXd f = default_frequencies();
  if (!freqs.empty()) {
    auto v = parse_double_list(freqs, "--freqs");
    f = Eigen::Map<Eigen::VectorXd>(v.data(), v.size());
  }
  ImpedanceSpectrum s = synth_spectrum(r_inf, els, f);
  s.metadata["source"] = "synthetic";
  write_spectrum(s, fs::path(g.out_dir) / output);
  say(g, "wrote " + std::to_string(f.size()) + " frequencies to " + (fs::path(g.out_dir) / output).string());
  return kOk;
}

// ---------------------------------------------------------------- steps

int cmd_steps(const Globals& g, const std::string& recording, double min_amplitude_pT, double min_persist) {
  SensorRecording rec = load_nonempty(recording);
  const auto events = detect_steps(rec, min_amplitude_pT * kPicotesla, min_persist);
  write_file_atomic(fs::path(g.out_dir) / "events.csv", format_step_events(events));
  say(g, std::to_string(events.size()) + " step events");
  for (const auto& e : events)
    say(g, "  onset " + num(e.onset) + " s, " + std::to_string(e.responses.size()) + " channels, amplitude " +
               num(e.amplitude / kPicotesla) + " pT");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Magnetic relaxation imaging toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Random seed");
  app.add_option("--workers", g.workers, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out-dir", g.out_dir, "Output directory");
  app.add_flag("--quiet", g.quiet, "Suppress standard output");

  SimulateArgs sim;
  auto* s_sim = app.add_subcommand("simulate", "Pulse, relax and sample the field at a sensor array");
  s_sim->add_option("--config", sim.config, "Simulation/network/layout key-value file");
  s_sim->add_option("--layout", sim.layout, "Layout key-value file");
  s_sim->add_option("--noise", sim.noise, "White noise RMS, tesla");
  s_sim->add_option("--current", sim.current, "Pulse current, A");
  s_sim->add_option("--pulse", sim.pulse, "Pulse duration, s");
  s_sim->add_option("--duration", sim.duration, "Relaxation record length, s");
  s_sim->add_option("--rate", sim.rate, "Sample rate, Hz");
  s_sim->add_option("--soc", sim.soc, "State of charge");
  s_sim->add_option("--integrator", sim.integrator, "exact or implicit_euler");
  s_sim->add_option("--density-every", sim.density_every, "Current-density export interval, s (0 disables)");

  FitArgs fit;
  auto* s_fit = app.add_subcommand("fit", "Fit multi-exponential relaxation to every channel");
  s_fit->add_option("recording", fit.recording)->required();
  s_fit->add_option("--config", fit.config, "Fit key-value file");
  s_fit->add_option("--terms", fit.terms, "Fixed number of terms (skips model selection)");
  s_fit->add_option("--max-terms", fit.max_terms, "Largest model considered by selection");
  s_fit->add_option("--criterion", fit.criterion, "aicc or f_test");
  s_fit->add_flag("--robust", fit.robust, "Tukey-weighted refit");
  s_fit->add_flag("--no-baseline", fit.no_baseline, "Fit without a constant offset");
  s_fit->add_option("--output", fit.output, "Parameter map file name");

  ImageArgs img;
  auto* s_img = app.add_subcommand("image", "Render magnetic image frames");
  s_img->add_option("recording", img.recording)->required();
  s_img->add_option("--times", img.times, "Comma-separated frame times, s");
  s_img->add_option("--component", img.component, "x, y or z");
  s_img->add_option("--ref", img.ref, "Reference time, s");
  s_img->add_option("--array", img.array, "Array CSV or layout file");

  DrtArgs drt;
  auto* s_drt = app.add_subcommand("drt", "Distribution of relaxation times from an impedance spectrum");
  s_drt->add_option("spectrum", drt.spectrum)->required();
  s_drt->add_option("--lambda", drt.lambda, "Regularization weight relative to mean |Z|^2");
  s_drt->add_option("--ppd", drt.ppd, "Grid points per decade");
  s_drt->add_option("--prominence", drt.prominence, "Peak prominence as a fraction of max gamma");
  s_drt->add_option("--fits", drt.fits, "Parameter map for the timescale comparison");

  std::string plan;
  auto* s_study = app.add_subcommand("study", "Run a pulse sweep study");
  s_study->add_option("plan", plan)->required();

  std::string builtin, layout_cfg;
  std::optional<double> standoff_mm;
  auto* s_layout = app.add_subcommand("layout", "Write a sensor array description");
  s_layout->add_option("--builtin", builtin, "4x1, 2x3, 4x4 or squid");
  s_layout->add_option("--config", layout_cfg, "Layout key-value file");
  s_layout->add_option("--standoff-mm", standoff_mm, "Stand-off, mm");

  double r_inf = 0.010;
  std::vector<std::string> elements;
  std::string freqs, spectrum_out = "spectrum.csv";
  auto* s_synth = app.add_subcommand("synth-spectrum", "Synthesize an RC-network impedance spectrum");
  s_synth->add_option("--r-inf", r_inf, "Series resistance, ohm");
  s_synth->add_option("--element", elements, "R,tau pair (repeatable)")->allow_extra_args(false);
  s_synth->add_option("--freqs", freqs, "Comma-separated frequencies, Hz");
  s_synth->add_option("--output", spectrum_out, "Output file name");

  std::string steps_rec;
  double min_amp = 5.0, min_persist = 60.0;
  auto* s_steps = app.add_subcommand("steps", "Detect step events in a long recording");
  s_steps->add_option("recording", steps_rec)->required();
  s_steps->add_option("--min-amplitude", min_amp, "Threshold, pT");
  s_steps->add_option("--min-persist", min_persist, "Window, s");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInput;
  }
  if (seed_opt->count()) g.seed = seed;

  try {
    fs::create_directories(g.out_dir);
    if (s_sim->parsed()) return cmd_simulate(g, sim);
    if (s_fit->parsed()) return cmd_fit(g, fit);
    if (s_img->parsed()) return cmd_image(g, img);
    if (s_drt->parsed()) return cmd_drt(g, drt);
    if (s_study->parsed()) return cmd_study(g, plan);
    if (s_layout->parsed()) return cmd_layout(g, builtin, layout_cfg, standoff_mm);
    if (s_synth->parsed()) return cmd_synth(g, r_inf, elements, freqs, spectrum_out);
    if (s_steps->parsed()) return cmd_steps(g, steps_rec, min_amp, min_persist);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInput;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInput;
  } catch (const std::exception& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  }
  return kInput;
}
