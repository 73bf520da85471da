#include "magrelax/study.hpp"

#include "magrelax/recording_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <random>

namespace magrelax {

namespace {

const std::set<std::string> kLayoutKeys{"builtin", "standoff_mm", "sensor"};

std::string num(double v) {
  char buf[40];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

KeyValueConfig subset(const KeyValueConfig& cfg, const std::set<std::string>& keys) {
  std::string text;
  for (const auto& [k, v] : cfg.entries())
    if (keys.count(k)) text += k + " = " + v + "\n";
  return KeyValueConfig::parse(text, cfg.source());
}

std::map<std::string, std::string> run_metadata(const SimulationConfig& c) {
  return {{"source", "simulation"},
          {"layout", c.layout_name},
          {"current_A", num(c.current)},
          {"c_rate", num(c.current / c.cell.geometry.nominal_capacity)},
          {"pulse_s", num(c.pulse_duration)},
          {"soc", num(c.soc)},
          {"discharged_Ah", num((1.0 - c.soc) * c.cell.geometry.nominal_capacity)},
          {"noise_pT", num(c.noise_rms / kPicotesla)},
          {"seed", std::to_string(c.seed)}};
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? std::nan("") : s / v.size();
}

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return v.empty() ? std::nan("") : 0.0;
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / (v.size() - 1));
}

std::pair<std::string, Axis> split_channel(const std::string& name) {
  auto pos = name.rfind(':');
  if (pos == std::string::npos) throw InputError("probe must be <sensor>:<axis>, got '" + name + "'");
  return {name.substr(0, pos), parse_axis(name.substr(pos + 1))};
}

}  // namespace

const std::set<std::string>& simulation_config_keys() {
  static const std::set<std::string> keys{"soc", "current_A", "pulse_s", "duration_s", "sample_rate_Hz",
                                          "integrator", "noise_pT", "seed"};
  return keys;
}

SimulationConfig parse_simulation_config(const KeyValueConfig& cfg) {
  std::set<std::string> known = simulation_config_keys();
  known.insert(network_config_keys().begin(), network_config_keys().end());
  known.insert(kLayoutKeys.begin(), kLayoutKeys.end());
  cfg.require_known(known);
  SimulationConfig c;
  c.cell = parse_network_config(cfg);
  c.soc = cfg.number("soc", c.soc);
  c.current = cfg.number("current_A", c.current);
  c.pulse_duration = cfg.number("pulse_s", c.pulse_duration);
  c.record_length = cfg.number("duration_s", c.record_length);
  c.sample_rate = cfg.number("sample_rate_Hz", c.sample_rate);
  if (cfg.has("integrator")) c.integrator = parse_integrator(cfg.text("integrator"));
  c.noise_rms = cfg.number("noise_pT", 0.0) * kPicotesla;
  c.seed = static_cast<std::uint64_t>(cfg.integer("seed", 0));
  KeyValueConfig layout = subset(cfg, kLayoutKeys);
  if (!layout.entries().empty()) {
    LayoutConfig spec = parse_layout_config(layout);
    c.array = array_layout(spec);
    c.layout_name = spec.builtin ? *spec.builtin : "custom";
  }
  if (!(c.sample_rate > 0) || !(c.record_length > 0) || !(c.pulse_duration > 0))
    throw InputError(cfg.source() + ": pulse_s, duration_s and sample_rate_Hz must be positive");
  if (!(c.noise_rms >= 0)) throw InputError(cfg.source() + ": noise_pT must be nonnegative");
  return c;
}

Simulation simulate(const SimulationConfig& c, int workers) {
  Simulation sim;
  sim.network = build_network(c.cell.geometry, c.cell.params, c.soc);
  const double dt = 1.0 / c.sample_rate;
  const double pulse_dt = std::min(dt, c.pulse_duration);
  NetworkState state = apply_pulse(sim.network, rest_state(sim.network), c.current, c.pulse_duration, pulse_dt,
                                   c.integrator);
  sim.density = relax(sim.network, state, c.record_length, dt, c.integrator);
  BiotSavartOptions opt;
  opt.workers = workers;
  sim.recording = to_recording(biot_savart(sim.density, c.array, opt), run_metadata(c));
  if (c.noise_rms > 0) add_noise(sim.recording, c.noise_rms, c.seed);
  return sim;
}

void add_noise(SensorRecording& rec, double rms, std::uint64_t seed) {
  if (!(rms >= 0)) throw InputError("noise RMS must be nonnegative");
  if (rms == 0) return;
  for (std::size_t c = 0; c < rec.channels.size(); ++c) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(c)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal(0.0, rms);
    for (Eigen::Index k = 0; k < rec.channels[c].values.size(); ++k) rec.channels[c].values[k] += normal(rng);
  }
}

Eigen::VectorXd dominant_rates(const CellNetwork& net, const NetworkState& state, const SensorArray& array,
                               int count) {
  const ModalExpansion m = modal_expansion(net, state);
  const double top = m.rates.cwiseAbs().maxCoeff();
  CurrentDensityHistory h;
  h.grid = net.voxel_grid();
  std::vector<Eigen::Index> modes;
  for (Eigen::Index k = 0; k < m.rates.size(); ++k) {
    if (m.rates[k] <= 1e-9 * top) continue;
    modes.push_back(k);
    h.density.push_back(current_density(net, m.shapes.col(k) * m.coefficients[k], 0.0));
  }
  h.times = Eigen::VectorXd::LinSpaced(modes.size(), 0, static_cast<double>(modes.size()) - 1);
  const FieldSamples f = biot_savart(h, array);
  std::vector<std::pair<double, double>> weight;  // (summed |B|, rate)
  for (std::size_t i = 0; i < modes.size(); ++i)
    weight.emplace_back(f.field[i].colwise().norm().sum(), m.rates[modes[i]]);
  std::stable_sort(weight.begin(), weight.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<double> chosen;
  for (const auto& [w, rate] : weight) {
    if (static_cast<int>(chosen.size()) == count) break;
    bool close = false;
    for (double r : chosen)
      if (std::abs(rate - r) <= 0.1 * std::max(rate, r)) close = true;
    if (!close) chosen.push_back(rate);
  }
  std::sort(chosen.begin(), chosen.end(), std::greater<>());
  return Eigen::Map<Eigen::VectorXd>(chosen.data(), chosen.size());
}

StudyPlan parse_study_plan(const KeyValueConfig& cfg) {
  std::set<std::string> known{"currents_A", "durations_s", "socs", "repeats", "seed", "noise_pT",
                              "max_terms", "criterion", "probe", "fit_channels", "starts"};
  known.insert(network_config_keys().begin(), network_config_keys().end());
  known.insert(kLayoutKeys.begin(), kLayoutKeys.end());
  for (const auto& k : {"duration_s", "sample_rate_Hz", "integrator"}) known.insert(k);
  cfg.require_known(known);

  StudyPlan p;
  std::set<std::string> base_keys = simulation_config_keys();
  base_keys.insert(network_config_keys().begin(), network_config_keys().end());
  base_keys.insert(kLayoutKeys.begin(), kLayoutKeys.end());
  p.base = parse_simulation_config(subset(cfg, base_keys));
  auto list = [&](const char* key, std::vector<double> fallback) {
    return cfg.has(key) ? parse_double_list(cfg.text(key), key) : fallback;
  };
  p.currents = list("currents_A", {p.base.current});
  p.durations = list("durations_s", {p.base.pulse_duration});
  p.socs = list("socs", {p.base.soc});
  p.repeats = static_cast<int>(cfg.integer("repeats", 1));
  p.seed = static_cast<std::uint64_t>(cfg.integer("seed", 0));
  p.noise_rms = cfg.number("noise_pT", 0.0) * kPicotesla;
  p.max_terms = static_cast<int>(cfg.integer("max_terms", p.max_terms));
  if (cfg.has("criterion")) p.criterion = parse_criterion(cfg.text("criterion"));
  p.fit.starts = static_cast<int>(cfg.integer("starts", p.fit.starts));
  if (cfg.has("probe")) {
    split_channel(cfg.text("probe"));
    p.probe = cfg.text("probe");
  }
  const std::string which = cfg.text("fit_channels", "probe");
  if (which != "probe" && which != "all") throw InputError(cfg.source() + ": fit_channels must be probe or all");
  p.fit_all_channels = which == "all";

  if (p.currents.empty() || p.durations.empty() || p.socs.empty())
    throw InputError(cfg.source() + ": sweep lists must be non-empty");
  if (p.repeats < 1) throw InputError(cfg.source() + ": repeats must be >= 1");
  if (!(p.noise_rms >= 0)) throw InputError(cfg.source() + ": noise_pT must be nonnegative");
  if (p.max_terms < 1 || p.max_terms > 5) throw InputError(cfg.source() + ": max_terms must be in [1, 5]");
  return p;
}

double StudyRun::initial_amplitude() const {
  double s = 0;
  if (probe_fit)
    for (const auto& t : probe_fit->terms) s += t.amplitude;
  return s;
}

int StudyResult::succeeded() const {
  return static_cast<int>(std::count_if(runs.begin(), runs.end(), [](const auto& r) { return r.ok(); }));
}

StudyResult run_study(const StudyPlan& plan, const std::filesystem::path& out_dir, int workers) {
  struct Condition {
    double current, duration, soc;
  };
  std::vector<Condition> conditions;
  for (double soc : plan.socs)
    for (double current : plan.currents)
      for (double duration : plan.durations) conditions.push_back({current, duration, soc});

  auto config_for = [&](const Condition& c) {
    SimulationConfig cfg = plan.base;
    cfg.current = c.current;
    cfg.pulse_duration = c.duration;
    cfg.soc = c.soc;
    cfg.noise_rms = 0;
    return cfg;
  };

  StudyResult result;
  // Noiseless records per condition; repeats only differ by their noise draw.
  std::vector<std::optional<SensorRecording>> clean(conditions.size());
  std::vector<std::string> clean_error(conditions.size());
  parallel_for(conditions.size(), workers, [&](std::size_t i) {
    try {
      clean[i] = simulate(config_for(conditions[i])).recording;
    } catch (const std::exception& e) {
      clean_error[i] = e.what();
    }
  });

  if (plan.probe) {
    result.probe = *plan.probe;
  } else {
    double best = -1;
    for (const auto& rec : clean) {
      if (!rec) continue;
      for (std::size_t c = 0; c < rec->channels.size(); ++c)
        if (std::abs(rec->channels[c].values[0]) > best) {
          best = std::abs(rec->channels[c].values[0]);
          result.probe = rec->channel_name(c);
        }
      break;
    }
  }

  for (std::size_t i = 0; i < conditions.size(); ++i)
    for (int r = 1; r <= plan.repeats; ++r) {
      StudyRun run;
      run.index = static_cast<int>(result.runs.size()) + 1;
      run.current = conditions[i].current;
      run.duration = conditions[i].duration;
      run.soc = conditions[i].soc;
      run.repeat = r;
      std::seed_seq seq{static_cast<std::uint32_t>(plan.seed), static_cast<std::uint32_t>(plan.seed >> 32),
                        static_cast<std::uint32_t>(run.index)};
      std::uint32_t words[2];
      seq.generate(words, words + 2);
      run.seed = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
      char dir[64];
      std::snprintf(dir, sizeof(dir), "run_%04d", run.index);
      run.directory = dir;
      result.runs.push_back(run);
    }

  parallel_for(result.runs.size(), workers, [&](std::size_t k) {
    StudyRun& run = result.runs[k];
    const std::size_t i = k / plan.repeats;
    try {
      if (!clean[i]) throw NumericalError(clean_error[i]);
      SensorRecording rec = *clean[i];
      add_noise(rec, plan.noise_rms, run.seed);
      rec.metadata["noise_pT"] = num(plan.noise_rms / kPicotesla);
      rec.metadata["seed"] = std::to_string(run.seed);
      rec.metadata["repeat"] = std::to_string(run.repeat);
      const std::filesystem::path dir = out_dir / run.directory;
      write_recording(rec, dir / "recording.csv");

      ParameterMap fits;
      if (plan.fit_all_channels) {
        fits = select_array(rec, plan.max_terms, plan.criterion, plan.fit);
      } else {
        auto [id, axis] = split_channel(result.probe);
        SensorRecording one;
        one.time = rec.time;
        one.metadata = rec.metadata;
        const Channel* ch = rec.find(id, axis);
        if (!ch) throw InputError("probe channel " + result.probe + " not recorded");
        one.channels.push_back(*ch);
        fits = select_array(one, plan.max_terms, plan.criterion, plan.fit);
      }
      write_parameter_map(fits, dir / "fits.csv");
      auto [id, axis] = split_channel(result.probe);
      const ChannelFit* probe = fits.find(id, axis);
      if (!probe || !probe->fit) throw NumericalError("probe fit " + (probe ? probe->status : "missing"));
      run.probe_fit = probe->fit;
      run.status = "ok";
    } catch (const std::exception& e) {
      run.status = std::string("failed: ") + e.what();
    }
  });

  write_file_atomic(out_dir / "summary.csv", format_study_summary(result));
  write_file_atomic(out_dir / "summary_stats.csv", format_study_stats(result));
  std::string runs = "run,current_A,duration_s,soc,repeat,seed,directory,status\n";
  for (const auto& r : result.runs) {
    std::string status = r.status;
    std::replace(status.begin(), status.end(), ',', ';');
    runs += std::to_string(r.index) + "," + num(r.current) + "," + num(r.duration) + "," + num(r.soc) + "," +
            std::to_string(r.repeat) + "," + std::to_string(r.seed) + "," + r.directory + "," + status + "\n";
  }
  write_file_atomic(out_dir / "runs.csv", runs);
  return result;
}

std::string format_study_summary(const StudyResult& result) {
  std::string out = "# probe=" + result.probe + "\ncurrent_A,duration_s,soc,repeat,B0_pT,tau1_s,tau2_s,tau3_s,r_squared\n";
  for (const auto& r : result.runs) {
    out += num(r.current) + "," + num(r.duration) + "," + num(r.soc) + "," + std::to_string(r.repeat) + ",";
    if (r.ok()) {
      out += num(r.initial_amplitude() / kPicotesla);
      for (std::size_t k = 0; k < 3; ++k)
        out += "," + (k < r.probe_fit->terms.size() ? num(r.probe_fit->terms[k].tau) : std::string());
      out += "," + (r.probe_fit->r_squared ? num(*r.probe_fit->r_squared) : std::string());
    } else {
      out += ",,,,";
    }
    out += "\n";
  }
  return out;
}

std::string format_study_stats(const StudyResult& result) {
  std::string out =
      "current_A,duration_s,soc,runs,succeeded,B0_mean_pT,B0_sd_pT,tau1_mean_s,tau1_sd_s,tau2_mean_s,tau2_sd_s,"
      "tau3_mean_s,tau3_sd_s\n";
  std::vector<std::tuple<double, double, double>> keys;
  for (const auto& r : result.runs) {
    auto key = std::make_tuple(r.current, r.duration, r.soc);
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
  }
  auto cell = [](const std::vector<double>& v) {
    return v.empty() ? std::string(",") : num(mean_of(v)) + "," + num(sd_of(v));
  };
  for (const auto& [current, duration, soc] : keys) {
    int runs = 0;
    std::vector<double> b0, tau[3];
    for (const auto& r : result.runs) {
      if (r.current != current || r.duration != duration || r.soc != soc) continue;
      ++runs;
      if (!r.ok()) continue;
      b0.push_back(r.initial_amplitude() / kPicotesla);
      for (std::size_t k = 0; k < 3 && k < r.probe_fit->terms.size(); ++k) tau[k].push_back(r.probe_fit->terms[k].tau);
    }
    out += num(current) + "," + num(duration) + "," + num(soc) + "," + std::to_string(runs) + "," +
           std::to_string(b0.size()) + "," + cell(b0);
    for (const auto& t : tau) out += "," + cell(t);
    out += "\n";
  }
  return out;
}

}  // namespace magrelax
