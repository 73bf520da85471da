#pragma once

#include "magrelax/cellsim.hpp"
#include "magrelax/config.hpp"
#include "magrelax/core.hpp"
#include "magrelax/fieldmap.hpp"
#include "magrelax/relaxfit.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace magrelax {

struct SimulationConfig {
  CellPreset cell = default_cell();
  double soc = 1.0;
  double current = 0.6;          // A, discharge positive
  double pulse_duration = 60.0;  // s
  double record_length = 600.0;  // s of relaxation after the pulse
  double sample_rate = 4.0;      // Hz
  Integrator integrator = Integrator::exact;
  std::string layout_name = "4x4";
  SensorArray array = builtin_layout("4x4");
  double noise_rms = 0.0;  // tesla
  std::uint64_t seed = 0;
};

// Keys understood by parse_simulation_config on top of the network and layout keys.
const std::set<std::string>& simulation_config_keys();
SimulationConfig parse_simulation_config(const KeyValueConfig& cfg);

struct Simulation {
  CellNetwork network;
  CurrentDensityHistory density;
  SensorRecording recording;  // noise included when requested
};

Simulation simulate(const SimulationConfig& config, int workers = 1);

// Adds white Gaussian noise; each channel draws from its own stream seeded by (seed, channel index).
void add_noise(SensorRecording& rec, double rms, std::uint64_t seed);

// Relaxation rates carrying the largest summed |field| over the array, fastest first.
// Rates within 10% of an already chosen one and the zero mode are skipped.
Eigen::VectorXd dominant_rates(const CellNetwork& net, const NetworkState& state, const SensorArray& array,
                               int count = 3);

struct StudyPlan {
  std::vector<double> currents;   // A
  std::vector<double> durations;  // s
  std::vector<double> socs;
  int repeats = 1;
  std::uint64_t seed = 0;
  double noise_rms = 0;  // tesla
  SimulationConfig base;
  int max_terms = 3;
  Criterion criterion = Criterion::aicc;
  FitOptions fit;
  std::optional<std::string> probe;  // "<sensor>:<axis>"
  bool fit_all_channels = false;
};

StudyPlan parse_study_plan(const KeyValueConfig& cfg);

struct StudyRun {
  int index = 0;
  double current = 0, duration = 0, soc = 0;
  int repeat = 0;
  std::uint64_t seed = 0;
  std::string directory;
  std::string status;  // "ok" or "failed: <reason>"
  std::optional<RelaxationFit> probe_fit;

  bool ok() const { return status == "ok"; }
  double initial_amplitude() const;  // sum of fitted amplitudes, tesla
};

struct StudyResult {
  std::string probe;
  std::vector<StudyRun> runs;
  int succeeded() const;
};

// Runs every (current, duration, soc) x repeat and writes per-run folders plus
// summary.csv, summary_stats.csv and runs.csv under `out_dir`.
StudyResult run_study(const StudyPlan& plan, const std::filesystem::path& out_dir, int workers = 1);

std::string format_study_summary(const StudyResult& result);
std::string format_study_stats(const StudyResult& result);

}  // namespace magrelax
