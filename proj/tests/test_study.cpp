#include "magrelax/drt.hpp"
#include "magrelax/imaging.hpp"
#include "magrelax/recording_io.hpp"
#include "magrelax/study.hpp"

#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>

using namespace magrelax;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("magrelax_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Runs the CLI quietly with the given arguments and returns its exit status.
int cli(const std::string& args) {
  const std::string cmd = std::string("\"") + MAGRELAX_CLI + "\" --quiet " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

SimulationConfig short_config() {
  SimulationConfig c;
  c.record_length = 240;
  c.sample_rate = 2;
  return c;
}

}  // namespace

TEST_CASE("simulation defaults") {
  SimulationConfig c;
  auto sim = simulate(c);
  CHECK(sim.recording.channels.size() == 48);
  CHECK(sim.recording.samples() == 2401);
  CHECK(sim.recording.time[sim.recording.samples() - 1] == doctest::Approx(600.0));
  CHECK(sim.recording.metadata.at("current_A") == "0.6");
  validate(sim.recording);
}

TEST_CASE("noise is seeded and per channel") {
  auto c = short_config();
  c.noise_rms = 1 * kPicotesla;
  c.seed = 17;
  auto a = simulate(c), b = simulate(c, 3);
  CHECK(format_recording(a.recording) == format_recording(b.recording));
  c.seed = 18;
  CHECK(format_recording(simulate(c).recording) != format_recording(a.recording));

  auto clean = short_config();
  Eigen::VectorXd diff = a.recording.channels[0].values - simulate(clean).recording.channels[0].values;
  const double rms = std::sqrt(diff.squaredNorm() / diff.size());
  CHECK(rms == doctest::Approx(1 * kPicotesla).epsilon(0.1));
}

TEST_CASE("dominant rates are real network rates") {
  SimulationConfig c;
  auto net = build_network(c.cell.geometry, c.cell.params, c.soc);
  auto state = apply_pulse(net, rest_state(net), c.current, c.pulse_duration, 0.25);
  Eigen::VectorXd dom = dominant_rates(net, state, c.array);
  REQUIRE(dom.size() == 3);
  CHECK(dom[0] > dom[1]);
  CHECK(dom[1] > dom[2]);
  Eigen::VectorXd all = eigen_rates(net);
  for (Eigen::Index k = 0; k < dom.size(); ++k)
    CHECK(((all.array() - dom[k]).abs() <= 1e-12 * dom[k]).any());
}

TEST_CASE("study sweeps") {
  StudyPlan plan;
  plan.base = short_config();
  plan.socs = {1.0};
  plan.max_terms = 3;

  SUBCASE("currents scale the amplitude linearly") {
    plan.currents = {0.6, 1.2, 1.8};
    plan.durations = {30};
    auto res = run_study(plan, scratch("currents"));
    REQUIRE(res.succeeded() == 3);
    const double b1 = res.runs[0].initial_amplitude();
    CHECK(res.runs[1].initial_amplitude() / b1 == doctest::Approx(2.0).epsilon(0.01));
    CHECK(res.runs[2].initial_amplitude() / b1 == doctest::Approx(3.0).epsilon(0.01));
  }
  SUBCASE("longer pulses give larger initial amplitude") {
    plan.currents = {0.6};
    plan.durations = {15, 30, 60, 120};
    auto res = run_study(plan, scratch("durations"));
    REQUIRE(res.succeeded() == 4);
    for (int i = 1; i < 4; ++i)
      CHECK(std::abs(res.runs[i].initial_amplitude()) > std::abs(res.runs[i - 1].initial_amplitude()));
  }
  SUBCASE("outputs are identical across worker counts") {
    plan.currents = {0.6};
    plan.durations = {15, 30};
    plan.repeats = 2;
    plan.noise_rms = 1 * kPicotesla;
    plan.seed = 5;
    auto d1 = scratch("workers1"), d3 = scratch("workers3");
    run_study(plan, d1, 1);
    run_study(plan, d3, 3);
    for (const char* f : {"summary.csv", "summary_stats.csv", "runs.csv", "run_0003/recording.csv", "run_0003/fits.csv"})
      CHECK(read_file(d1 / f) == read_file(d3 / f));
    CHECK(read_file(d1 / "summary.csv").find("current_A,duration_s,soc,repeat,B0_pT,tau1_s,tau2_s,tau3_s,r_squared") !=
          std::string::npos);
  }
}

TEST_CASE("study plan parsing") {
  auto plan = parse_study_plan(KeyValueConfig::parse(
      "currents_A = 0.6, 1.2\ndurations_s = 15, 30\nsocs = 1, 0.8\nrepeats = 3\nseed = 9\nnoise_pT = 1\n"));
  CHECK(plan.currents.size() == 2);
  CHECK(plan.socs.size() == 2);
  CHECK(plan.repeats == 3);
  CHECK(plan.noise_rms == doctest::Approx(1e-12));
  CHECK_THROWS_AS(parse_study_plan(KeyValueConfig::parse("currents_A = 0.6\ndurations_s = 15\nsocs = 1\nrepeats = 0\n")),
                  InputError);
  // An axis left out of the plan stays at the base simulation value.
  auto fixed = parse_study_plan(KeyValueConfig::parse("durations_s = 15\nsocs = 1\n"));
  CHECK(fixed.currents == std::vector<double>{SimulationConfig{}.current});
  CHECK_THROWS_AS(parse_study_plan(KeyValueConfig::parse("current_A = 1.2\n")), InputError);
  CHECK_THROWS_AS(parse_study_plan(KeyValueConfig::parse("currents_A = 0.6\ndurations_s = 15\nsocs = 1\nbogus = 2\n")),
                  InputError);
}

TEST_CASE("command line: outputs and exit codes") {
  auto dir = scratch("cli");
  const std::string out = "--out-dir " + q(dir) + " ";

  CHECK(cli(out + "simulate --duration 120 --rate 2") == 0);
  auto rec = load_recording(dir / "recording.csv");
  CHECK(rec.channels.size() == 48);
  CHECK(load_array(dir / "array.csv").sensors.size() == 16);
  CHECK(fs::exists(dir / "current_density.csv"));

  auto n1 = dir / "n1", n2 = dir / "n2";
  CHECK(cli("--seed 3 --out-dir " + q(n1) + " simulate --duration 60 --noise 1e-12") == 0);
  CHECK(cli("--seed 3 --out-dir " + q(n2) + " simulate --duration 60 --noise 1e-12") == 0);
  CHECK(read_file(n1 / "recording.csv") == read_file(n2 / "recording.csv"));

  CHECK(cli(out + "simulate --config " + q(dir / "missing.cfg")) == 2);
  CHECK(cli(out + "simulate --integrator rk4") == 2);
  CHECK(cli("bogus") == 2);

  // Fixed single term on a synthetic 20.5 s decay.
  {
    SensorRecording mono;
    mono.time = Eigen::VectorXd::LinSpaced(601, 0, 300);
    mono.channels.push_back({"p", Axis::z, 150 * kPicotesla * (-mono.time.array() / 20.5).exp().matrix()});
    write_file_atomic(dir / "mono.csv", format_recording(mono));
    CHECK(cli(out + "fit " + q(dir / "mono.csv") + " --terms 1 --output mono_fits.csv") == 0);
    auto map = load_parameter_map(dir / "mono_fits.csv");
    REQUIRE(map.channels.size() == 1);
    REQUIRE(map.channels[0].fit);
    CHECK(map.channels[0].fit->terms[0].tau == doctest::Approx(20.5).epsilon(0.01));
  }
  write_file_atomic(dir / "empty.csv", "time_s,sensor_id,axis,value_pT\n");
  CHECK(cli(out + "fit " + q(dir / "empty.csv")) == 2);
  CHECK(cli(out + "fit " + q(dir / "nothing.csv")) == 2);

  CHECK(cli(out + "image " + q(dir / "recording.csv") + " --times 10,60,100 --component z --ref 120") == 0);
  CHECK(fs::exists(dir / "manifest.csv"));
  CHECK(fs::exists(dir / "frame_z_60000.pgm"));
  CHECK(fs::exists(dir / "frame_z_60000_mask.pgm"));
  CHECK(cli(out + "image " + q(dir / "recording.csv") + " --times 10 --component w") == 2);
  CHECK(cli(out + "image " + q(dir / "recording.csv") + " --times 500 --component z") == 2);
  {
    auto one = dir / "one";
    CHECK(cli("--out-dir " + q(one) + " image " + q(dir / "recording.csv") + " --times 30 --component x --ref 120") == 0);
    auto frame = parse_image_csv(read_file(one / "frame_x_30000.csv"));
    const std::string manifest = read_file(one / "manifest.csv");
    const auto at = manifest.find("# scale_pT=");
    REQUIRE(at != std::string::npos);
    const double scale = std::stod(manifest.substr(at + 11)) * kPicotesla;
    CHECK(scale == doctest::Approx(frame.values.cwiseAbs().maxCoeff()).epsilon(1e-9));
  }

  CHECK(cli(out + "synth-spectrum") == 0);
  CHECK(cli(out + "drt " + q(dir / "spectrum.csv")) == 0);
  const std::string pd = read_file(dir / "peaks.csv");
  const auto peaks_default = std::count(pd.begin(), pd.end(), '\n');
  CHECK(peaks_default == 4);
  auto smooth = dir / "smooth";
  CHECK(cli("--out-dir " + q(smooth) + " drt " + q(dir / "spectrum.csv") + " --lambda 1e6") == 0);
  const std::string sp = read_file(smooth / "peaks.csv");
  CHECK(std::count(sp.begin(), sp.end(), '\n') <= peaks_default);
  write_file_atomic(dir / "bad_spectrum.csv", "freq_Hz,Z_real_Ohm,Z_imag_Ohm\n1,abc,2\n");
  CHECK(cli(out + "drt " + q(dir / "bad_spectrum.csv")) == 2);

  write_file_atomic(dir / "plan.txt", "currents_A = 0.6\ndurations_s = 15\nsocs = 1\nduration_s = 120\n");
  CHECK(cli(out + "study " + q(dir / "plan.txt")) == 0);
  CHECK(fs::exists(dir / "summary.csv"));
  write_file_atomic(dir / "bad_plan.txt", "currents_A = 0.6\nrepeats = 0\n");
  CHECK(cli(out + "study " + q(dir / "bad_plan.txt")) == 2);
  // Every run discharges more than the cell holds.
  write_file_atomic(dir / "doomed.txt", "currents_A = 30\ndurations_s = 3600\nsocs = 0.5\nduration_s = 60\n");
  CHECK(cli("--out-dir " + q(dir / "doomed") + " study " + q(dir / "doomed.txt")) == 4);

  CHECK(cli(out + "layout --builtin 2x3 --standoff-mm 12") == 0);
  CHECK(load_array(dir / "array.csv").sensors.size() == 6);
  CHECK(cli(out + "layout --builtin 9x9") == 2);
}
