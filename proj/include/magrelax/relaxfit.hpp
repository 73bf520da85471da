#pragma once

#include "magrelax/config.hpp"
#include "magrelax/core.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace magrelax {

struct FitOptions {
  bool baseline = true;
  int starts = 8;
  int max_iterations = 500;
  double tolerance = 1e-10;  // relative change of the residual sum of squares
  std::optional<double> tau_min;  // default: sample interval
  std::optional<double> tau_max;  // default: 10 x record length
  bool robust = false;            // Tukey-weighted IRLS
  double tukey_c = 4.685;
  int robust_iterations = 20;
};

enum class Criterion { aicc, f_test };
Criterion parse_criterion(std::string_view s);
const char* criterion_name(Criterion c);

struct FitConfig {
  FitOptions options;
  Criterion criterion = Criterion::aicc;
  int max_terms = 3;
};
FitConfig parse_fit_config(const KeyValueConfig& cfg);

struct ExpTerm {
  double amplitude = 0;
  double tau = 0;
  double amplitude_sd = 0;
  double tau_sd = 0;
};

struct RelaxationFit {
  std::vector<ExpTerm> terms;  // ascending tau
  double baseline = 0;
  double baseline_sd = 0;
  std::optional<double> r_squared;  // empty when the data have no variance
  double residual_rms = 0;
  double ss_res = 0;
  bool converged = false;
  bool robust = false;
  int iterations = 0;
  double criterion = 0;  // value of the selection statistic, NaN when unused
  Eigen::Index samples = 0;

  // Model value at time t measured from the first sample.
  double evaluate(double t) const;
};

// Least-squares fit of sum_i A_i exp(-t/tau_i) (+ baseline), t measured from t[0].
RelaxationFit fit_multiexp(const Eigen::VectorXd& t, const Eigen::VectorXd& y, int n_terms,
                           const FitOptions& options = {});

// Fits for 1..max_terms, each warm-started from the previous one.
std::vector<RelaxationFit> fit_nested(const Eigen::VectorXd& t, const Eigen::VectorXd& y,
                                      int max_terms, const FitOptions& options = {});

RelaxationFit select_model(const Eigen::VectorXd& t, const Eigen::VectorXd& y, int max_terms,
                           Criterion criterion = Criterion::aicc, const FitOptions& options = {});

double aicc(const RelaxationFit& fit, bool baseline);

// Amplitudes re-solved by linear least squares at the fit's tau values.
Eigen::VectorXd resolve_amplitudes(const Eigen::VectorXd& t, const Eigen::VectorXd& y,
                                   const RelaxationFit& fit, bool baseline);

struct MonoTau {
  double tau = 0;
  double tau_sd = 0;
  double crossing_time = 0;  // direct 1/e crossing, NaN if the data never cross
  RelaxationFit fit;
};

MonoTau mono_tau(const Eigen::VectorXd& t, const Eigen::VectorXd& y, const FitOptions& options = {});

struct ChannelFit {
  std::string sensor_id;
  Axis axis = Axis::z;
  std::optional<RelaxationFit> fit;
  std::string status;  // "ok", "not_converged" or "failed: <reason>"
};

struct ParameterMap {
  std::vector<ChannelFit> channels;
  std::map<std::string, std::string> metadata;

  const ChannelFit* find(std::string_view sensor_id, Axis axis) const;
};

ParameterMap fit_array(const SensorRecording& rec, int n_terms, const FitOptions& options = {},
                       int workers = 1);
ParameterMap select_array(const SensorRecording& rec, int max_terms, Criterion criterion,
                          const FitOptions& options = {}, int workers = 1);

std::string format_parameter_map(const ParameterMap& map);
void write_parameter_map(const ParameterMap& map, const std::filesystem::path& path);
ParameterMap parse_parameter_map(std::string_view text, std::string_view source = "<string>");
ParameterMap load_parameter_map(const std::filesystem::path& path);

}  // namespace magrelax
