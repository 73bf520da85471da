#include "magrelax/cellsim.hpp"
#include "magrelax/imaging.hpp"
#include "magrelax/recording_io.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace magrelax;

namespace {

constexpr double pT = kPicotesla;

SensorRecording random_recording(const SensorArray& array, double rate, double span, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  SensorRecording rec;
  const Eigen::Index n = static_cast<Eigen::Index>(std::lround(span * rate)) + 1;
  rec.time = Eigen::VectorXd::LinSpaced(n, 0.0, (n - 1) / rate);
  for (const auto& s : array.sensors)
    for (Axis a : s.axes) {
      Eigen::VectorXd v(n);
      for (auto& x : v) x = 10 * pT * n01(rng);
      rec.channels.push_back({s.id, a, v});
    }
  sort_channels(rec);
  return rec;
}

SensorRecording step_recording(double span, double t0, double amp, double noise, unsigned seed,
                               double drift_per_s = 0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  SensorRecording rec;
  const Eigen::Index n = static_cast<Eigen::Index>(span * 2) + 1;
  rec.time = Eigen::VectorXd::LinSpaced(n, 0.0, (n - 1) * 0.5);
  for (auto [id, sign] : {std::pair{"left", 1.0}, std::pair{"right", -1.0}}) {
    Eigen::VectorXd v(n);
    for (Eigen::Index k = 0; k < n; ++k) {
      const double t = rec.time[k];
      v[k] = drift_per_s * t + noise * n01(rng);
      if (t >= t0) v[k] += sign * amp * std::exp(-(t - t0) / 600.0);
    }
    rec.channels.push_back({id, Axis::z, v});
  }
  return rec;
}

}  // namespace

TEST_CASE("frame from a 4x4 array relative to the final value") {
  auto array = builtin_layout("4x4");
  auto rec = random_recording(array, 2.0, 600.0, 1);
  auto img = render_frame(rec, array, 10.0, Axis::z, 600.0);
  CHECK(img.rows() * img.cols() == 16);
  CHECK(img.reference == 600.0);
  const Eigen::Index k10 = nearest_sample(rec.time, 10.0), k600 = nearest_sample(rec.time, 600.0);
  for (Eigen::Index r = 0; r < img.rows(); ++r)
    for (Eigen::Index c = 0; c < img.cols(); ++c) {
      const auto& id = img.pixel_sensor[r * img.cols() + c];
      CHECK(id == array.sensors[r * img.cols() + c].id);
      const auto* ch = rec.find(id, Axis::z);
      CHECK(img.values(r, c) == ch->values[k10] - ch->values[k600]);
    }
  auto same = render_frame(rec, array, 600.0, Axis::z, 600.0);
  CHECK(same.values.isZero(0.0));
  CHECK_THROWS_AS(render_frame(rec, array, 601.0, Axis::z), InputError);
  CHECK_THROWS_AS(render_frame(rec, array, -1.0, Axis::z), InputError);
}

TEST_CASE("dead sensor renders as missing and leaves the rest unchanged") {
  auto array = builtin_layout("4x4");
  auto rec = random_recording(array, 2.0, 100.0, 2);
  auto full = render_frame(rec, array, 50.0, Axis::x);
  const std::string dead = array.sensors[5].id;
  SensorRecording cut = rec;
  std::erase_if(cut.channels, [&](const Channel& c) { return c.sensor_id == dead; });
  auto img = render_frame(cut, array, 50.0, Axis::x);
  int missing = 0;
  for (Eigen::Index r = 0; r < img.rows(); ++r)
    for (Eigen::Index c = 0; c < img.cols(); ++c) {
      if (img.missing(r, c)) {
        ++missing;
        CHECK(img.pixel_sensor[r * img.cols() + c].empty());
      } else {
        CHECK(img.values(r, c) == full.values(r, c));
      }
    }
  CHECK(missing == 1);

  SensorArray zonly = array;
  for (auto& s : zonly.sensors) s.axes = {Axis::z};
  auto zrec = random_recording(zonly, 2.0, 20.0, 3);
  CHECK_THROWS_AS(render_frame(zrec, zonly, 5.0, Axis::y), InputError);
}

TEST_CASE("reference frame commutes with baseline subtraction") {
  auto array = builtin_layout("4x4");
  auto rec = random_recording(array, 2.0, 300.0, 4);
  for (double t : {10.0, 150.0, 299.5}) {
    auto a = render_frame(rec, array, t, Axis::y, 200.0);
    auto b = render_frame(subtract_baseline(rec, 200.0), array, t, Axis::y);
    CHECK((a.values - b.values).cwiseAbs().maxCoeff() <= 1e-15 * pT);
  }
}

TEST_CASE("rendering leaves the recording untouched") {
  auto array = builtin_layout("4x4");
  auto rec = random_recording(array, 2.0, 200.0, 5);
  const std::string before = format_recording(rec);
  render_series(rec, array, {10, 150}, Axis::z, 200.0);
  detect_steps(rec, 5 * pT, 60.0);
  CHECK(format_recording(rec) == before);
}

TEST_CASE("series share one symmetric scale") {
  auto array = builtin_layout("4x4");
  auto rec = random_recording(array, 2.0, 600.0, 6);
  const std::vector<double> times{10, 150, 300, 450};
  auto frames = render_series(rec, array, times, Axis::z, 600.0);
  REQUIRE(frames.size() == 4);
  double peak = 0;
  for (const auto& f : frames) peak = std::max(peak, f.values.cwiseAbs().maxCoeff());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    CHECK(frames[i].scale == peak);
    CHECK(frames[i].time == times[i]);
  }
  auto one = render_series(rec, array, {150}, Axis::z, 600.0);
  auto direct = render_frame(rec, array, 150, Axis::z, 600.0);
  CHECK(one[0].values == direct.values);
  CHECK(one[0].scale == direct.scale);
  CHECK(render_series(rec, array, {}, Axis::z).empty());
}

TEST_CASE("irregular arrays render as a single row") {
  auto array = array_layout(parse_layout_config(KeyValueConfig::parse("sensor = a,0,10,8,z\nsensor = b,5,30,8,z\n")));
  auto rec = random_recording(array, 1.0, 10.0, 7);
  auto img = render_frame(rec, array, 5.0, Axis::z);
  CHECK(img.rows() == 1);
  CHECK(img.cols() == 2);
}

TEST_CASE("exports") {
  auto array = builtin_layout("4x4");
  auto rec = random_recording(array, 2.0, 100.0, 8);
  const std::string dead = array.sensors[0].id;
  std::erase_if(rec.channels, [&](const Channel& c) { return c.sensor_id == dead; });
  auto img = render_frame(rec, array, 50.0, Axis::z, 100.0, default_cell().geometry);
  CHECK(img.outline.size() == 4);

  const std::string csv = format_image_csv(img);
  auto back = parse_image_csv(csv);
  CHECK(back.rows() == img.rows());
  CHECK(back.cols() == img.cols());
  CHECK(back.time == img.time);
  CHECK(back.reference == img.reference);
  for (Eigen::Index r = 0; r < img.rows(); ++r)
    for (Eigen::Index c = 0; c < img.cols(); ++c) {
      CHECK(back.missing(r, c) == img.missing(r, c));
      if (!img.missing(r, c)) CHECK(std::abs(back.values(r, c) - img.values(r, c)) <= 1e-9 * pT);
    }

  const std::string pgm = format_pgm(img);
  const std::string head = "P5\n4 4\n65535\n";
  REQUIRE(pgm.rfind(head, 0) == 0);
  REQUIRE(pgm.size() == head.size() + 32);
  auto gray = [&](int i) {
    return (static_cast<unsigned char>(pgm[head.size() + 2 * i]) << 8) |
           static_cast<unsigned char>(pgm[head.size() + 2 * i + 1]);
  };
  for (int i = 0; i < 16; ++i) {
    if (img.missing(i / 4, i % 4)) CHECK(gray(i) == 0);
    else CHECK(gray(i) >= 1);
  }
  const std::string mask = format_mask_pgm(img);
  CHECK(mask.rfind("P5\n4 4\n255\n", 0) == 0);
  CHECK(static_cast<unsigned char>(mask.back()) == 255);
  CHECK(frame_stem(img) == "frame_z_50000");
}

TEST_CASE("step detection") {
  SUBCASE("one 10 pT step with slow recovery") {
    const double t0 = 3000;
    auto rec = step_recording(7200, t0, 10 * pT, 0.5 * pT, 9);
    auto events = detect_steps(rec, 5 * pT, 60.0);
    REQUIRE(events.size() == 1);
    CHECK(std::abs(events[0].onset - t0) <= 60.0);
    REQUIRE(events[0].responses.size() == 2);
    double left = 0, right = 0;
    for (const auto& r : events[0].responses) {
      (r.channel == "left:z" ? left : right) = r.amplitude;
      CHECK(r.decay_span > 0);
    }
    CHECK(left > 0);
    CHECK(right < 0);
    CHECK(events[0].responses[0].decay_span == doctest::Approx(600).epsilon(0.25));

    auto back = parse_step_events(format_step_events(events));
    REQUIRE(back.size() == 1);
    CHECK(back[0].responses.size() == 2);

    SensorRecording shifted = rec;
    shifted.time.array() += 1234.5;
    auto moved = detect_steps(shifted, 5 * pT, 60.0);
    REQUIRE(moved.size() == 1);
    CHECK(moved[0].onset == doctest::Approx(events[0].onset + 1234.5).epsilon(1e-12));
  }
  SUBCASE("constant series and slow drift give no events") {
    auto flat = step_recording(7200, 1e9, 0, 0, 1);
    CHECK(detect_steps(flat, 5 * pT, 60.0).empty());
    auto drift = step_recording(4 * 3600, 1e9, 0, 0, 1, 1 * pT / 3600);
    CHECK(detect_steps(drift, 5 * pT, 60.0).empty());
  }
  SUBCASE("record too short") {
    auto rec = step_recording(100, 1e9, 0, 0, 1);
    CHECK_THROWS_AS(detect_steps(rec, 5 * pT, 60.0), InputError);
  }
}
