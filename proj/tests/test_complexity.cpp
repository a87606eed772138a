#include <cmath>
#include <sstream>

#include "doctest.h"
#include "masv/complexity.hpp"

using namespace masv;
using model::ModelConfig;

TEST_CASE("instantiated parameter count equals the analytic formula exactly") {
  std::vector<ModelConfig> matrix;
  for (int64_t c : {512, 1024}) {
    matrix.push_back(ModelConfig::base_model(c));
    matrix.push_back(ModelConfig::plus_lcb(c));
    matrix.push_back(ModelConfig::plus_tri(c));
    matrix.push_back(ModelConfig::complete(c));
  }
  matrix.push_back(ModelConfig::tiny());
  matrix.push_back(ModelConfig::tiny(false));
  for (const auto& cfg : matrix) {
    INFO(cfg.name());
    CHECK(complexity::count_params_analytic(cfg) == complexity::count_params_instantiated(cfg));
  }
}

TEST_CASE("published parameter anchors are reproduced within 15 percent") {
  const double base512 = static_cast<double>(complexity::count_params_analytic(ModelConfig::base_model(512)));
  CHECK(std::abs(base512 - 6.2e6) / 6.2e6 < 0.15);
  const double masv512 = static_cast<double>(complexity::count_params_analytic(ModelConfig::complete(512)));
  CHECK(std::abs(masv512 - 9.2e6) / 9.2e6 < 0.15);
  const double masv1024 = static_cast<double>(complexity::count_params_analytic(ModelConfig::complete(1024)));
  CHECK(std::abs(masv1024 - 22.2e6) / 22.2e6 < 0.15);
}

TEST_CASE("flops strictly increase in frames, channels, state dim and depth") {
  ModelConfig cfg = ModelConfig::complete(512);
  const double f0 = complexity::estimate_flops(cfg, 100).flops_total;
  CHECK(complexity::estimate_flops(cfg, 101).flops_total > f0);

  ModelConfig wider = cfg;
  wider.channels = 640;
  CHECK(complexity::estimate_flops(wider, 100).flops_total > f0);

  ModelConfig deeper = cfg;
  deeper.num_blocks = 4;
  CHECK(complexity::estimate_flops(deeper, 100).flops_total > f0);

  ModelConfig more_state = cfg;
  more_state.state_dim = 24;
  CHECK(complexity::estimate_flops(more_state, 100).flops_total > f0);
}

TEST_CASE("scan flops are exactly linear in the frame count") {
  ModelConfig cfg = ModelConfig::complete(512);
  for (int64_t t : {64, 200, 1000}) {
    const double s1 = complexity::estimate_flops(cfg, t).scan_flops;
    const double s2 = complexity::estimate_flops(cfg, 2 * t).scan_flops;
    const double ratio = s2 / s1;
    CHECK(ratio > 1.9);
    CHECK(ratio < 2.1);
    CHECK(ratio == doctest::Approx(2.0).epsilon(1e-12));
    // total flops are dominated by per-frame terms as well
    const double r_tot = complexity::estimate_flops(cfg, 2 * t).flops_total /
                         complexity::estimate_flops(cfg, t).flops_total;
    CHECK(r_tot > 1.9);
    CHECK(r_tot < 2.1);
  }
}

TEST_CASE("channel-square conv terms quadruple when the width doubles") {
  const auto r512 = complexity::estimate_flops(ModelConfig::complete(512), 200);
  const auto r1024 = complexity::estimate_flops(ModelConfig::complete(1024), 200);
  const double fr = r1024.kind_flops("conv_cc") / r512.kind_flops("conv_cc");
  CHECK(fr > 3.9);
  CHECK(fr < 4.05);
  const double pr = static_cast<double>(r1024.kind_params("conv_cc")) /
                    static_cast<double>(r512.kind_params("conv_cc"));
  CHECK(pr > 3.9);
  CHECK(pr < 4.05);
  // the quadratic terms dominate the linear ones at 1024
  CHECK(r1024.kind_flops("conv_cc") >
        r1024.flops_total - r1024.kind_flops("conv_cc") - r1024.kind_flops("mfa"));
}

TEST_CASE("published FLOPS anchor at the calibrated length") {
  const auto rep =
      complexity::estimate_flops(ModelConfig::complete(1024), complexity::kCalibrationFrames);
  CHECK(std::abs(rep.flops_total - 6.2e9) / 6.2e9 < 0.25);
}

TEST_CASE("frame preconditions and breakdown consistency") {
  ModelConfig cfg = ModelConfig::complete(512);
  CHECK_THROWS_AS(complexity::estimate_flops(cfg, 0), ContractError);
  const auto rep = complexity::estimate_flops(cfg, 1);
  CHECK(rep.flops_total > 0);
  // breakdown sums to the totals
  double f = 0;
  int64_t p = 0;
  for (const auto& l : rep.layers) {
    f += l.flops;
    p += l.params;
  }
  CHECK(f == doctest::Approx(rep.flops_total).epsilon(1e-12));
  CHECK(p == rep.params);
}

TEST_CASE("comparison csv: structure, monotonicity, stability, round trip") {
  std::vector<ModelConfig> one = {ModelConfig::complete(512)};
  const std::string single = complexity::emit_comparison_csv(one, 140);
  CHECK(std::count(single.begin(), single.end(), '\n') == 2);  // header + one row
  CHECK(single.rfind("name,params,flops,source\n", 0) == 0);

  std::vector<ModelConfig> two = {ModelConfig::complete(512), ModelConfig::complete(1024)};
  const std::string csv = complexity::emit_comparison_csv(two, 140);
  CHECK(csv == complexity::emit_comparison_csv(two, 140));  // identical across reruns

  // parse back and compare against the reports
  std::istringstream ss(csv);
  std::string line;
  std::getline(ss, line);
  double prev_params = -1;
  int rows = 0;
  while (std::getline(ss, line)) {
    const size_t c1 = line.find(',');
    const size_t c2 = line.find(',', c1 + 1);
    const size_t c3 = line.find(',', c2 + 1);
    const std::string name = line.substr(0, c1);
    const double params = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
    const double flops = std::stod(line.substr(c2 + 1, c3 - c2 - 1));
    CHECK(params > prev_params);  // sorted by params
    prev_params = params;
    const ModelConfig& cfg = name == "masv-512" ? two[0] : two[1];
    const auto rep = complexity::estimate_flops(cfg, 140);
    CHECK(params == static_cast<double>(rep.params));
    CHECK(flops == rep.flops_total);
    ++rows;
  }
  CHECK(rows == 2);

  // reference rows are labeled and excluded by default
  CHECK(csv.find("reference") == std::string::npos);
  const std::string with_ref = complexity::emit_comparison_csv(two, 140, true);
  CHECK(with_ref.find("published-masv-1024") != std::string::npos);
  CHECK(with_ref.find(",reference") != std::string::npos);
}

TEST_CASE("breakdown json parses and matches the report") {
  const auto rep = complexity::estimate_flops(ModelConfig::tiny(), 50);
  const std::string j = complexity::breakdown_json(rep);
  CHECK(j.find("\"params\"") != std::string::npos);
  CHECK(j.find("\"layers\"") != std::string::npos);
  CHECK(j == complexity::breakdown_json(complexity::estimate_flops(ModelConfig::tiny(), 50)));
}
