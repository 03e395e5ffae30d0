// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "gridshed/dae_sim.hpp"
#include "gridshed/grid_model.hpp"

namespace fixtures {

inline const gridshed::GridModel& ieee14() {
  static const gridshed::GridModel m = gridshed::load_case_file("ieee14");
  return m;
}

inline const gridshed::Equilibrium& ieee14_eq() {
  static const gridshed::Equilibrium eq = gridshed::find_equilibrium(ieee14());
  return eq;
}

/// One machine on a slack bus feeding a load bus through a reactance.
inline std::string two_bus_case(double PL = 0.5, double QL = 0.2, double r = 0.01, double x = 0.1,
                                double b = 0.02) {
  return "BASE 100 60\n"
         "BUS\n1 SLACK 1.0 0\n2 PQ 1.0 0\n"
         "BRANCH\n1 2 " + std::to_string(r) + " " + std::to_string(x) + " " + std::to_string(b) + " 0\n"
         "GEN\n1 0.0 0.003 1.0 0.3 0.7 0.5 6.0 0.5 5.0 20.0\n"
         "AVR\n1 20 0.05 1 0.3 0.05 1 0.0006 0.9 0.02 -5 7\n"
         "LOAD\n2 " + std::to_string(PL) + " " + std::to_string(QL) + "\n";
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
  static std::mt19937_64 rng(std::random_device{}());
  auto p = std::filesystem::temp_directory_path() / ("gridshed_test_" + tag + "_" + std::to_string(rng()));
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fixtures
