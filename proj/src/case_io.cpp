// SPDX-License-Identifier: Apache-2.0
//
// Plain-text case reader. One section per table, whitespace-delimited
// columns, '#' starts a comment.

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "gridshed/error.hpp"
#include "gridshed/grid_model.hpp"
#include "ieee14_case.inc"

namespace gridshed {

namespace {

enum class Section { none, bus, branch, gen, avr, load };

struct Row {
  std::size_t line;
  std::vector<std::string> cols;
};

double to_number(const Row& row, std::size_t col) {
  const std::string& s = row.cols.at(col);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ParseError(row.line, "expected a number in column " + std::to_string(col + 1) + ", got '" + s + "'");
  }
  if (used != s.size() || !std::isfinite(v))
    throw ParseError(row.line, "expected a number in column " + std::to_string(col + 1) + ", got '" + s + "'");
  return v;
}

int to_int(const Row& row, std::size_t col) {
  const double v = to_number(row, col);
  if (v != std::floor(v)) throw ParseError(row.line, "expected an integer in column " + std::to_string(col + 1));
  return static_cast<int>(v);
}

void expect_columns(const Row& row, std::size_t n, const char* section) {
  if (row.cols.size() != n)
    throw ParseError(row.line, std::string(section) + " row needs " + std::to_string(n) + " columns, got " +
                                   std::to_string(row.cols.size()));
}

}  // namespace

GridModel load_case(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  Section section = Section::none;
  double base_mva = 100.0, base_hz = 60.0;

  std::vector<BusParams> buses;
  std::map<int, std::size_t> bus_by_id;
  std::vector<Row> branch_rows, gen_rows, avr_rows, load_rows;

  while (std::getline(in, raw)) {
    ++line_no;
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    std::istringstream tok(raw);
    Row row{line_no, {}};
    for (std::string w; tok >> w;) row.cols.push_back(w);
    if (row.cols.empty()) continue;

    const std::string& head = row.cols[0];
    if (head == "BASE") {
      if (row.cols.size() < 2 || row.cols.size() > 3) throw ParseError(line_no, "BASE takes MVA and optional Hz");
      base_mva = to_number(row, 1);
      if (row.cols.size() == 3) base_hz = to_number(row, 2);
      if (!(base_mva > 0) || !(base_hz > 0)) throw ParseError(line_no, "BASE values must be positive");
      continue;
    }
    if (row.cols.size() == 1) {
      if (head == "BUS") section = Section::bus;
      else if (head == "BRANCH") section = Section::branch;
      else if (head == "GEN") section = Section::gen;
      else if (head == "AVR") section = Section::avr;
      else if (head == "LOAD") section = Section::load;
      else throw ParseError(line_no, "unknown section '" + head + "'");
      continue;
    }

    switch (section) {
      case Section::none:
        throw ParseError(line_no, "data before any section header");
      case Section::bus: {
        expect_columns(row, 4, "BUS");
        BusParams b;
        b.id = to_int(row, 0);
        const std::string& kind = row.cols[1];
        if (kind == "PQ") b.kind = BusKind::pq;
        else if (kind == "PV") b.kind = BusKind::pv;
        else if (kind == "SLACK") b.kind = BusKind::slack;
        else throw ParseError(line_no, "bus type must be PQ, PV or SLACK");
        b.v_set = to_number(row, 2);
        b.b_shunt = to_number(row, 3);
        if (!(b.v_set > 0)) throw ParseError(line_no, "v_set must be positive");
        if (b.kind == BusKind::slack) {
          for (const auto& other : buses)
            if (other.kind == BusKind::slack) throw ParseError(line_no, "duplicate slack bus");
        }
        if (!bus_by_id.emplace(b.id, buses.size()).second)
          throw ParseError(line_no, "duplicate bus id " + std::to_string(b.id));
        buses.push_back(b);
        break;
      }
      case Section::branch:
        expect_columns(row, 6, "BRANCH");
        branch_rows.push_back(row);
        break;
      case Section::gen:
        expect_columns(row, 11, "GEN");
        gen_rows.push_back(row);
        break;
      case Section::avr:
        expect_columns(row, 12, "AVR");
        avr_rows.push_back(row);
        break;
      case Section::load:
        expect_columns(row, 3, "LOAD");
        load_rows.push_back(row);
        break;
    }
  }

  auto bus_of = [&](const Row& row, std::size_t col) {
    const int id = to_int(row, col);
    auto it = bus_by_id.find(id);
    if (it == bus_by_id.end()) throw ParseError(row.line, "unknown bus id " + std::to_string(id));
    return it->second;
  };

  std::vector<BranchParams> branches;
  for (const auto& row : branch_rows) {
    BranchParams br;
    br.from_bus = bus_of(row, 0);
    br.to_bus = bus_of(row, 1);
    const double r = to_number(row, 2), x = to_number(row, 3);
    if (r == 0.0 && x == 0.0) throw ParseError(row.line, "branch with zero impedance");
    std::tie(br.Y, br.phi) = admittance_polar(r, x);
    br.b_sh = 0.5 * to_number(row, 4);
    const double tap = to_number(row, 5);
    if (tap < 0) throw ParseError(row.line, "tap ratio must be non-negative");
    if (tap != 0.0) {
      br.kind = BranchKind::transformer;
      br.m = tap;
    }
    branches.push_back(br);
  }

  std::vector<Generator> gens;
  for (const auto& row : gen_rows) {
    Generator g;
    auto& m = g.machine;
    m.bus = bus_of(row, 0);
    if (buses[m.bus].kind == BusKind::pq) throw ParseError(row.line, "generator on a PQ bus");
    m.p_set = to_number(row, 1);
    m.r_a = to_number(row, 2);
    m.x_d = to_number(row, 3);
    m.x_d_p = to_number(row, 4);
    m.x_q = to_number(row, 5);
    m.x_q_p = to_number(row, 6);
    m.T_d0_p = to_number(row, 7);
    m.T_q0_p = to_number(row, 8);
    m.H = to_number(row, 9);
    m.D = to_number(row, 10);
    m.Omega_b = 2.0 * M_PI * base_hz;
    gens.push_back(g);
  }
  std::vector<bool> has_avr(gens.size(), false);
  for (const auto& row : avr_rows) {
    const int gi = to_int(row, 0);
    if (gi < 1 || static_cast<std::size_t>(gi) > gens.size())
      throw ParseError(row.line, "AVR references unknown generator " + std::to_string(gi));
    if (has_avr[gi - 1]) throw ParseError(row.line, "duplicate AVR for generator " + std::to_string(gi));
    has_avr[gi - 1] = true;
    auto& a = gens[gi - 1].avr;
    a.K_a = to_number(row, 1);
    a.T_a = to_number(row, 2);
    a.K_e = to_number(row, 3);
    a.T_e = to_number(row, 4);
    a.K_f = to_number(row, 5);
    a.T_f = to_number(row, 6);
    a.A_e = to_number(row, 7);
    a.B_e = to_number(row, 8);
    a.T_m_filt = to_number(row, 9);
    a.v_r_min = to_number(row, 10);
    a.v_r_max = to_number(row, 11);
  }
  for (std::size_t g = 0; g < gens.size(); ++g)
    if (!has_avr[g]) throw ParseError(line_no, "generator " + std::to_string(g + 1) + " has no AVR row");

  std::vector<LoadParams> loads;
  for (const auto& row : load_rows) {
    LoadParams ld;
    ld.bus = bus_of(row, 0);
    ld.PL = to_number(row, 1);
    ld.QL = to_number(row, 2);
    for (const auto& other : loads)
      if (other.bus == ld.bus) throw ParseError(row.line, "duplicate load on bus " + row.cols[0]);
    loads.push_back(ld);
  }

  return GridModel::build(std::move(buses), std::move(gens), std::move(branches), std::move(loads), base_mva);
}

std::string_view builtin_ieee14_case() { return kIeee14CaseText; }

GridModel load_case_file(const std::string& path_or_builtin) {
  if (path_or_builtin == "ieee14") return load_case(builtin_ieee14_case());
  std::ifstream f(path_or_builtin);
  if (!f) throw Error("cannot open case file '" + path_or_builtin + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return load_case(ss.str());
}

}  // namespace gridshed
