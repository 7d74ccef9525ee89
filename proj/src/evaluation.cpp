#include "nmm/evaluation.hpp"

#include <cmath>

namespace nmm {

namespace {

void fill_grid(int remaining_units, int slots, std::vector<int>& current,
               std::vector<std::vector<int>>& out) {
  if (slots == 1) {
    current.push_back(remaining_units);
    out.push_back(current);
    current.pop_back();
    return;
  }
  for (int u = 0; u <= remaining_units; ++u) {
    current.push_back(u);
    fill_grid(remaining_units - u, slots - 1, current, out);
    current.pop_back();
  }
}

}  // namespace

std::vector<std::vector<double>> simplex_weight_grid(int k, double step) {
  if (k < 1) throw std::invalid_argument("simplex_weight_grid: need at least one model");
  if (!(step > 0 && step <= 1))
    throw std::invalid_argument("simplex_weight_grid: step must be in (0, 1]");
  const double units = 1.0 / step;
  const int n = static_cast<int>(std::lround(units));
  if (std::abs(units - n) > 1e-9)
    throw std::invalid_argument("simplex_weight_grid: step must divide 1");

  std::vector<std::vector<int>> integer_grid;
  std::vector<int> current;
  fill_grid(n, k, current, integer_grid);

  std::vector<std::vector<double>> out;
  out.reserve(integer_grid.size());
  for (const auto& units_vec : integer_grid) {
    std::vector<double> lambda(units_vec.size());
    for (size_t i = 0; i < units_vec.size(); ++i)
      lambda[i] = static_cast<double>(units_vec[i]) / n;
    out.push_back(std::move(lambda));
  }
  return out;
}

}  // namespace nmm
