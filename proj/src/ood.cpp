#include "posattn/ood.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace posattn {

OverlapBound p_in_bound(int n, double c) {
  if (n < 2) throw std::invalid_argument("p_in_bound: need n >= 2");
  if (!(c > 1.0)) throw std::invalid_argument("p_in_bound: need c > 1");
  OverlapBound b;
  b.n = n;
  b.c = c;
  const double denom = c * c - 1.0;
  if (n == 2) {
    b.formula_branch = "n==2";
    // Pairs integrate in closed form, so return the exact overlap
    // probability: draws with one bound inside the training box contribute
    // (2/(c+1)) (1 - (c-1)/2 ln((c+1)/(c-1))), straddling draws contribute
    // (2/(c^2-1)) (2 ln(c+1) - ln c - 2 ln 2), and same-side draws cannot
    // land inside.
    const double one_in =
        (2.0 / (c + 1.0)) * (1.0 - 0.5 * (c - 1.0) * std::log((c + 1.0) / (c - 1.0)));
    const double straddle = (2.0 / denom) * (2.0 * std::log(c + 1.0) - std::log(c) - 2.0 * std::log(2.0));
    b.p_in_upper = one_in + straddle;
  } else {
    b.formula_branch = "n>=3";
    const double head = (3.0 * (1.0 - std::pow(c, -(n - 1))) + 1.0) / (2.0 * denom * (n - 1));
    const double tail =
        (2.0 - 4.0 * std::pow(2.0 / (1.0 + c), n - 2) + 2.0 * std::pow(1.0 / c, n - 2)) /
        (static_cast<double>(n - 1) * (n - 2) * denom);
    b.p_in_upper = head + tail;
  }
  return b;
}

double chernoff_tail(long long n_samples, double p, double eps) {
  if (n_samples < 1) throw std::invalid_argument("chernoff_tail: need n_samples >= 1");
  if (p < 0.0 || p > 1.0) throw std::invalid_argument("chernoff_tail: p must lie in [0, 1]");
  if (!(eps > 0.0)) throw std::invalid_argument("chernoff_tail: eps must be positive");
  return std::exp(-2.0 * static_cast<double>(n_samples) * eps * eps);
}

OverlapEstimate monte_carlo_p_in(int n, double c, long long trials, std::uint64_t seed,
                                 double range_bound) {
  if (trials < 1) throw std::invalid_argument("monte_carlo_p_in: need trials >= 1");
  SampleOptions opt;
  opt.n = n;
  opt.count = static_cast<int>(trials);
  opt.range_bound = range_bound;
  opt.seed = seed;
  // The in-domain event only looks at the inputs, so any task works here.
  const TaskBatch batch = sample_test_ood(TaskKind::cumulative_sum, c, opt);
  OverlapEstimate e;
  e.trials = trials;
  e.estimate = in_domain_fraction(batch, range_bound);
  e.sigma = std::sqrt(e.estimate * (1.0 - e.estimate) / static_cast<double>(trials));
  return e;
}

nlohmann::json attn_dump(const ModelConfig& cfg, const ModelParams& params, const Vec& base_input,
                         const std::vector<double>& scales) {
  nlohmann::json records = nlohmann::json::array();
  for (double c : scales) {
    const Vec scaled = c * base_input;
    const auto per_layer = attention_matrices(cfg, params, scaled);
    for (std::size_t l = 0; l < per_layer.size(); ++l) {
      for (std::size_t h = 0; h < per_layer[l].size(); ++h) {
        const Mat& a = per_layer[l][h];
        nlohmann::json rows = nlohmann::json::array();
        for (Eigen::Index r = 0; r < a.rows(); ++r) {
          nlohmann::json row = nlohmann::json::array();
          for (Eigen::Index q = 0; q < a.cols(); ++q) row.push_back(a(r, q));
          rows.push_back(std::move(row));
        }
        records.push_back({{"scale", c},
                           {"layer", static_cast<int>(l)},
                           {"head", static_cast<int>(h)},
                           {"rows", std::move(rows)}});
      }
    }
  }
  return records;
}

}  // namespace posattn
