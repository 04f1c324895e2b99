#include "posattn/tasks.hpp"

#include <algorithm>
#include <ostream>
#include <random>
#include <stdexcept>

#include "json.hpp"

namespace posattn {

const char* task_name(TaskKind t) {
  switch (t) {
    case TaskKind::cumulative_sum: return "cumulative_sum";
    case TaskKind::cumulative_min: return "cumulative_min";
    case TaskKind::cumulative_median: return "cumulative_median";
    case TaskKind::sorting: return "sorting";
    case TaskKind::cumulative_max_subarray: return "cumulative_max_subarray";
  }
  throw std::runtime_error("task_name: bad TaskKind");
}

TaskKind task_from_name(const std::string& name) {
  for (TaskKind t : {TaskKind::cumulative_sum, TaskKind::cumulative_min,
                     TaskKind::cumulative_median, TaskKind::sorting,
                     TaskKind::cumulative_max_subarray})
    if (name == task_name(t)) return t;
  throw std::runtime_error("unknown task: " + name);
}

Vec task_oracle(TaskKind task, const Vec& x) {
  const Eigen::Index m = x.size();
  if (m < 1) throw std::runtime_error("task_oracle: empty input");
  Vec y(m);
  switch (task) {
    case TaskKind::cumulative_sum: {
      double s = 0.0;
      for (Eigen::Index i = 0; i < m; ++i) y(i) = (s += x(i));
      break;
    }
    case TaskKind::cumulative_min: {
      double mn = x(0);
      for (Eigen::Index i = 0; i < m; ++i) y(i) = (mn = std::min(mn, x(i)));
      break;
    }
    case TaskKind::cumulative_median: {
      std::vector<double> sorted;
      sorted.reserve(m);
      for (Eigen::Index i = 0; i < m; ++i) {
        // keep the prefix sorted by inserting in place
        sorted.insert(std::upper_bound(sorted.begin(), sorted.end(), x(i)), x(i));
        const size_t k = sorted.size();
        y(i) = (k % 2 == 1) ? sorted[k / 2] : 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]);
      }
      break;
    }
    case TaskKind::sorting: {
      std::vector<double> v(x.data(), x.data() + m);
      std::sort(v.begin(), v.end());
      for (Eigen::Index i = 0; i < m; ++i) y(i) = v[i];
      break;
    }
    case TaskKind::cumulative_max_subarray: {
      // Kadane's recurrence per prefix: best sum of a nonempty subarray ending
      // at i, and the running best over the whole prefix.
      double ending = x(0), best = x(0);
      y(0) = x(0);
      for (Eigen::Index i = 1; i < m; ++i) {
        ending = std::max(x(i), ending + x(i));
        best = std::max(best, ending);
        y(i) = best;
      }
      break;
    }
  }
  return y;
}

namespace {

Sample draw_sample(TaskKind task, int length, double gl, double gu, double scale,
                   std::mt19937_64& rng) {
  Sample s;
  s.gamma_l = gl;
  s.gamma_u = gu;
  s.scale = scale;
  s.input.resize(length);
  std::uniform_real_distribution<double> entry(gl, gu);
  for (int i = 0; i < length; ++i) s.input(i) = entry(rng);
  s.target = task_oracle(task, s.input);
  return s;
}

int draw_length(const SampleOptions& opt, std::mt19937_64& rng) {
  if (!opt.variable_length) return opt.n;
  std::uniform_int_distribution<int> len(1, opt.n);
  return len(rng);
}

}  // namespace

TaskBatch sample_train(TaskKind task, const SampleOptions& opt) {
  if (opt.count < 1) throw std::runtime_error("sample_train: count must be >= 1");
  if (opt.n < 1) throw std::runtime_error("sample_train: n must be >= 1");
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> bound(-opt.range_bound, opt.range_bound);
  TaskBatch batch;
  batch.task = task;
  batch.samples.reserve(opt.count);
  for (int k = 0; k < opt.count; ++k) {
    const int length = draw_length(opt, rng);
    double gl = bound(rng), gu = bound(rng);
    if (gl > gu) std::swap(gl, gu);
    batch.samples.push_back(draw_sample(task, length, gl, gu, 1.0, rng));
  }
  return batch;
}

TaskBatch sample_test_ood(TaskKind task, double c, const SampleOptions& opt) {
  if (!(c > 1.0)) throw std::runtime_error("sample_test_ood: scale factor c must be > 1");
  if (opt.count < 1) throw std::runtime_error("sample_test_ood: count must be >= 1");
  std::mt19937_64 rng(opt.seed);
  const double b = opt.range_bound;
  std::uniform_real_distribution<double> bound(-c * b, c * b);
  TaskBatch batch;
  batch.task = task;
  batch.samples.reserve(opt.count);
  for (int k = 0; k < opt.count; ++k) {
    const int length = draw_length(opt, rng);
    double gl, gu;
    do {  // accept only bound pairs that escape the training range
      gl = bound(rng);
      gu = bound(rng);
      if (gl > gu) std::swap(gl, gu);
    } while (!(gl < -b || gu > b));
    batch.samples.push_back(draw_sample(task, length, gl, gu, c, rng));
  }
  return batch;
}

double in_domain_fraction(const TaskBatch& batch, double bound) {
  if (batch.samples.empty()) throw std::runtime_error("in_domain_fraction: empty batch");
  int inside = 0;
  for (const Sample& s : batch.samples)
    if (s.input.cwiseAbs().maxCoeff() <= bound) ++inside;
  return static_cast<double>(inside) / static_cast<double>(batch.samples.size());
}

void dump_jsonl(const TaskBatch& batch, std::ostream& out) {
  for (const Sample& s : batch.samples) {
    nlohmann::json rec;
    rec["task"] = task_name(batch.task);
    rec["length"] = s.input.size();
    rec["gamma_l"] = s.gamma_l;
    rec["gamma_u"] = s.gamma_u;
    rec["scale"] = s.scale;
    rec["input"] = std::vector<double>(s.input.data(), s.input.data() + s.input.size());
    rec["target"] = std::vector<double>(s.target.data(), s.target.data() + s.target.size());
    out << rec.dump() << "\n";
  }
}

}  // namespace posattn
