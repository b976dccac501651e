#include "autoadr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "autoadr/errors.hpp"

namespace autoadr {

double pr_auc(std::span<const double> scores, std::span<const int> labels) {
  require(scores.size() == labels.size(), "pr_auc: scores and labels differ in length");
  std::size_t positives = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] == 0 || labels[i] == 1, "pr_auc: labels must be 0 or 1");
    require(std::isfinite(scores[i]), "pr_auc: scores must be finite");
    positives += static_cast<std::size_t>(labels[i]);
  }
  require(positives > 0, "pr_auc: no positive labels");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double area = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t group_tp = 0, j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      group_tp += static_cast<std::size_t>(labels[order[j]]);
      ++j;
    }
    tp += group_tp;
    seen += j - i;
    if (group_tp > 0) {
      area += (static_cast<double>(tp) / static_cast<double>(seen)) *
              (static_cast<double>(group_tp) / static_cast<double>(positives));
    }
    i = j;
  }
  return area;
}

}  // namespace autoadr
