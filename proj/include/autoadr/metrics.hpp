#pragma once

#include <span>

namespace autoadr {

// Area under the precision-recall curve in average-precision form: scores
// are swept in descending order, tied scores form one threshold, and each
// threshold contributes precision * (recall gained). Requires at least one
// positive label; labels must be 0 or 1.
double pr_auc(std::span<const double> scores, std::span<const int> labels);

}  // namespace autoadr
