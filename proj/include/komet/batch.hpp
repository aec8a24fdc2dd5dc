#pragma once

#include <Eigen/Core>

#include <cstdint>

namespace komet {

using IdMatrix = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// One padded, fixed-length block of sequences. attention_mask is 1 exactly
// on real tokens.
struct Batch {
  IdMatrix token_ids;
  IdMatrix attention_mask;

  Eigen::Index size() const { return token_ids.rows(); }
  Eigen::Index length() const { return token_ids.cols(); }
};

}  // namespace komet
