#pragma once

// Independent double-precision scalar reference for the distillation
// objective. Plain loops over std::vector, no tensor code.

#include <cmath>
#include <cstddef>
#include <vector>

namespace komet::oracle {

using Vec = std::vector<double>;

inline Vec softmax(const Vec& z, double temperature) {
  Vec out(z.size());
  double total = 0.0;
  for (double v : z) total += std::exp(v / temperature);
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = std::exp(z[i] / temperature) / total;
  return out;
}

inline double cross_entropy(const Vec& p_teacher, const Vec& p_student, double epsilon) {
  double total = 0.0;
  for (std::size_t i = 0; i < p_teacher.size(); ++i) total -= p_teacher[i] * std::log(p_student[i] + epsilon);
  return total;
}

inline double entropy(const Vec& p) {
  double total = 0.0;
  for (double v : p) {
    if (v > 0.0) total -= v * std::log(v);
  }
  return total;
}

inline double kl(const Vec& p, const Vec& q) {
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) total += p[i] * std::log(p[i] / q[i]);
  }
  return total;
}

// Mean over rows of the soft-target cross-entropy; logits are row-major
// [rows, classes].
inline double soft_target_ce(const Vec& teacher_logits, const Vec& student_logits, std::size_t classes,
                             double temperature, double epsilon) {
  const std::size_t rows = teacher_logits.size() / classes;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    Vec zt(teacher_logits.begin() + static_cast<long>(r * classes), teacher_logits.begin() + static_cast<long>((r + 1) * classes));
    Vec zs(student_logits.begin() + static_cast<long>(r * classes), student_logits.begin() + static_cast<long>((r + 1) * classes));
    total += cross_entropy(softmax(zt, temperature), softmax(zs, temperature), epsilon);
  }
  return total / static_cast<double>(rows);
}

inline double soft_target_kl(const Vec& teacher_logits, const Vec& student_logits, std::size_t classes,
                             double temperature) {
  const std::size_t rows = teacher_logits.size() / classes;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    Vec zt(teacher_logits.begin() + static_cast<long>(r * classes), teacher_logits.begin() + static_cast<long>((r + 1) * classes));
    Vec zs(student_logits.begin() + static_cast<long>(r * classes), student_logits.begin() + static_cast<long>((r + 1) * classes));
    total += kl(softmax(zt, temperature), softmax(zs, temperature));
  }
  return total / static_cast<double>(rows);
}

inline double mse(const Vec& a, const Vec& b) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += (a[i] - b[i]) * (a[i] - b[i]);
  return total / static_cast<double>(a.size());
}

// W is row-major [out, in]; each batch row of `student_flat` is a length-in vector.
inline double projected_attention_mse(const Vec& student_flat, const Vec& teacher_flat, const Vec& w,
                                      std::size_t in, std::size_t out) {
  const std::size_t batch = student_flat.size() / in;
  Vec projected(batch * out, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out; ++o) {
      double acc = 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += w[o * in + i] * student_flat[b * in + i];
      projected[b * out + o] = acc;
    }
  }
  return mse(projected, teacher_flat);
}

inline double hybrid(double distill, double attention, double alpha) {
  return alpha * distill + (1.0 - alpha) * attention;
}

}  // namespace komet::oracle
