#pragma once

// Brute-force reference computations. These deliberately avoid the library's
// tensor ops: plain nested loops over std::vector, written from the
// definitions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace nre::oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix to_matrix(const std::vector<double>& flat, std::size_t rows, std::size_t cols) {
  Matrix m(rows, std::vector<double>(cols));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m[i][j] = flat[i * cols + j];
  return m;
}

// For each piece p in 1..3 and channel c: max of h[t][c] over t with
// segment t == p, or -100 when the piece is empty.
inline std::vector<double> piecewise_max_pool(const Matrix& h, const std::vector<int>& segments) {
  const std::size_t d = h.empty() ? 0 : h[0].size();
  std::vector<double> out;
  for (int piece = 1; piece <= 3; ++piece) {
    for (std::size_t c = 0; c < d; ++c) {
      bool seen = false;
      double best = 0.0;
      for (std::size_t t = 0; t < h.size(); ++t) {
        if (segments[t] != piece) continue;
        if (!seen || h[t][c] > best) best = h[t][c];
        seen = true;
      }
      out.push_back(seen ? best : -100.0);
    }
  }
  return out;
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : x) m = std::max(m, v);
  std::vector<double> e;
  double z = 0.0;
  for (double v : x) {
    e.push_back(std::exp(v - m));
    z += e.back();
  }
  for (double& v : e) v /= z;
  return e;
}

struct Attention {
  std::vector<double> weights;
  std::vector<double> bag;
};

// e_i = <rep_i, query>; alpha = softmax(e); bag = sum_i alpha_i rep_i.
inline Attention bag_attention(const Matrix& reps, const std::vector<double>& query) {
  std::vector<double> scores;
  for (const auto& r : reps) {
    double s = 0.0;
    for (std::size_t d = 0; d < r.size(); ++d) s += r[d] * query[d];
    scores.push_back(s);
  }
  Attention a;
  a.weights = softmax(scores);
  a.bag.assign(reps.front().size(), 0.0);
  for (std::size_t i = 0; i < reps.size(); ++i)
    for (std::size_t d = 0; d < a.bag.size(); ++d) a.bag[d] += a.weights[i] * reps[i][d];
  return a;
}

// Relation r's probability when the bag is aggregated with query W[r].
inline std::vector<double> bag_relation_scores(const Matrix& reps, const Matrix& weight, const std::vector<double>& bias) {
  std::vector<double> out;
  for (std::size_t r = 0; r < weight.size(); ++r) {
    const Attention a = bag_attention(reps, weight[r]);
    std::vector<double> logits;
    for (std::size_t k = 0; k < weight.size(); ++k) {
      double s = bias[k];
      for (std::size_t d = 0; d < a.bag.size(); ++d) s += weight[k][d] * a.bag[d];
      logits.push_back(s);
    }
    out.push_back(softmax(logits)[r]);
  }
  return out;
}

// logits[q][n] = -||query_q - mean(support_n)||^2.
inline Matrix proto_logits(const std::vector<Matrix>& support, const Matrix& queries) {
  Matrix protos;
  for (const auto& group : support) {
    std::vector<double> c(group.front().size(), 0.0);
    for (const auto& s : group)
      for (std::size_t d = 0; d < c.size(); ++d) c[d] += s[d];
    for (double& v : c) v /= static_cast<double>(group.size());
    protos.push_back(c);
  }
  Matrix out;
  for (const auto& q : queries) {
    std::vector<double> row;
    for (const auto& c : protos) {
      double dist = 0.0;
      for (std::size_t d = 0; d < c.size(); ++d) dist += (q[d] - c[d]) * (q[d] - c[d]);
      row.push_back(-dist);
    }
    out.push_back(row);
  }
  return out;
}

// Confusion-matrix micro F1 excluding `na`.
inline double micro_f1(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& golds, std::size_t na) {
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> confusion;
  for (std::size_t i = 0; i < preds.size(); ++i) ++confusion[{golds[i], preds[i]}];
  double tp = 0, pred_pos = 0, gold_pos = 0;
  for (const auto& [cell, count] : confusion) {
    const auto [g, p] = cell;
    if (g == p && g != na) tp += count;
    if (p != na) pred_pos += count;
    if (g != na) gold_pos += count;
  }
  if (tp == 0) return 0.0;
  const double precision = tp / pred_pos;
  const double recall = tp / gold_pos;
  return 2 * precision * recall / (precision + recall);
}

struct Ranked {
  std::string bag;
  std::size_t relation;
  double score;
};

struct PrOracle {
  double auc;
  double max_f1;
  std::vector<std::pair<double, double>> points;  // (recall, precision)
};

// Position of each item = number of items that must precede it; then every
// prefix is rescanned from scratch.
inline PrOracle pr_auc(const std::vector<Ranked>& items, const std::set<std::pair<std::string, std::size_t>>& gold) {
  const std::size_t n = items.size();
  std::vector<std::size_t> at(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t before = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const auto& a = items[j];
      const auto& b = items[i];
      const bool precedes = a.score > b.score ||
                            (a.score == b.score && (a.bag < b.bag || (a.bag == b.bag && a.relation < b.relation)));
      before += precedes;
    }
    at[before] = i;
  }
  PrOracle o{0.0, 0.0, {}};
  for (std::size_t k = 1; k <= n; ++k) {
    std::size_t hits = 0;
    for (std::size_t p = 0; p < k; ++p) hits += gold.count({items[at[p]].bag, items[at[p]].relation});
    const double precision = static_cast<double>(hits) / static_cast<double>(k);
    const double recall = static_cast<double>(hits) / static_cast<double>(gold.size());
    o.points.push_back({recall, precision});
    if (gold.count({items[at[k - 1]].bag, items[at[k - 1]].relation})) o.auc += precision / static_cast<double>(gold.size());
    if (precision + recall > 0) o.max_f1 = std::max(o.max_f1, 2 * precision * recall / (precision + recall));
  }
  return o;
}

}  // namespace nre::oracle
