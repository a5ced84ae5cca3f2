#include "lla/outlier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "lla/errors.hpp"

namespace lla {

ProbeStats collect_probe_stats(const ToyModel &model, std::span<const TokenSeq> probes) {
  if (probes.empty()) {
    throw InputError("outlier search needs at least one probe sequence");
  }
  const std::size_t blocks = model.blocks.size();
  const std::size_t d_ff = blocks ? model.blocks.front().ffn.d_ff() : 0;
  // Per-probe partial sums, reduced below in probe order.
  std::vector<ProbeStats> partial(probes.size());
  std::vector<std::size_t> tokens(probes.size(), 0);
  const auto count = static_cast<std::int64_t>(probes.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t p = 0; p < count; ++p) {
    const auto &seq = probes[static_cast<std::size_t>(p)];
    const auto fwd = model_forward(model, seq, true);
    auto &stats = partial[static_cast<std::size_t>(p)];
    stats.feature_means.assign(blocks, std::vector<double>(model.d_model, 0.0));
    stats.neuron_means.assign(blocks, std::vector<double>(d_ff, 0.0));
    for (std::size_t b = 0; b < blocks; ++b) {
      const auto &y = fwd.captures[b].y;
      for (std::size_t t = 0; t < y.rows(); ++t) {
        for (std::size_t i = 0; i < y.cols(); ++i) {
          stats.feature_means[b][i] += std::abs(static_cast<double>(y(t, i)));
        }
      }
      // u_bar is a per-call mean; weight it back to a sum.
      const auto &u = fwd.captures[b].u_bar;
      for (std::size_t j = 0; j < u.size(); ++j) {
        stats.neuron_means[b][j] += static_cast<double>(u[j]) * static_cast<double>(seq.size());
      }
    }
    tokens[static_cast<std::size_t>(p)] = seq.size();
  }
  ProbeStats total;
  total.feature_means.assign(blocks, std::vector<double>(model.d_model, 0.0));
  total.neuron_means.assign(blocks, std::vector<double>(d_ff, 0.0));
  std::size_t all_tokens = 0;
  for (std::size_t p = 0; p < partial.size(); ++p) {
    all_tokens += tokens[p];
    for (std::size_t b = 0; b < blocks; ++b) {
      for (std::size_t i = 0; i < model.d_model; ++i) {
        total.feature_means[b][i] += partial[p].feature_means[b][i];
      }
      for (std::size_t j = 0; j < d_ff; ++j) {
        total.neuron_means[b][j] += partial[p].neuron_means[b][j];
      }
    }
  }
  if (all_tokens == 0) {
    throw InputError("outlier search: probe sequences are empty");
  }
  const double n = static_cast<double>(all_tokens);
  for (std::size_t b = 0; b < blocks; ++b) {
    for (auto &v : total.feature_means[b]) {
      v /= n;
    }
    for (auto &v : total.neuron_means[b]) {
      v /= n;
    }
  }
  return total;
}

OutlierReport outliers_from_means(std::vector<double> feature_means, double tau,
                                  std::size_t block_index) {
  if (!(tau > 1.0)) {
    throw InputError("outlier threshold tau must exceed 1");
  }
  OutlierReport r;
  r.block_index = block_index;
  r.tau = tau;
  r.feature_means = std::move(feature_means);
  r.mean = r.feature_means.empty()
               ? 0.0
               : std::accumulate(r.feature_means.begin(), r.feature_means.end(), 0.0) /
                     static_cast<double>(r.feature_means.size());
  for (std::size_t i = 0; i < r.feature_means.size(); ++i) {
    if (r.feature_means[i] > tau * r.mean) {
      r.outlier_set.push_back(static_cast<std::uint32_t>(i));
    }
  }
  return r;
}

OutlierReport find_feature_outliers(const ToyModel &model, std::size_t block,
                                    std::span<const TokenSeq> probes, double tau) {
  if (block >= model.blocks.size()) {
    throw InputError("block index " + std::to_string(block) + " out of range");
  }
  if (!(tau > 1.0)) {
    throw InputError("outlier threshold tau must exceed 1");
  }
  auto stats = collect_probe_stats(model, probes);
  return outliers_from_means(std::move(stats.feature_means[block]), tau, block);
}

NeuronScores score_neurons(const FfnBlock &block, std::span<const std::uint32_t> o_f,
                           std::span<const double> u_bar, std::size_t count) {
  if (o_f.empty()) {
    throw InputError("score_neurons: empty outlier set; lower tau");
  }
  const std::size_t d_ff = block.d_ff();
  if (u_bar.size() != d_ff) {
    throw InputError("score_neurons: u_bar has " + std::to_string(u_bar.size()) +
                     " entries, block has " + std::to_string(d_ff) + " neurons");
  }
  if (count > d_ff) {
    throw InputError("score_neurons: cannot select " + std::to_string(count) + " of " +
                     std::to_string(d_ff) + " neurons");
  }
  for (auto i : o_f) {
    if (i >= block.d_model()) {
      throw InputError("score_neurons: outlier feature index out of range");
    }
  }
  NeuronScores s;
  s.scores.resize(d_ff);
  for (std::size_t j = 0; j < d_ff; ++j) {
    double weight = 0.0;
    for (auto i : o_f) {
      weight += std::abs(static_cast<double>(block.w_down(j, i)));
    }
    s.scores[j] = weight * u_bar[j];
  }
  std::vector<std::uint32_t> order(d_ff);
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return s.scores[a] > s.scores[b]; });
  s.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
  return s;
}

std::size_t select_protected_block(const ToyModel &model, std::span<const TokenSeq> probes,
                                   double tau) {
  if (model.blocks.empty()) {
    throw InputError("select_protected_block: model has no blocks");
  }
  const auto stats = collect_probe_stats(model, probes);
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    if (!outliers_from_means(stats.feature_means[b], tau, b).outlier_set.empty()) {
      return b;
    }
  }
  throw SelectionError("no block shows a feature outlier at tau = " + std::to_string(tau) +
                       "; lower tau");
}

Selection select_protected_neurons(const ToyModel &model, std::span<const TokenSeq> probes,
                                   double tau, std::size_t count) {
  if (model.blocks.empty()) {
    throw InputError("select_protected_neurons: model has no blocks");
  }
  auto stats = collect_probe_stats(model, probes);
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    auto report = outliers_from_means(stats.feature_means[b], tau, b);
    if (report.outlier_set.empty()) {
      continue;
    }
    auto scores =
        score_neurons(model.blocks[b].ffn, report.outlier_set, stats.neuron_means[b], count);
    scores.block_index = b;
    return {std::move(report), std::move(scores)};
  }
  throw SelectionError("no block shows a feature outlier at tau = " + std::to_string(tau) +
                       "; lower tau");
}

nlohmann::json to_json(const OutlierReport &r) {
  return {{"block_index", r.block_index},
          {"feature_means", r.feature_means},
          {"mean", r.mean},
          {"tau", r.tau},
          {"outlier_set", r.outlier_set}};
}

nlohmann::json to_json(const NeuronScores &s) {
  return {{"block_index", s.block_index}, {"scores", s.scores}, {"selected", s.selected}};
}

} // namespace lla
