#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"
#include "lla/model.hpp"

namespace lla {

inline constexpr float kDefaultTau = 5.0f;

struct OutlierReport {
  std::size_t block_index = 0;
  std::vector<double> feature_means; // mean |Y| per feature
  double mean = 0.0;                 // mean of feature_means
  double tau = kDefaultTau;
  std::vector<std::uint32_t> outlier_set; // ascending
};

struct NeuronScores {
  std::size_t block_index = 0;
  std::vector<double> scores;
  std::vector<std::uint32_t> selected; // descending score, ties to lower index
};

// Per-block statistics of a probe batch: mean |FFN output| per feature and
// mean |down-projection input| per neuron, over every probe token. The probe
// passes run in parallel and are reduced in probe order.
struct ProbeStats {
  std::vector<std::vector<double>> feature_means; // [block][feature]
  std::vector<std::vector<double>> neuron_means;  // [block][neuron]
};

ProbeStats collect_probe_stats(const ToyModel &model, std::span<const TokenSeq> probes);

// Outlier set of a vector of feature means: { i : means[i] > tau * mean(means) }.
OutlierReport outliers_from_means(std::vector<double> feature_means, double tau,
                                  std::size_t block_index = 0);

OutlierReport find_feature_outliers(const ToyModel &model, std::size_t block,
                                    std::span<const TokenSeq> probes, double tau = kDefaultTau);

// s_j = sum_{i in o_f} |W_down(j, i)| * u_bar[j]; keeps the top `count`.
NeuronScores score_neurons(const FfnBlock &block, std::span<const std::uint32_t> o_f,
                           std::span<const double> u_bar, std::size_t count);

// Smallest block index whose FFN output shows at least one feature outlier.
std::size_t select_protected_block(const ToyModel &model, std::span<const TokenSeq> probes,
                                   double tau = kDefaultTau);

// Block selection plus neuron scoring in one probe pass.
struct Selection {
  OutlierReport outliers;
  NeuronScores neurons;
};
Selection select_protected_neurons(const ToyModel &model, std::span<const TokenSeq> probes,
                                   double tau, std::size_t count);

nlohmann::json to_json(const OutlierReport &r);
nlohmann::json to_json(const NeuronScores &s);

} // namespace lla
