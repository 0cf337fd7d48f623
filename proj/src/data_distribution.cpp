#include "dflow/data_distribution.hpp"

#include <cmath>
#include <fstream>
#include <map>

namespace dflow {

namespace {
constexpr double kMassTol = 1e-12;
constexpr std::size_t kEnumerationGuard = 10'000'000;
}  // namespace

DataDistribution DataDistribution::tabular(const Alphabet& alphabet, int dims,
                                           std::vector<WeightedSequence> entries) {
  if (dims < 1) fail(ErrorCode::BadInput, "dims must be positive");
  if (entries.empty()) fail(ErrorCode::InvalidDistribution, "empty support");
  double total = 0.0;
  for (const auto& entry : entries) {
    if (static_cast<int>(entry.tokens.size()) != dims)
      fail(ErrorCode::InvalidDistribution, "support entry with wrong dimension");
    alphabet.check_sequence(entry.tokens, /*allow_mask=*/false);
    if (entry.p < 0.0) fail(ErrorCode::InvalidDistribution, "negative probability");
    total += entry.p;
  }
  if (std::abs(total - 1.0) > kMassTol)
    fail(ErrorCode::InvalidDistribution, "support probabilities do not sum to 1");
  DataDistribution dist;
  dist.alphabet_ = alphabet;
  dist.dims_ = dims;
  dist.entries_ = std::move(entries);
  return dist;
}

DataDistribution DataDistribution::from_sampler(const Alphabet& alphabet, int dims,
                                                SamplerFn sampler) {
  if (!sampler) fail(ErrorCode::BadInput, "null sampler");
  DataDistribution dist;
  dist.alphabet_ = alphabet;
  dist.dims_ = dims;
  dist.sampler_ = std::move(sampler);
  return dist;
}

DataDistribution DataDistribution::empirical(const Alphabet& alphabet, int dims,
                                             std::span<const TokenSequence> samples) {
  if (samples.empty()) fail(ErrorCode::BadInput, "no samples");
  std::map<TokenSequence, long> counts;
  for (const auto& s : samples) counts[s]++;
  std::vector<WeightedSequence> entries;
  entries.reserve(counts.size());
  const double n = static_cast<double>(samples.size());
  for (const auto& [tokens, count] : counts)
    entries.push_back({tokens, static_cast<double>(count) / n});
  return tabular(alphabet, dims, std::move(entries));
}

const std::vector<WeightedSequence>& DataDistribution::support() const {
  if (!is_tabular())
    fail(ErrorCode::NotAvailable, "sampler-backed distribution has no support table");
  return entries_;
}

TokenSequence DataDistribution::sample(Rng& rng) const {
  if (sampler_) {
    TokenSequence seq = sampler_(rng);
    alphabet_.check_sequence(seq, /*allow_mask=*/false);
    return seq;
  }
  std::vector<double> weights(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) weights[i] = entries_[i].p;
  return entries_[static_cast<std::size_t>(rng.categorical(weights))].tokens;
}

std::vector<double> DataDistribution::marginal_pt(const ConditionalFlow& flow,
                                                  double t) const {
  const auto& entries = support();
  const int n = flow.alphabet().num_states();
  const std::size_t total = state_space_size(dims_, n);
  if (total > kEnumerationGuard)
    fail(ErrorCode::Capacity, "state space exceeds enumeration guard");

  std::vector<double> table(total, 0.0);
  // Per-dimension probability rows for each support point, then one pass
  // over the full state space.
  for (const auto& entry : entries) {
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(dims_));
    for (int d = 0; d < dims_; ++d)
      rows[static_cast<std::size_t>(d)] = flow.prob_row(t, entry.tokens[static_cast<std::size_t>(d)]);
    for (std::size_t idx = 0; idx < total; ++idx) {
      double prod = entry.p;
      std::size_t rem = idx;
      for (int d = dims_ - 1; d >= 0 && prod > 0.0; --d) {
        prod *= rows[static_cast<std::size_t>(d)][rem % static_cast<std::size_t>(n)];
        rem /= static_cast<std::size_t>(n);
      }
      table[idx] += prod;
    }
  }
  return table;
}

std::vector<double> DataDistribution::state_table() const {
  const auto& entries = support();
  const int n = alphabet_.num_states();
  const std::size_t total = state_space_size(dims_, n);
  if (total > kEnumerationGuard)
    fail(ErrorCode::Capacity, "state space exceeds enumeration guard");
  std::vector<double> table(total, 0.0);
  for (const auto& entry : entries) table[encode_state(entry.tokens, n)] += entry.p;
  return table;
}

std::vector<double> DataDistribution::dim_marginal(int dim) const {
  const auto& entries = support();
  if (dim < 0 || dim >= dims_) fail(ErrorCode::BadInput, "dimension out of range");
  std::vector<double> marginal(static_cast<std::size_t>(alphabet_.size_S), 0.0);
  for (const auto& entry : entries)
    marginal[static_cast<std::size_t>(entry.tokens[static_cast<std::size_t>(dim)])] += entry.p;
  return marginal;
}

DataDistribution DataDistribution::from_json(const nlohmann::json& j, bool mask_enabled) {
  const int s = j.at("S").get<int>();
  const int dims = j.at("D").get<int>();
  Alphabet alphabet(s, mask_enabled);
  std::vector<WeightedSequence> entries;
  for (const auto& e : j.at("entries")) {
    WeightedSequence w;
    w.tokens = e.at("tokens").get<TokenSequence>();
    w.p = e.at("p").get<double>();
    entries.push_back(std::move(w));
  }
  return tabular(alphabet, dims, std::move(entries));
}

nlohmann::json DataDistribution::to_json() const {
  const auto& entries = support();
  nlohmann::json j;
  j["S"] = alphabet_.size_S;
  j["D"] = dims_;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& entry : entries)
    arr.push_back({{"tokens", entry.tokens}, {"p", entry.p}});
  j["entries"] = std::move(arr);
  return j;
}

DataDistribution DataDistribution::load_file(const std::string& path, bool mask_enabled) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::BadInput, "cannot open " + path);
  nlohmann::json j;
  in >> j;
  return from_json(j, mask_enabled);
}

void DataDistribution::save_file(const std::string& path) const {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::BadInput, "cannot write " + path);
  out << to_json().dump(2) << "\n";
}

}  // namespace dflow
