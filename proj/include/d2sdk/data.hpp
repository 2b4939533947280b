#pragma once

// Procedural multi-domain classification data. Every domain applies its own
// affine distortion (rotation of the first two coordinates, per-coordinate
// scale, bias) plus Gaussian noise to a shared set of class prototypes.

#include "d2sdk/nn.hpp"
#include "d2sdk/tensor.hpp"

#include "json.hpp"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace d2sdk {

// Domain label of samples from a domain never seen in training.
inline constexpr int kUnseenDomain = -1;

struct DomainSpec {
  int id = 0;
  double rotation_deg = 0.0;
  std::vector<double> scale;  // [D_in], no zero entries
  std::vector<double> bias;   // [D_in]
  double sigma = 0.0;

  void validate(Index input_dim) const;
  bool operator==(const DomainSpec&) const = default;
};

void to_json(nlohmann::json& j, const DomainSpec& s);
void from_json(const nlohmann::json& j, DomainSpec& s);

struct DomainSample {
  std::vector<double> x;
  int y = 0;
  int z = 0;
  std::uint64_t uid = 0;  // (generating domain id << 32) | canonical rank

  bool operator==(const DomainSample&) const = default;
};

// N_C points on a sphere of radius `separation` with every pairwise distance
// at least `separation`.
Matrix make_class_prototypes(int num_classes, int input_dim, double separation, std::uint64_t seed);

// scale * rotate(p) + bias, the noise-free image of a prototype.
std::vector<double> transform_point(const DomainSpec& spec, std::span<const double> p);

// n_per_class samples of every class, in class order; z = spec.id.
std::vector<DomainSample> sample_domain(const DomainSpec& spec, const Matrix& prototypes, int n_per_class,
                                        std::uint64_t seed);

// Draws each sample from `a` with probability `fraction`, else from `b`.
struct MixedDomain {
  DomainSpec a, b;
  double fraction = 0.5;
};

struct MixedSamples {
  std::vector<DomainSample> samples;  // z = kUnseenDomain
  std::vector<int> drawn_from;        // spec id per sample
};

MixedDomain mix_domains(const DomainSpec& a, const DomainSpec& b, double fraction);
MixedSamples sample_mixed(const MixedDomain& mix, const Matrix& prototypes, int n_per_class, std::uint64_t seed);

// Four domains rotated by 0, 25, 50 and 75 degrees; scale U[0.8, 1.25] and
// bias U[-0.3, 0.3] per coordinate; sigma 0.15.
std::vector<DomainSpec> make_s4_specs(int input_dim, std::uint64_t seed);

struct SyntheticConfig {
  int num_classes = 5;
  int input_dim = 16;
  int n_per_class = 200;
  double separation = 0.7;
  std::uint64_t seed = 0;
  std::vector<DomainSpec> domains;  // empty selects the S4 benchmark

  bool operator==(const SyntheticConfig&) const = default;
};

void to_json(nlohmann::json& j, const SyntheticConfig& c);
void from_json(const nlohmann::json& j, SyntheticConfig& c);

// Generated samples per domain, each list in canonical order (class, then x
// lexicographically), so the content does not depend on record order.
struct Dataset {
  SyntheticConfig config;  // domains always filled in
  Matrix prototypes;
  std::vector<std::vector<DomainSample>> samples;  // parallel to config.domains

  const DomainSpec& spec(int id) const;
  const std::vector<DomainSample>& domain_samples(int id) const;
};

// Pure function of the configuration.
Dataset generate_dataset(SyntheticConfig config);

// Sorts canonically and assigns uids; used by generation and import.
void canonicalize(std::vector<DomainSample>& samples, int domain_id);

struct SourceDomain {
  int domain_id = 0;  // id in the dataset; the expert slot is the position
  std::vector<DomainSample> samples;  // z = slot
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

struct TargetSet {
  std::string name;
  std::vector<DomainSample> samples;  // z = kUnseenDomain
};

struct DatasetBundle {
  std::vector<SourceDomain> sources;
  int held_out = -1;
  std::vector<TargetSet> targets;  // targets[0] is the held-out domain

  int num_sources() const { return static_cast<int>(sources.size()); }
  std::size_t num_source_samples() const;
  std::size_t num_train_samples() const;
};

// Leave-one-domain-out split: the other domains become sources, each split
// into train / validation with round(val_fraction * n) validation samples.
DatasetBundle make_lodo_split(const Dataset& data, int held_out, double val_fraction, std::uint64_t split_seed);

// Fraction of samples whose nearest transformed prototype has their label.
double nearest_prototype_accuracy(const DomainSpec& spec, const Matrix& prototypes,
                                  std::span<const DomainSample> samples);

// Flat text format: '#'-prefixed header lines with the configuration, then one
// record per line, "<domain> <class> <x_0> ... <x_{D-1}>", values at 17
// significant digits.
void write_dataset(std::ostream& out, const Dataset& data);
Dataset read_dataset(std::istream& in);
void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace d2sdk
