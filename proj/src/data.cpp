#include "d2sdk/data.hpp"

#include "d2sdk/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

namespace d2sdk {

namespace {

constexpr const char* kMagic = "# d2sdk-dataset 1";
constexpr std::uint32_t kPrototypeStream = 0xC0000000u;
constexpr std::uint32_t kSpecStream = 0xD0000000u;
constexpr std::uint32_t kSampleStream = 0x5A000000u;
constexpr std::uint32_t kMixStream = 0x5B000000u;
constexpr std::uint32_t kSplitStream = 0x5C000000u;
constexpr int kPrototypeAttempts = 10000;

void draw_sample(Rng& rng, const DomainSpec& spec, const Matrix& prototypes, int cls, DomainSample& out) {
  const Index d = prototypes.cols();
  out.x = transform_point(spec, std::span<const double>(prototypes.row(cls).data(), static_cast<std::size_t>(d)));
  if (spec.sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, spec.sigma);
    for (double& v : out.x) v += noise(rng);
  }
  out.y = cls;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void DomainSpec::validate(Index input_dim) const {
  if (id < 0) throw ConfigError("domain id must be non-negative, got " + std::to_string(id));
  if (input_dim < 2) throw ConfigError("domain transforms need input_dim >= 2");
  if (static_cast<Index>(scale.size()) != input_dim || static_cast<Index>(bias.size()) != input_dim) {
    throw DimensionError("domain " + std::to_string(id) + ": scale/bias length must equal input_dim " +
                         std::to_string(input_dim));
  }
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) {
    throw ConfigError("domain " + std::to_string(id) + ": sigma must be >= 0");
  }
  for (double s : scale) {
    if (s == 0.0 || !std::isfinite(s)) throw ConfigError("domain " + std::to_string(id) + ": zero scale entry");
  }
  if (!std::isfinite(rotation_deg)) throw ConfigError("domain " + std::to_string(id) + ": rotation not finite");
}

void to_json(nlohmann::json& j, const DomainSpec& s) {
  j = {{"id", s.id}, {"rotation_deg", s.rotation_deg}, {"scale", s.scale}, {"bias", s.bias}, {"sigma", s.sigma}};
}

void from_json(const nlohmann::json& j, DomainSpec& s) {
  s.id = j.at("id").get<int>();
  s.rotation_deg = j.value("rotation_deg", 0.0);
  s.scale = j.at("scale").get<std::vector<double>>();
  s.bias = j.at("bias").get<std::vector<double>>();
  s.sigma = j.value("sigma", 0.0);
}

Matrix make_class_prototypes(int num_classes, int input_dim, double separation, std::uint64_t seed) {
  if (!(separation > 0.0)) throw ConfigError("prototype separation must be > 0");
  if (num_classes < 1 || input_dim < 1) throw ConfigError("prototypes need num_classes >= 1 and input_dim >= 1");
  Rng rng = stream_rng(seed, kPrototypeStream);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix p(num_classes, input_dim);
  for (int attempt = 0; attempt < kPrototypeAttempts; ++attempt) {
    for (int c = 0; c < num_classes; ++c) {
      do {
        for (int i = 0; i < input_dim; ++i) p(c, i) = n(rng);
      } while (p.row(c).norm() == 0.0);
      p.row(c) *= separation / p.row(c).norm();
    }
    bool ok = true;
    for (int a = 0; a < num_classes && ok; ++a) {
      for (int b = a + 1; b < num_classes && ok; ++b) ok = (p.row(a) - p.row(b)).norm() >= separation;
    }
    if (ok) return p;
  }
  throw ConfigError("could not place " + std::to_string(num_classes) + " prototypes in " +
                    std::to_string(input_dim) + " dimensions at separation " + format_double(separation));
}

std::vector<double> transform_point(const DomainSpec& spec, std::span<const double> p) {
  std::vector<double> x(p.begin(), p.end());
  const double t = spec.rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(t), s = std::sin(t);
  x[0] = c * p[0] - s * p[1];
  x[1] = s * p[0] + c * p[1];
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = spec.scale[i] * x[i] + spec.bias[i];
  return x;
}

std::vector<DomainSample> sample_domain(const DomainSpec& spec, const Matrix& prototypes, int n_per_class,
                                        std::uint64_t seed) {
  spec.validate(prototypes.cols());
  if (n_per_class < 1) throw ConfigError("n_per_class must be >= 1");
  Rng rng = stream_rng(seed, kSampleStream + static_cast<std::uint32_t>(spec.id));
  std::vector<DomainSample> out(static_cast<std::size_t>(prototypes.rows() * n_per_class));
  std::size_t i = 0;
  for (int c = 0; c < prototypes.rows(); ++c) {
    for (int r = 0; r < n_per_class; ++r, ++i) {
      draw_sample(rng, spec, prototypes, c, out[i]);
      out[i].z = spec.id;
      out[i].uid = (static_cast<std::uint64_t>(spec.id) << 32) | i;
    }
  }
  return out;
}

MixedDomain mix_domains(const DomainSpec& a, const DomainSpec& b, double fraction) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("mix fraction must lie in [0, 1]");
  if (a.scale.size() != b.scale.size()) throw DimensionError("mixed domains differ in input_dim");
  return {a, b, fraction};
}

MixedSamples sample_mixed(const MixedDomain& mix, const Matrix& prototypes, int n_per_class, std::uint64_t seed) {
  mix.a.validate(prototypes.cols());
  mix.b.validate(prototypes.cols());
  if (n_per_class < 1) throw ConfigError("n_per_class must be >= 1");
  Rng rng = stream_rng(seed, kMixStream + static_cast<std::uint32_t>(mix.a.id * 257 + mix.b.id));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  MixedSamples out;
  const std::size_t n = static_cast<std::size_t>(prototypes.rows() * n_per_class);
  out.samples.resize(n);
  out.drawn_from.resize(n);
  std::size_t i = 0;
  for (int c = 0; c < prototypes.rows(); ++c) {
    for (int r = 0; r < n_per_class; ++r, ++i) {
      // u < 1 always, so fraction = 1 picks a and fraction = 0 picks b.
      const DomainSpec& spec = u(rng) < mix.fraction ? mix.a : mix.b;
      draw_sample(rng, spec, prototypes, c, out.samples[i]);
      out.samples[i].z = kUnseenDomain;
      out.samples[i].uid = (0xFFFFFFFFull << 32) | i;
      out.drawn_from[i] = spec.id;
    }
  }
  return out;
}

std::vector<DomainSpec> make_s4_specs(int input_dim, std::uint64_t seed) {
  const double rotations[] = {0.0, 25.0, 50.0, 75.0};
  std::vector<DomainSpec> specs;
  for (int id = 0; id < 4; ++id) {
    Rng rng = stream_rng(seed, kSpecStream + static_cast<std::uint32_t>(id));
    std::uniform_real_distribution<double> scale(0.8, 1.25), bias(-0.3, 0.3);
    DomainSpec s;
    s.id = id;
    s.rotation_deg = rotations[id];
    s.sigma = 0.15;
    for (int i = 0; i < input_dim; ++i) s.scale.push_back(scale(rng));
    for (int i = 0; i < input_dim; ++i) s.bias.push_back(bias(rng));
    specs.push_back(std::move(s));
  }
  return specs;
}

void to_json(nlohmann::json& j, const SyntheticConfig& c) {
  j = {{"num_classes", c.num_classes}, {"input_dim", c.input_dim}, {"n_per_class", c.n_per_class},
       {"separation", c.separation},   {"seed", c.seed},           {"domains", c.domains}};
}

void from_json(const nlohmann::json& j, SyntheticConfig& c) {
  SyntheticConfig d;
  c.num_classes = j.value("num_classes", d.num_classes);
  c.input_dim = j.value("input_dim", d.input_dim);
  c.n_per_class = j.value("n_per_class", d.n_per_class);
  c.separation = j.value("separation", d.separation);
  c.seed = j.value("seed", d.seed);
  c.domains = j.value("domains", std::vector<DomainSpec>{});
}

const DomainSpec& Dataset::spec(int id) const {
  for (const auto& s : config.domains) {
    if (s.id == id) return s;
  }
  throw IndexError("unknown domain id " + std::to_string(id));
}

const std::vector<DomainSample>& Dataset::domain_samples(int id) const {
  for (std::size_t i = 0; i < config.domains.size(); ++i) {
    if (config.domains[i].id == id) return samples[i];
  }
  throw IndexError("unknown domain id " + std::to_string(id));
}

void canonicalize(std::vector<DomainSample>& samples, int domain_id) {
  std::sort(samples.begin(), samples.end(), [](const DomainSample& a, const DomainSample& b) {
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  for (std::size_t i = 0; i < samples.size(); ++i) {
    samples[i].uid = (static_cast<std::uint64_t>(domain_id) << 32) | i;
  }
}

namespace {

void validate_config(const SyntheticConfig& c) {
  if (c.num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (c.n_per_class < 1) throw ConfigError("n_per_class must be >= 1");
  if (c.domains.empty()) throw ConfigError("dataset has no domains");
  for (std::size_t i = 0; i < c.domains.size(); ++i) {
    c.domains[i].validate(c.input_dim);
    for (std::size_t j = 0; j < i; ++j) {
      if (c.domains[j].id == c.domains[i].id) {
        throw ConfigError("duplicate domain id " + std::to_string(c.domains[i].id));
      }
    }
  }
}

}  // namespace

Dataset generate_dataset(SyntheticConfig config) {
  if (config.domains.empty()) config.domains = make_s4_specs(config.input_dim, config.seed);
  validate_config(config);
  Dataset d;
  d.prototypes = make_class_prototypes(config.num_classes, config.input_dim, config.separation, config.seed);
  for (const auto& spec : config.domains) {
    auto s = sample_domain(spec, d.prototypes, config.n_per_class, config.seed);
    canonicalize(s, spec.id);
    d.samples.push_back(std::move(s));
  }
  d.config = std::move(config);
  return d;
}

std::size_t DatasetBundle::num_source_samples() const {
  std::size_t n = 0;
  for (const auto& s : sources) n += s.samples.size();
  return n;
}

std::size_t DatasetBundle::num_train_samples() const {
  std::size_t n = 0;
  for (const auto& s : sources) n += s.train.size();
  return n;
}

DatasetBundle make_lodo_split(const Dataset& data, int held_out, double val_fraction, std::uint64_t split_seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  const auto& target = data.domain_samples(held_out);
  DatasetBundle b;
  b.held_out = held_out;
  for (std::size_t i = 0; i < data.config.domains.size(); ++i) {
    const int id = data.config.domains[i].id;
    if (id == held_out) continue;
    SourceDomain src;
    src.domain_id = id;
    src.samples = data.samples[i];
    const int slot = static_cast<int>(b.sources.size());
    for (auto& s : src.samples) s.z = slot;

    const std::size_t n = src.samples.size();
    const auto n_val = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = stream_rng(split_seed, kSplitStream + static_cast<std::uint32_t>(id));
    std::shuffle(order.begin(), order.end(), rng);
    src.val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    src.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    std::sort(src.val.begin(), src.val.end());
    std::sort(src.train.begin(), src.train.end());
    b.sources.push_back(std::move(src));
  }
  if (b.sources.empty()) throw ConfigError("leave-one-domain-out needs at least two domains");
  TargetSet t{"domain-" + std::to_string(held_out), target};
  for (auto& s : t.samples) s.z = kUnseenDomain;
  b.targets.push_back(std::move(t));
  return b;
}

double nearest_prototype_accuracy(const DomainSpec& spec, const Matrix& prototypes,
                                  std::span<const DomainSample> samples) {
  if (samples.empty()) return 0.0;
  spec.validate(prototypes.cols());
  std::vector<std::vector<double>> centres;
  for (Index c = 0; c < prototypes.rows(); ++c) {
    centres.push_back(transform_point(
        spec, std::span<const double>(prototypes.row(c).data(), static_cast<std::size_t>(prototypes.cols()))));
  }
  std::size_t correct = 0;
  for (const auto& s : samples) {
    int best = 0;
    double best_d = INFINITY;
    for (std::size_t c = 0; c < centres.size(); ++c) {
      double d = 0;
      for (std::size_t i = 0; i < s.x.size(); ++i) d += (s.x[i] - centres[c][i]) * (s.x[i] - centres[c][i]);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    correct += best == s.y;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

void write_dataset(std::ostream& out, const Dataset& data) {
  out << kMagic << '\n';
  out << "# config " << nlohmann::json(data.config).dump() << '\n';
  out << "# columns domain class x[" << data.config.input_dim << "]\n";
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    for (const auto& s : data.samples[i]) {
      out << data.config.domains[i].id << ' ' << s.y;
      for (double v : s.x) out << ' ' << format_double(v);
      out << '\n';
    }
  }
}

Dataset read_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMagic) throw IoError("dataset: missing '" + std::string(kMagic) + "' header");
  Dataset d;
  bool have_config = false;
  std::vector<std::vector<DomainSample>> by_domain;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("# config ", 0) == 0) {
        try {
          d.config = nlohmann::json::parse(line.substr(9)).get<SyntheticConfig>();
        } catch (const nlohmann::json::exception& e) {
          throw IoError(std::string("dataset: bad config header: ") + e.what());
        }
        validate_config(d.config);
        by_domain.assign(d.config.domains.size(), {});
        have_config = true;
      }
      continue;
    }
    if (!have_config) throw IoError("dataset: record before the config header");
    std::istringstream row(line);
    int z = 0;
    DomainSample s;
    if (!(row >> z >> s.y)) throw IoError("dataset: line " + std::to_string(line_no) + ": bad record");
    s.x.resize(static_cast<std::size_t>(d.config.input_dim));
    for (double& v : s.x) {
      if (!(row >> v)) throw IoError("dataset: line " + std::to_string(line_no) + ": too few values");
    }
    std::string extra;
    if (row >> extra) throw IoError("dataset: line " + std::to_string(line_no) + ": too many values");
    if (s.y < 0 || s.y >= d.config.num_classes) {
      throw IoError("dataset: line " + std::to_string(line_no) + ": class " + std::to_string(s.y) + " out of range");
    }
    std::size_t slot = d.config.domains.size();
    for (std::size_t i = 0; i < d.config.domains.size(); ++i) {
      if (d.config.domains[i].id == z) slot = i;
    }
    if (slot == d.config.domains.size()) {
      throw IoError("dataset: line " + std::to_string(line_no) + ": unknown domain " + std::to_string(z));
    }
    s.z = z;
    by_domain[slot].push_back(std::move(s));
  }
  if (!have_config) throw IoError("dataset: missing config header");
  d.prototypes = make_class_prototypes(d.config.num_classes, d.config.input_dim, d.config.separation, d.config.seed);
  for (std::size_t i = 0; i < by_domain.size(); ++i) canonicalize(by_domain[i], d.config.domains[i].id);
  d.samples = std::move(by_domain);
  return d;
}

void save_dataset(const Dataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write_dataset(out, data);
  if (!out) throw IoError("write failed for '" + path + "'");
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  return read_dataset(in);
}

}  // namespace d2sdk
