#include "d2sdk/trainer.hpp"

#include "d2sdk/errors.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>

namespace d2sdk {

namespace {

constexpr std::uint32_t kShuffleStream = 0x7000u;

struct BatchItem {
  int slot;
  std::size_t index;
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

// Pooled: one shuffled list over all source training samples.
// Stratified: per-domain shuffled lists consumed round-robin.
std::vector<BatchItem> epoch_order(const DatasetBundle& bundle, bool stratified, Rng& rng) {
  std::vector<BatchItem> order;
  if (!stratified) {
    for (int k = 0; k < bundle.num_sources(); ++k) {
      for (std::size_t i : bundle.sources[k].train) order.push_back({k, i});
    }
    std::shuffle(order.begin(), order.end(), rng);
    return order;
  }
  std::vector<std::vector<std::size_t>> per(bundle.sources.size());
  for (int k = 0; k < bundle.num_sources(); ++k) {
    per[k] = bundle.sources[k].train;
    std::shuffle(per[k].begin(), per[k].end(), rng);
  }
  std::vector<std::size_t> pos(per.size(), 0);
  for (bool any = true; any;) {
    any = false;
    for (std::size_t k = 0; k < per.size(); ++k) {
      if (pos[k] < per[k].size()) {
        order.push_back({static_cast<int>(k), per[k][pos[k]++]});
        any = true;
      }
    }
  }
  return order;
}

Tensor stack_inputs(std::span<const DomainSample* const> rows) {
  const auto d = static_cast<Index>(rows.front()->x.size());
  Matrix x(static_cast<Index>(rows.size()), d);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (static_cast<Index>(rows[r]->x.size()) != d) throw DimensionError("samples differ in input_dim");
    std::copy(rows[r]->x.begin(), rows[r]->x.end(), x.row(static_cast<Index>(r)).data());
  }
  return Tensor(std::move(x));
}

std::vector<double> evaluate_targets(const Model& model, const DatasetBundle& bundle, int eval_batch,
                                     TargetAccessLog& access, const char* purpose) {
  std::vector<double> acc;
  for (const auto& t : bundle.targets) {
    access.record(purpose, t.samples.size());
    acc.push_back(evaluate_accuracy(model, t.samples, eval_batch));
  }
  return acc;
}

}  // namespace

void OptimConfig::validate() const {
  // lr0 = 0 is accepted so a run can be checked for leaving parameters alone.
  if (!(lr0 >= 0.0)) throw ConfigError("lr0 must be >= 0");
  if (!(decay_at_fraction > 0.0 && decay_at_fraction <= 1.0)) {
    throw ConfigError("decay_at_fraction must lie in (0, 1]");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(decay_factor > 0.0)) throw ConfigError("decay_factor must be > 0");
}

void to_json(nlohmann::json& j, const OptimConfig& c) {
  j = {{"lr0", c.lr0},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"decay_factor", c.decay_factor},
       {"decay_at_fraction", c.decay_at_fraction},
       {"momentum", c.momentum},
       {"weight_decay", c.weight_decay},
       {"stratified", c.stratified}};
}

void from_json(const nlohmann::json& j, OptimConfig& c) {
  OptimConfig d;
  c.lr0 = j.value("lr0", d.lr0);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.decay_factor = j.value("decay_factor", d.decay_factor);
  c.decay_at_fraction = j.value("decay_at_fraction", d.decay_at_fraction);
  c.momentum = j.value("momentum", d.momentum);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.stratified = j.value("stratified", d.stratified);
}

int decay_epoch(const OptimConfig& oc) {
  if (oc.decay_at_fraction >= 1.0) return oc.epochs;
  // Guard against products such as 0.7 * 10 = 7.000000000000001.
  const double boundary = oc.decay_at_fraction * oc.epochs;
  return static_cast<int>(std::ceil(boundary - 1e-9 * std::max(1.0, boundary)));
}

double lr_at(int epoch, const OptimConfig& oc) {
  if (epoch < 0 || epoch >= oc.epochs) {
    throw IndexError("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(oc.epochs) + ")");
  }
  return epoch < decay_epoch(oc) ? oc.lr0 : oc.lr0 * oc.decay_factor;
}

void sgd_step(const std::vector<Tensor>& params, SgdState& state, double lr) {
  if (state.velocity.empty()) {
    for (const auto& p : params) state.velocity.push_back(Matrix::Zero(p.value().rows(), p.value().cols()));
  }
  if (state.velocity.size() != params.size()) {
    throw DimensionError("sgd_step: " + std::to_string(state.velocity.size()) + " momentum buffers for " +
                         std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    TensorData& p = *params[i].data();
    Matrix& v = state.velocity[i];
    if (v.rows() != p.value.rows() || v.cols() != p.value.cols()) {
      throw DimensionError("sgd_step: momentum buffer " + std::to_string(i) + " does not match its parameter");
    }
    if (p.grad.size() != 0 && (p.grad.rows() != v.rows() || p.grad.cols() != v.cols())) {
      throw DimensionError("sgd_step: gradient " + std::to_string(i) + " does not match its parameter");
    }
    v *= state.momentum;
    if (p.grad.size() != 0) v += p.grad;
    if (state.weight_decay != 0.0) v += state.weight_decay * p.value;
    p.value -= lr * v;
    if (p.grad.size() != 0) p.grad.setZero();
  }
}

std::string to_string(SelectionPolicy p) {
  switch (p) {
    case SelectionPolicy::LastEpoch: return kAccessLastEpoch;
    case SelectionPolicy::ValidationBest: return kAccessValidationBest;
    case SelectionPolicy::TestBest: return kAccessTestBest;
  }
  return "?";
}

std::size_t TargetAccessLog::count(const std::string& purpose) const {
  auto it = reads.find(purpose);
  return it == reads.end() ? 0 : it->second;
}

nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j = {{"epoch", r.epoch},
                      {"lr", r.lr},
                      {"loss", {{"total", r.train.total}, {"domain", r.train.domain}, {"global", r.train.global}}},
                      {"val_acc", r.val_accuracy}};
  if (!r.target_accuracy.empty()) j["test_acc"] = r.target_accuracy;
  return j;
}

const PolicyOutcome* TrainResult::outcome(SelectionPolicy p) const {
  for (const auto& o : outcomes) {
    if (o.policy == p) return &o;
  }
  return nullptr;
}

double evaluate_accuracy(const Model& model, std::span<const DomainSample> samples, int eval_batch) {
  if (samples.empty()) return 0.0;
  if (eval_batch < 1) throw ConfigError("eval_batch must be >= 1");
  std::size_t correct = 0;
  std::vector<const DomainSample*> rows;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(eval_batch)) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(eval_batch));
    rows.clear();
    for (std::size_t i = start; i < end; ++i) rows.push_back(&samples[i]);
    Tape tape(false);
    const auto pred = predict(model.forward(tape, stack_inputs(rows), Mode::Inference));
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == rows[i]->y;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

Checkpoint make_train_checkpoint(const Model& model, const TrainState& state, std::string tag, int epoch) {
  Checkpoint c = make_checkpoint(model, std::move(tag), epoch);
  const auto& params = model.params();
  for (std::size_t i = 0; i < state.sgd.velocity.size() && i < params.size(); ++i) {
    const Matrix& v = state.sgd.velocity[i];
    c.momentum.push_back({params[i].name, params[i].tensor.shape(), std::vector<double>(v.data(), v.data() + v.size())});
  }
  std::ostringstream rng;
  rng << state.rng;
  c.rng_state = rng.str();
  return c;
}

TrainResult train_run(Model& model, const DatasetBundle& bundle, const OptimConfig& oc, const TrainOptions& options) {
  oc.validate();
  if (bundle.sources.empty()) throw ConfigError("train_run: bundle has no source domains");
  if (model.config().num_domains != bundle.num_sources()) {
    throw ConfigError("train_run: model has " + std::to_string(model.config().num_domains) + " experts, bundle has " +
                      std::to_string(bundle.num_sources()) + " source domains");
  }
  if (bundle.num_train_samples() == 0) throw ConfigError("train_run: no training samples");

  TrainResult result;
  for (const auto& t : bundle.targets) result.target_names.push_back(t.name);
  const double lambda = model.config().lambda;
  const std::vector<Tensor> params = model.tensors();

  TrainState state;
  state.sgd.momentum = oc.momentum;
  state.sgd.weight_decay = oc.weight_decay;
  state.rng = stream_rng(options.seed, kShuffleStream);

  std::vector<DomainSample> val;
  for (const auto& src : bundle.sources) {
    for (std::size_t i : src.val) val.push_back(src.samples[i]);
  }

  const bool monitor = options.monitor_targets && !bundle.targets.empty();
  std::optional<Checkpoint> val_best, test_best;
  std::vector<double> best_target;
  std::vector<int> best_target_epoch;

  std::vector<const DomainSample*> rows;
  std::vector<int> labels, domains;
  for (int epoch = 0; epoch < oc.epochs; ++epoch) {
    state.epoch = epoch;
    const double lr = lr_at(epoch, oc);
    const auto order = epoch_order(bundle, oc.stratified, state.rng);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    int batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(oc.batch_size), ++batch_no) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(oc.batch_size));
      rows.clear();
      labels.clear();
      domains.clear();
      for (std::size_t i = start; i < end; ++i) {
        const DomainSample& s = bundle.sources[order[i].slot].samples[order[i].index];
        rows.push_back(&s);
        labels.push_back(s.y);
        domains.push_back(order[i].slot);
      }
      Tape tape;
      const auto out = model.forward(tape, stack_inputs(rows), Mode::Train);
      const auto parts = compute_loss(tape, out, labels, domains, lambda);
      if (!std::isfinite(parts.total_value)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " batch " + std::to_string(batch_no) +
                           ": total=" + fmt(parts.total_value) + " domain=" + fmt(parts.domain_value) +
                           " global=" + fmt(parts.global_value));
      }
      tape.backward(parts.total);
      sgd_step(params, state.sgd, lr);
      const double w = static_cast<double>(rows.size()) / static_cast<double>(order.size());
      rec.train.total += w * parts.total_value;
      rec.train.domain += w * parts.domain_value;
      rec.train.global += w * parts.global_value;
    }

    rec.val_accuracy = evaluate_accuracy(model, val, options.eval_batch);
    if (rec.val_accuracy > state.best_val_accuracy) {
      state.best_val_accuracy = rec.val_accuracy;
      state.best_val_epoch = epoch;
      val_best = make_checkpoint(model, kAccessValidationBest, epoch);
    }
    if (monitor) {
      rec.target_accuracy = evaluate_targets(model, bundle, options.eval_batch, result.access, kAccessTestBest);
      if (best_target.empty()) {
        best_target.assign(rec.target_accuracy.size(), -1.0);
        best_target_epoch.assign(rec.target_accuracy.size(), -1);
      }
      for (std::size_t t = 0; t < best_target.size(); ++t) {
        if (rec.target_accuracy[t] > best_target[t]) {
          best_target[t] = rec.target_accuracy[t];
          best_target_epoch[t] = epoch;
          if (t == 0) test_best = make_checkpoint(model, kAccessTestBest, epoch);
        }
      }
    }
    if (options.epoch_log) *options.epoch_log << to_json(rec).dump() << '\n';
    if (options.on_epoch) options.on_epoch(rec);
    result.epochs.push_back(std::move(rec));
  }

  const int last = oc.epochs - 1;
  state.epoch = oc.epochs;
  result.final_checkpoint = make_train_checkpoint(model, state, kAccessLastEpoch, last);

  // Final accuracies of the selected models are measurements, not selection
  // decisions; they are logged under their own purpose.
  PolicyOutcome last_epoch{SelectionPolicy::LastEpoch, {}, {}};
  last_epoch.target_accuracy = evaluate_targets(model, bundle, options.eval_batch, result.access, kAccessEvaluation);
  last_epoch.epochs.assign(bundle.targets.size(), last);
  result.outcomes.push_back(last_epoch);
  result.policy_checkpoints.push_back(make_checkpoint(model, kAccessLastEpoch, last));

  Model selected(model.config());
  load_parameters(selected, *val_best);
  PolicyOutcome vb{SelectionPolicy::ValidationBest, {}, {}};
  vb.target_accuracy = evaluate_targets(selected, bundle, options.eval_batch, result.access, kAccessEvaluation);
  vb.epochs.assign(bundle.targets.size(), val_best->epoch);
  result.outcomes.push_back(vb);
  result.policy_checkpoints.push_back(*val_best);

  if (monitor) {
    result.outcomes.push_back({SelectionPolicy::TestBest, best_target_epoch, best_target});
    result.policy_checkpoints.push_back(*test_best);
  }
  return result;
}

}  // namespace d2sdk
