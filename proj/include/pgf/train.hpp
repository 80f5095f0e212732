#pragma once

// L1-objective training: AdamW with decoupled weight decay, step-decay
// learning-rate schedule, global-norm gradient clipping, and early stopping
// on validation MAE with in-memory best-weight restoration.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "pgf/config.hpp"
#include "pgf/data.hpp"
#include "pgf/metrics.hpp"
#include "pgf/model.hpp"
#include "pgf/tensor.hpp"

namespace pgf {

// Mean absolute error as a differentiable scalar; the subgradient at zero
// residual is zero.
inline Tensor l1_loss(const Tensor& pred, const Tensor& labels) {
    if (pred.numel() == 0) throw value_error("l1_loss: empty batch");
    detail::check_same_shape("l1_loss", pred, labels);
    return mean_all(abs(sub(pred, labels)));
}

inline double steplr(std::size_t epoch, const TrainConfig& cfg) {
    return cfg.lr * std::pow(cfg.gamma, double(epoch / cfg.step_size));
}

// --------------------------------------------------------------------------
// AdamW
// --------------------------------------------------------------------------

class AdamW {
  public:
    AdamW(std::vector<NamedParam> params, const TrainConfig& cfg) : cfg_(cfg) {
        for (auto& np : params) {
            if (!np.tensor.requires_grad()) continue;
            params_.push_back(np);
            m_.emplace_back(np.tensor.numel(), 0.0);
            v_.emplace_back(np.tensor.numel(), 0.0);
        }
    }

    std::size_t num_params() const { return params_.size(); }

    void zero_grad() {
        for (auto& np : params_) np.tensor.zero_grad();
    }

    // Scales all gradients so their global L2 norm is at most max_norm.
    void clip_grad_norm(double max_norm) {
        if (max_norm <= 0.0) return;
        double sq = 0.0;
        for (auto& np : params_) {
            if (!np.tensor.has_grad()) continue;
            for (double g : np.tensor.grad()) sq += g * g;
        }
        double norm = std::sqrt(sq);
        if (norm <= max_norm) return;
        double s = max_norm / norm;
        for (auto& np : params_) {
            if (!np.tensor.has_grad()) continue;
            for (double& g : np.tensor.grad()) g *= s;
        }
    }

    // One AdamW update at learning rate lr. Decay is decoupled: applied to
    // the raw parameter before the adaptive step. Missing grads count as 0.
    void step(double lr) {
        ++t_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (std::size_t pi = 0; pi < params_.size(); ++pi) {
            Tensor& p = params_[pi].tensor;
            double* x = p.data();
            const bool has_g = p.has_grad();
            const double* g = has_g ? p.grad().data() : nullptr;
            auto& m = m_[pi];
            auto& v = v_[pi];
            for (std::size_t i = 0; i < p.numel(); ++i) {
                double gi = has_g ? g[i] : 0.0;
                if (!std::isfinite(gi))
                    throw value_error("adamw: non-finite gradient in " + params_[pi].name);
                if (cfg_.weight_decay != 0.0) x[i] -= lr * cfg_.weight_decay * x[i];
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
                double mhat = m[i] / bc1;
                double vhat = v[i] / bc2;
                x[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
            }
        }
    }

  private:
    TrainConfig cfg_;
    std::vector<NamedParam> params_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

// --------------------------------------------------------------------------
// Early stopping on validation MAE (strict improvement)
// --------------------------------------------------------------------------

struct EarlyStopping {
    std::size_t patience;
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
    std::size_t epochs_since_best = 0;

    explicit EarlyStopping(std::size_t patience_) : patience(patience_) {}

    // Feeds one epoch's validation MAE; returns true when training should
    // stop after this epoch.
    bool update(double val_mae, std::size_t epoch) {
        if (val_mae < best) {
            best = val_mae;
            best_epoch = epoch;
            epochs_since_best = 0;
            return false;
        }
        ++epochs_since_best;
        return epochs_since_best > patience;
    }
};

// --------------------------------------------------------------------------
// fit
// --------------------------------------------------------------------------

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double lr = 0.0;
    MetricsReport val;
    bool has_gate = false;
    std::vector<GateStats> gate;  // batch-averaged per fusion layer

    json to_json() const {
        json g = json::array();
        for (const auto& s : gate)
            g.push_back(json{{"layer", s.layer},
                             {"mean", s.mean},
                             {"std", s.stddev},
                             {"frac_gt_half", s.frac_gt_half}});
        return json{{"epoch", epoch}, {"train_loss", train_loss}, {"lr", lr},
                    {"val", val.to_json()}, {"gate", g}};
    }
};

struct History {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    MetricsReport best_val;
    bool stopped_early = false;
};

struct training_diverged : error {
    History history;
    training_diverged(const std::string& msg, History h) : error(msg), history(std::move(h)) {}
};

// Trains in place; on return the model carries the parameters of the best
// validation epoch. Same seed, same data => bit-identical history and weights.
inline History fit(PgfNet& net, const DatasetSplit& data, const TrainConfig& cfg,
                   const std::string& history_log_path = "") {
    cfg.validate();
    if (data.train.empty() || data.val.empty())
        throw value_error("fit: train and validation splits must be non-empty");

    auto named = net.named_parameters();
    AdamW opt(named, cfg);
    std::vector<Tensor> trainable = net.trainable_parameters();
    std::mt19937_64 shuffle_rng(cfg.seed);
    std::mt19937_64 dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);

    std::ofstream log;
    if (!history_log_path.empty()) {
        log.open(history_log_path);
        if (!log) throw io_error("fit: cannot open history log " + history_log_path);
    }

    EarlyStopping stopper(cfg.patience);
    History hist;
    std::vector<std::vector<double>> best_snapshot;
    auto take_snapshot = [&] {
        best_snapshot.clear();
        for (auto& t : trainable) best_snapshot.push_back(t.vec());
    };

    auto order = identity_order(data.train.size());
    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        double lr = steplr(epoch, cfg);
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double loss_sum = 0.0;
        std::size_t seen = 0;
        std::vector<GateStats> gate_acc;
        std::size_t gate_batches = 0;
        ForwardMode mode{true, &dropout_rng};

        for (std::size_t first = 0; first < data.train.size(); first += cfg.batch_size) {
            std::size_t count = std::min(cfg.batch_size, data.train.size() - first);
            MultimodalBatch batch = make_batch(data.train, order, first, count, data);
            Tensor labels = Tensor::from_vector({count}, batch.labels);

            Tape tape;
            TapeScope scope(tape);
            ModelOutput out = model_forward(net, batch, mode);
            Tensor loss = l1_loss(out.scores, labels);
            double loss_v = loss.item();
            if (!std::isfinite(loss_v))
                throw training_diverged("fit: non-finite training loss at epoch " +
                                            std::to_string(epoch),
                                        hist);
            opt.zero_grad();
            tape.backward(loss);
            opt.clip_grad_norm(cfg.clip_norm);
            opt.step(lr);

            loss_sum += loss_v * double(count);
            seen += count;
            if (out.trace.has_gate) {
                if (gate_acc.empty()) gate_acc = out.trace.layers;
                else
                    for (std::size_t i = 0; i < gate_acc.size(); ++i) {
                        gate_acc[i].mean += out.trace.layers[i].mean;
                        gate_acc[i].stddev += out.trace.layers[i].stddev;
                        gate_acc[i].frac_gt_half += out.trace.layers[i].frac_gt_half;
                    }
                ++gate_batches;
            }
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr;
        rec.train_loss = loss_sum / double(seen);
        rec.val = evaluate(net, data.val, data, cfg.batch_size);
        rec.has_gate = gate_batches > 0;
        if (gate_batches > 0) {
            for (auto& s : gate_acc) {
                s.mean /= double(gate_batches);
                s.stddev /= double(gate_batches);
                s.frac_gt_half /= double(gate_batches);
            }
            rec.gate = gate_acc;
        }
        hist.epochs.push_back(rec);
        if (log) log << rec.to_json().dump() << "\n";

        if (!std::isfinite(rec.val.mae) || rec.val.mae > 1e6)
            throw training_diverged("fit: validation MAE diverged at epoch " + std::to_string(epoch),
                                    hist);

        bool improved = rec.val.mae < stopper.best;
        bool stop = stopper.update(rec.val.mae, epoch);
        if (improved) {
            take_snapshot();
            hist.best_epoch = epoch;
            hist.best_val = rec.val;
        }
        if (stop) {
            hist.stopped_early = true;
            break;
        }
    }

    for (std::size_t i = 0; i < trainable.size(); ++i) trainable[i].vec() = best_snapshot[i];
    return hist;
}

// Writes one CSV record per (epoch, fusion layer). Returns false (header-only
// file) when the history carries no gate statistics, e.g. under w/o Gate.
inline bool export_gate_trace(const History& hist, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw io_error("gate trace: cannot open " + path);
    os << "epoch,layer,gate_mean,gate_std,frac_gt_half\n";
    bool any = false;
    for (const auto& rec : hist.epochs) {
        if (!rec.has_gate) continue;
        for (const auto& s : rec.gate) {
            os << rec.epoch << "," << s.layer << "," << s.mean << "," << s.stddev << ","
               << s.frac_gt_half << "\n";
            any = true;
        }
    }
    return any;
}

}  // namespace pgf
