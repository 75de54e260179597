#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mpmnet/data.hpp"
#include "mpmnet/model.hpp"
#include "mpmnet/network.hpp"
#include "mpmnet/tape.hpp"

namespace mpmnet::mpm {

// Per-class statistics as live tape nodes (differentiable through features).
struct StatsVars {
    Var mean_x, mean_y, cov_x, cov_y;
    std::int64_t n_x = 0, n_y = 0;
};

// Splits features by +/-1 label and builds per-class mean/cov nodes.
// Each class needs >= 2 samples.
StatsVars class_stats(Tape& t, Var features, const std::vector<int>& labels_pm, double cov_reg, bool biased = true);

// Eq-style Lagrangian: sqrt(a'Sx a) + sqrt(a'Sy a) + lambda*(a'(mx-my) - 1).
Var mpm_loss(Tape& t, const StatsVars& stats, Var a, double lambda, double sqrt_sigma = 1e-12);

// Frozen-statistics variants.
ClassStats compute_class_stats(const Tensor& features, const std::vector<int>& labels_pm, double cov_reg,
                               bool biased = true);
double mpm_loss_value(const ClassStats& stats, const Tensor& a, double lambda, double sqrt_sigma = 0.0);

double solve_b_star(const ClassStats& stats, const Tensor& a);
double alpha_star(const ClassStats& stats, const Tensor& a);
MpmSolution freeze_solution(const ClassStats& stats, const Tensor& a);

// Classical MPM: minimize sqrt(a'Sx a)+sqrt(a'Sy a) s.t. a'(mx-my)=1, by
// gradient descent on the constraint hyperplane (a = a0 + N u).
struct ClassicalResult {
    MpmSolution solution;
    double objective = 0;
    int iterations = 0;
};
ClassicalResult solve_classical_mpm(const Tensor& mean_x, const Tensor& mean_y, const Tensor& cov_x,
                                    const Tensor& cov_y, double tol = 1e-12, int max_iters = 200000);

enum class ConstraintMode { LagrangianDual, FixedPenalty, HardNormalize };
ConstraintMode parse_constraint_mode(const std::string& s);

struct TrainConfig {
    int epochs = 100;
    double lr = 1e-3;
    double momentum = 0.5;  // Nesterov
    std::vector<int> lr_decay_epochs = {50, 80};
    double lr_decay_factor = 0.1;
    std::int64_t batch_size = 128;
    double head_lr = 0;  // (a, lambda) step size; 0 means use lr
    double dual_lr = 1e-3;
    std::uint64_t seed = 0;
    double cov_reg = 1e-6;
    double sqrt_sigma = 1e-12;
    bool biased_cov = true;
    double lambda_init = 0.0;
    ConstraintMode mode = ConstraintMode::LagrangianDual;
    data::StratifyMode stratify = data::StratifyMode::Balanced;
};

struct StepResult {
    double loss = 0;
    double residual = 0;  // a'(mx-my) - 1
};

// Nesterov-momentum SGD buffers for a parameter list.
class Nesterov {
public:
    void step(std::vector<std::pair<std::string, Tensor>>& params, const std::vector<Tensor>& grads, double lr,
              double momentum);

private:
    std::vector<Tensor> velocity_;
};

// End-to-end DeepMPM training: extractor weights by Nesterov SGD, the
// hyperplane and multiplier by an extragradient update of the saddle point.
class DeepMpmTrainer {
public:
    // Network mode. params are the extractor weights.
    DeepMpmTrainer(net::NetworkArch arch, net::ModelParams params, TrainConfig cfg);
    // Feature mode: batches are ready-made feature rows (frozen/identity map).
    explicit DeepMpmTrainer(TrainConfig cfg);

    StepResult step(const Tensor& images, const std::vector<int>& labels_pm);
    StepResult step_features(const Tensor& features, const std::vector<int>& labels_pm);

    const Tensor& hyperplane() const { return a_; }
    double lambda() const { return lambda_; }
    const net::ModelParams& params() const { return params_; }
    double current_lr() const { return lr_; }

    // Per-epoch learning-rate decay hook; epoch is 1-based.
    void end_epoch(int epoch);

    // Features of a dataset under the current extractor (eval mode).
    Tensor features_of(const Tensor& images, std::int64_t batch = 256) const;

    // Full-set statistics -> frozen (a*, b*, alpha*) + stats.
    std::pair<MpmSolution, ClassStats> freeze(const Tensor& images, const std::vector<int>& labels_pm) const;

private:
    StepResult step_impl(Tape& t, Var features, const std::vector<int>& labels_pm, const std::vector<Var>& leaves);
    void init_head(const StatsVars& stats, Tape& t);

    std::optional<net::NetworkArch> arch_;
    net::ModelParams params_;
    TrainConfig cfg_;
    double lr_;
    double head_lr_;
    Tensor a_;
    double lambda_ = 0;
    Nesterov opt_;
    std::mt19937_64 rng_;
};

// Baseline CNN head: softmax cross-entropy with Nesterov SGD.
class SoftmaxTrainer {
public:
    SoftmaxTrainer(net::NetworkArch arch, net::ModelParams params, TrainConfig cfg);

    double step(const Tensor& images, const std::vector<int>& labels_pm);  // returns loss
    void end_epoch(int epoch);
    const net::ModelParams& params() const { return params_; }
    double current_lr() const { return lr_; }

private:
    net::NetworkArch arch_;
    net::ModelParams params_;
    TrainConfig cfg_;
    double lr_;
    Nesterov opt_;
    std::mt19937_64 rng_;
};

}  // namespace mpmnet::mpm
