#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mpmnet/data.hpp"
#include "mpmnet/model.hpp"

namespace mpmnet::attack {

// Batched eval-mode prediction, chunked across threads (threads<=0: hardware).
std::vector<int> predict_batched(const BinaryModel& m, const Tensor& images, std::int64_t batch = 256,
                                 int threads = 0);
double accuracy(const std::vector<int>& pred, const std::vector<int>& cls);

struct FgsmGrid {
    std::vector<double> epsilons;
    static FgsmGrid for_dataset(net::DatasetKind k);
    void validate() const;
};

// Loss whose input gradient drives FGSM on the MPM head.
enum class MpmFgsmLoss { FrozenStats, Margin };
MpmFgsmLoss parse_mpm_fgsm_loss(const std::string& s);

// sign(dJ/dx) per pixel, sign(0) = 0; J is the training loss of the head with
// the attacked example's true class (eval-mode forward).
Tensor loss_grad_signs(const BinaryModel& m, const Tensor& x, const std::vector<int>& cls,
                       MpmFgsmLoss mode = MpmFgsmLoss::FrozenStats, int threads = 0);
// x' = clip(x + eps * sign(dJ/dx), 0, 1).
Tensor fgsm(const BinaryModel& m, const Tensor& x, const std::vector<int>& cls, double eps,
            MpmFgsmLoss mode = MpmFgsmLoss::FrozenStats, int threads = 0);

struct CwConfig {
    int binary_search_steps = 6;
    double c_initial = 1e-3;
    int max_iterations = 500;
    double step_size = 1e-2;
    double kappa = 0.0;
    int threads = 0;
};

// C&W margin f = Z_true - Z_other + kappa; the attack minimizes
// ||x'-x||^2 + c * max(f, 0) in tanh space.
double cw_objective_f(double z0, double z1, int true_class, double kappa);
// Logit pair (v, 0) for the MPM decision value v, so softmax(v,0)=(S(v),1-S(v)).
std::pair<double, double> mpm_logits(double v);

// Anything attackable: a differentiable binary-logit graph plus hard labels.
struct AttackTarget {
    virtual ~AttackTarget() = default;
    virtual Var logits(Tape& t, Var x) const = 0;  // x:[n,...] -> [n,2]
    virtual std::vector<int> predict(const Tensor& x) const = 0;
};

struct ModelTarget : AttackTarget {
    explicit ModelTarget(const BinaryModel& m) : model(&m) {}
    Var logits(Tape& t, Var x) const override;
    std::vector<int> predict(const Tensor& x) const override;
    const BinaryModel* model;
};

// logits (w'x + b, 0) on flattened inputs; analytic oracle for the attacks.
struct LinearTarget : AttackTarget {
    LinearTarget(Tensor w_, double b_) : w(std::move(w_)), b(b_) {}
    Var logits(Tape& t, Var x) const override;
    std::vector<int> predict(const Tensor& x) const override;
    Tensor w;
    double b = 0;
};

// sign(dJ/dx) for the margin loss J = sum_i +/-(z0 - z1) (positive class -1).
Tensor margin_grad_signs(const AttackTarget& target, const Tensor& x, const std::vector<int>& cls, int threads = 0);

struct CwBatchResult {
    Tensor x_adv;  // [n,c,h,w]; the original image where the attack failed
    std::vector<char> success;
    std::vector<double> l2, linf, c_final;
};
CwBatchResult cw_l2(const AttackTarget& target, const Tensor& x, const std::vector<int>& cls, const CwConfig& cfg);
CwBatchResult cw_l2(const BinaryModel& m, const Tensor& x, const std::vector<int>& cls, const CwConfig& cfg);

struct CurveRow {
    std::string source, target;
    double x = 0;  // epsilon (FGSM) or median successful c (C&W)
    double accuracy = 0;
};
struct ExampleRow {
    std::string source;
    std::int64_t index = 0;
    double x = 0;
    bool success = false;
    double l2 = 0, linf = 0;
};
struct AttackReport {
    std::string attack;  // "fgsm" | "cw-l2"
    std::int64_t jointly_correct = 0;
    std::vector<CurveRow> curves;
    std::vector<ExampleRow> examples;
};

struct EvalSet {
    std::vector<std::int64_t> indices;
    Tensor images;
    std::vector<int> cls;  // 0 = positive digit
};
// Test examples both models classify correctly, truncated to max_examples
// (<=0: keep all). Throws EvalError when empty.
EvalSet jointly_correct_set(const BinaryModel& a, const BinaryModel& b, const data::ImageDataset& ds,
                            const data::BinaryTask& task, std::int64_t max_examples = 0, int threads = 0);

// Self- and transfer-attack accuracy curves: each model as gradient source,
// both models as targets, over the epsilon grid.
AttackReport eval_fgsm_grid(const BinaryModel& a, const std::string& name_a, const BinaryModel& b,
                            const std::string& name_b, const EvalSet& set, const FgsmGrid& grid,
                            MpmFgsmLoss mode = MpmFgsmLoss::FrozenStats, int threads = 0);
// 2x2 source/target accuracy matrix under C&W-L2 plus per-example distances.
AttackReport eval_cw(const BinaryModel& a, const std::string& name_a, const BinaryModel& b,
                     const std::string& name_b, const EvalSet& set, const CwConfig& cfg);

struct GapSummary {
    std::int64_t count = 0;  // jointly successful examples
    double mean_a = 0, mean_b = 0;
    double mean_diff = 0, median_diff = 0;  // L2(source a) - L2(source b)
};
// Per-example L2 gap between two attack sources of one report, over examples
// where both attacks succeeded. Throws EvalError on mismatched example sets.
GapSummary perturbation_gap(const AttackReport& rep, const std::string& source_a, const std::string& source_b);

}  // namespace mpmnet::attack
