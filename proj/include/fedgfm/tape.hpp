#pragma once

#include "fedgfm/common.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace fedgfm::ad {

using fedgfm::Matrix;
using Handle = std::int32_t;

class Tape;

// Gradients keyed by tape handle; every marked parameter gets an entry
// (all-zero when the parameter never reached the loss).
class GradientMap {
public:
    const Matrix& at(Handle h) const;
    bool contains(Handle h) const { return grads_.count(h) != 0; }
    void put(Handle h, Matrix g) { grads_[h] = std::move(g); }
    std::size_t size() const { return grads_.size(); }

private:
    std::unordered_map<Handle, Matrix> grads_;
};

// Recorded forward computation. Nodes are appended in execution order, so the
// tape is topologically ordered by construction. Values are immutable once
// recorded; replay() recomputes every derived node through the same compute
// callback that produced it.
class Tape {
public:
    using Compute = std::function<Matrix(const Tape&, const std::vector<Handle>&)>;
    // Accumulates input gradients given the output gradient.
    using Backprop =
        std::function<void(const Tape&, const std::vector<Handle>&, const Matrix& out_grad,
                           const std::function<void(Handle, const Matrix&)>& accumulate)>;

    Handle constant(Matrix value);
    Handle parameter(Matrix value);
    Handle record(std::string op, std::vector<Handle> inputs, Compute compute, Backprop backprop);

    const Matrix& value(Handle h) const;
    const std::string& op_name(Handle h) const;
    bool is_parameter(Handle h) const;
    std::vector<Handle> parameters() const;
    Eigen::Index node_count() const { return static_cast<Eigen::Index>(nodes_.size()); }

    GradientMap backward(Handle loss) const { return backward(loss, {}); }
    GradientMap backward(Handle loss, const std::vector<Handle>& retain) const;

    // Recomputes all derived values in order; forward determinism check.
    void replay();

    // Forward value of `target` after substituting one parameter coordinate,
    // with non-differentiable edges linearized at the recorded base point:
    // stop_gradient keeps its recorded value, straight_through shifts its
    // recorded output by the change in z. This is the function the backward
    // pass actually differentiates, and what the finite-difference oracle
    // probes. The tape itself is left untouched.
    double forward_linearized(Handle target, Handle param, Eigen::Index row, Eigen::Index col,
                              double value) const;

    // Digest over discrete selections (quantization indices) made while
    // recording; lets the finite-difference harness detect boundary crossings.
    std::uint64_t discrete_digest() const { return discrete_digest_; }
    void record_discrete(const std::int32_t* idx, std::size_t count);

    int cosine_fallback_count = 0;  // zero-norm rows routed to L2 retrieval

private:
    struct Node {
        std::string op;
        std::vector<Handle> inputs;
        Matrix value;
        bool is_param = false;
        Compute compute;    // null for leaves
        Backprop backprop;  // null for leaves and stop-gradient edges
    };

    Handle check(Handle h) const;
    void check_finite(const Matrix& m, const std::string& op, Handle h) const;

    std::vector<Node> nodes_;
    std::uint64_t discrete_digest_ = fnv1a_init();

    // Served by value() during forward_linearized; a tape is worker-confined,
    // so the mutable override is never contended.
    mutable const std::vector<Matrix>* scratch_values_ = nullptr;
    mutable const std::vector<bool>* scratch_set_ = nullptr;
};

// ---- primitive ops -------------------------------------------------------

Handle matmul(Tape& t, Handle a, Handle b);
Handle transpose(Tape& t, Handle a);
Handle add(Tape& t, Handle a, Handle b);
Handle sub(Tape& t, Handle a, Handle b);
Handle add_rowvec(Tape& t, Handle a, Handle row);
Handle hadamard(Tape& t, Handle a, Handle b);
Handle scale(Tape& t, Handle a, double c);
Handle relu(Tape& t, Handle a);
Handle sigmoid(Tape& t, Handle a);
Handle pow_const(Tape& t, Handle a, double exponent);
Handle row_mean(Tape& t, Handle a);      // nxd -> 1xd
Handle sum_all(Tape& t, Handle a);       // -> 1x1
Handle mean_all(Tape& t, Handle a);      // -> 1x1
Handle softmax_rows(Tape& t, Handle a);  // max-subtracted, rows sum to 1
Handle rowwise_dot(Tape& t, Handle a, Handle b);     // nxd, nxd -> nx1
Handle rowwise_cosine(Tape& t, Handle a, Handle b);  // denominators clamped at 1e-12
Handle concat_cols(Tape& t, const std::vector<Handle>& parts);
Handle gather_rows(Tape& t, Handle a, std::vector<std::int32_t> idx);
Handle stop_gradient(Tape& t, Handle a);
Handle straight_through(Tape& t, Handle z, Handle z_q);

// ---- finite-difference oracle --------------------------------------------

struct FdExclusion {
    int param;  // position in the params list
    Eigen::Index row, col;
};

struct FdResult {
    double max_rel_error = 0.0;
    std::vector<FdExclusion> excluded;  // coordinates skipped at quantization boundaries
};

// Central differences against backward(). `build` receives a fresh tape plus
// parameter handles (in params order) and returns the scalar loss handle.
// Throws ContractViolation if two evaluations at the base point disagree.
FdResult finite_difference_check(
    const std::function<Handle(Tape&, const std::vector<Handle>&)>& build,
    const std::vector<Matrix>& params, double eps);

}  // namespace fedgfm::ad
