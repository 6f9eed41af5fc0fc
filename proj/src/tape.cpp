#include "fedgfm/tape.hpp"

#include <cmath>
#include <cstring>
#include <iomanip>
#include <sstream>
#include <utility>

namespace fedgfm {

std::string hex_digest(std::uint64_t h) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

}  // namespace fedgfm

namespace fedgfm::ad {

namespace {

constexpr double kNormClamp = 1e-12;

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ContractViolation(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
}

}  // namespace

const Matrix& GradientMap::at(Handle h) const {
    auto it = grads_.find(h);
    if (it == grads_.end()) throw ContractViolation("gradient requested for untracked handle");
    return it->second;
}

Handle Tape::check(Handle h) const {
    if (h < 0 || h >= static_cast<Handle>(nodes_.size())) throw ContractViolation("invalid tape handle");
    return h;
}

void Tape::check_finite(const Matrix& m, const std::string& op, Handle h) const {
    if (!m.allFinite())
        throw NumericError("non-finite value from op '" + op + "' (node " + std::to_string(h) + ")");
}

Handle Tape::constant(Matrix value) {
    Handle h = static_cast<Handle>(nodes_.size());
    check_finite(value, "constant", h);
    nodes_.push_back({"constant", {}, std::move(value), false, nullptr, nullptr});
    return h;
}

Handle Tape::parameter(Matrix value) {
    Handle h = static_cast<Handle>(nodes_.size());
    check_finite(value, "parameter", h);
    nodes_.push_back({"parameter", {}, std::move(value), true, nullptr, nullptr});
    return h;
}

Handle Tape::record(std::string op, std::vector<Handle> inputs, Compute compute, Backprop backprop) {
    for (Handle h : inputs) check(h);
    Handle h = static_cast<Handle>(nodes_.size());
    Matrix value = compute(*this, inputs);
    check_finite(value, op, h);
    nodes_.push_back({std::move(op), std::move(inputs), std::move(value), false, std::move(compute),
                      std::move(backprop)});
    return h;
}

const Matrix& Tape::value(Handle h) const {
    check(h);
    if (scratch_values_ && (*scratch_set_)[static_cast<std::size_t>(h)])
        return (*scratch_values_)[static_cast<std::size_t>(h)];
    return nodes_[h].value;
}
const std::string& Tape::op_name(Handle h) const { return nodes_[check(h)].op; }
bool Tape::is_parameter(Handle h) const { return nodes_[check(h)].is_param; }

std::vector<Handle> Tape::parameters() const {
    std::vector<Handle> out;
    for (Handle i = 0; i < static_cast<Handle>(nodes_.size()); ++i)
        if (nodes_[i].is_param) out.push_back(i);
    return out;
}

void Tape::record_discrete(const std::int32_t* idx, std::size_t count) {
    discrete_digest_ = fnv1a_bytes(discrete_digest_, idx, count * sizeof(std::int32_t));
}

GradientMap Tape::backward(Handle loss, const std::vector<Handle>& retain) const {
    check(loss);
    const Matrix& lv = nodes_[loss].value;
    if (lv.rows() != 1 || lv.cols() != 1)
        throw ContractViolation("backward: loss handle must be scalar, got " + std::to_string(lv.rows()) +
                                "x" + std::to_string(lv.cols()));

    std::vector<Matrix> grads(nodes_.size());
    std::vector<bool> active(nodes_.size(), false);
    grads[loss] = Matrix::Ones(1, 1);
    active[loss] = true;

    std::function<void(Handle, const Matrix&)> accumulate = [&](Handle h, const Matrix& delta) {
        require_same_shape(nodes_[h].value, delta, "backward accumulate");
        if (!active[h]) {
            grads[h] = delta;
            active[h] = true;
        } else {
            grads[h] += delta;
        }
    };

    for (Handle i = loss; i >= 0; --i) {
        if (!active[i] || !nodes_[i].backprop) continue;
        if (!grads[i].allFinite())
            throw NumericError("non-finite gradient at op '" + nodes_[i].op + "' (node " + std::to_string(i) +
                               ")");
        nodes_[i].backprop(*this, nodes_[i].inputs, grads[i], accumulate);
    }

    GradientMap out;
    for (Handle i = 0; i < static_cast<Handle>(nodes_.size()); ++i) {
        if (!nodes_[i].is_param) continue;
        if (active[i]) {
            if (!grads[i].allFinite())
                throw NumericError("non-finite parameter gradient (node " + std::to_string(i) + ")");
            out.put(i, std::move(grads[i]));
        } else {
            out.put(i, Matrix::Zero(nodes_[i].value.rows(), nodes_[i].value.cols()));
        }
    }
    for (Handle h : retain) {
        check(h);
        if (out.contains(h)) continue;
        out.put(h, active[h] ? grads[h] : Matrix::Zero(nodes_[h].value.rows(), nodes_[h].value.cols()));
    }
    return out;
}

void Tape::replay() {
    for (Handle i = 0; i < static_cast<Handle>(nodes_.size()); ++i) {
        if (!nodes_[i].compute) continue;
        Matrix v = nodes_[i].compute(*this, nodes_[i].inputs);
        check_finite(v, nodes_[i].op, i);
        nodes_[i].value = std::move(v);
    }
}

double Tape::forward_linearized(Handle target, Handle param, Eigen::Index row, Eigen::Index col,
                                double value_at) const {
    check(target);
    check(param);
    if (!nodes_[param].is_param) throw ContractViolation("forward_linearized: handle is not a parameter");
    const Matrix& tv = nodes_[target].value;
    if (tv.rows() != 1 || tv.cols() != 1) throw ContractViolation("forward_linearized: target must be scalar");

    std::vector<Matrix> scratch(nodes_.size());
    std::vector<bool> set(nodes_.size(), false);
    scratch[param] = nodes_[param].value;
    scratch[param](row, col) = value_at;
    set[param] = true;

    struct Guard {
        const Tape* t;
        ~Guard() {
            t->scratch_values_ = nullptr;
            t->scratch_set_ = nullptr;
        }
    } guard{this};
    scratch_values_ = &scratch;
    scratch_set_ = &set;

    for (Handle i = 0; i <= target; ++i) {
        const Node& nd = nodes_[i];
        if (!nd.compute) continue;
        if (nd.op == "stop_gradient") continue;  // frozen at the recorded value
        if (nd.op == "straight_through") {
            // recorded output shifted by the change in z: z + sg[z_q - z]
            scratch[i] = nd.value + (value(nd.inputs[0]) - nodes_[nd.inputs[0]].value);
            set[i] = true;
            continue;
        }
        scratch[i] = nd.compute(*this, nd.inputs);
        set[i] = true;
    }
    return value(target)(0, 0);
}

// ---- primitive ops -------------------------------------------------------

Handle matmul(Tape& t, Handle a, Handle b) {
    if (t.value(a).cols() != t.value(b).rows())
        throw ContractViolation("matmul: inner dimensions " + std::to_string(t.value(a).cols()) + " vs " +
                                std::to_string(t.value(b).rows()));
    return t.record(
        "matmul", {a, b},
        [](const Tape& t, const std::vector<Handle>& in) -> Matrix {
            return t.value(in[0]) * t.value(in[1]);
        },
        [](const Tape& t, const std::vector<Handle>& in, const Matrix& g, const auto& acc) {
            acc(in[0], g * t.value(in[1]).transpose());
            acc(in[1], t.value(in[0]).transpose() * g);
        });
}

Handle transpose(Tape& t, Handle a) {
    return t.record(
        "transpose", {a},
        [](const Tape& t, const std::vector<Handle>& in) -> Matrix { return t.value(in[0]).transpose(); },
        [](const Tape&, const std::vector<Handle>& in, const Matrix& g, const auto& acc) {
            acc(in[0], g.transpose());
        });
}

Handle add(Tape& t, Handle a, Handle b) {
    require_same_shape(t.value(a), t.value(b), "add");
    return t.record(
        "add", {a, b},
        [](const Tape& t, const std::vector<Handle>& in) -> Matrix {
            return t.value(in[0]) + t.value(in[1]);
        },
        [](const Tape&, const std::vector<Handle>& in, const Matrix& g, const auto& acc) {
            acc(in[0], g);
            acc(in[1], g);
        });
}

Handle sub(Tape& t, Handle a, Handle b) {
    require_same_shape(t.value(a), t.value(b), "sub");
    return t.record(
        "sub", {a, b},
        [](const Tape& t, const std::vector<Handle>& in) -> Matrix {
            return t.value(in[0]) - t.value(in[1]);
        },
        [](const Tape&, const std::vector<Handle>& in, const Matrix& g, const auto& acc) {
            acc(in[0], g);
            acc(in[1], Matrix(-g));
        });
}

Handle add_rowvec(Tape& t, Handle a, Handle row) {
    if (t.value(row).rows() != 1 || t.value(row).cols() != t.value(a).cols())
        throw ContractViolation("add_rowvec: bias must be 1x" + std::to_string(t.value(a).cols()));
    return t.record(
        "add_rowvec", {a, row},
        [](const Tape& t, const std::vector<Handle>& in) -> Matrix {
            return t.value(in[0]).rowwise() + t.value(in[1]).row(0);
        },
        [](const Tape&, const std::vector<Handle>& in, const Matrix& g, const auto& acc) {
            acc(in[0], g);
            acc(in[1], Matrix(g.colwise().sum()));
        });
}

Handle hadamard(Tape& t, Handle a, Handle b) {
    require_same_shape(t.value(a), t.value(b), "hadamard");
    return t.record(
        "hadamard", {a, b},
        [](const Tape& t, const std::vector<Handle>& in) -> Matrix {
            return t.value(in[0]).cwiseProduct(t.value(in[1]));
        },
        [](const Tape& t, const std::vector<Handle>& in, const Matrix& g, const auto& acc) {
            acc(in[0], g.cwiseProduct(t.value(in[1])));
            acc(in[1], g.cwiseProduct(t.value(in[0])));
        });
}

Handle scale(Tape& t, Handle a, double c) {
    return t.record(
        "scale", {a},
        [c](const Tape& t, const std::vector<Handle>& in) -> Matrix { return c * t.value(in[0]); },
        [c](const Tape&, const std::vector<Handle>& in, const Matrix& g, const auto& acc) {
            acc(in[0], Matrix(c * g));
        });
}

Handle relu(Tape& t, Handle a) {
    return t.record(
        "relu", {a},
        [](const Tape& t, const std::vector<Handle>& in) -> Matrix { return t.value(in[0]).cwiseMax(0.0); },
        [](const Tape& t, const std::vector<Handle>& in, const Matrix& g, const auto& acc) {
            acc(in[0], g.cwiseProduct((t.value(in[0]).array() > 0.0).cast<double>().matrix()));
        });
}

Handle sigmoid(Tape& t, Handle a) {
    return t.record(
        "sigmoid", {a},
        [](const Tape& t, const std::vector<Handle>& in) -> Matrix {
            return (1.0 / (1.0 + (-t.value(in[0]).array()).exp())).matrix();
        },
        [](const Tape& t, const std::vector<Handle>& in, const Matrix& g, const auto& acc) {
            Eigen::ArrayXXd s = 1.0 / (1.0 + (-t.value(in[0]).array()).exp());
            acc(in[0], Matrix((g.array() * s * (1.0 - s)).matrix()));
        });
}

Handle pow_const(Tape& t, Handle a, double exponent) {
    return t.record(
        "pow_const", {a},
        [exponent](const Tape& t, const std::vector<Handle>& in) -> Matrix {
            return t.value(in[0]).array().pow(exponent).matrix();
        },
        [exponent](const Tape& t, const std::vector<Handle>& in, const Matrix& g, const auto& acc) {
            const auto& x = t.value(in[0]).array();
            Eigen::ArrayXXd d(x.rows(), x.cols());
            for (Eigen::Index i = 0; i < x.rows(); ++i)
                for (Eigen::Index j = 0; j < x.cols(); ++j) {
                    double xv = x(i, j);
                    // flat at the origin for fractional exponents, avoids inf
                    if (xv == 0.0)
                        d(i, j) = (exponent == 1.0) ? 1.0 : 0.0;
                    else
                        d(i, j) = exponent * std::pow(xv, exponent - 1.0);
                }
            acc(in[0], Matrix((g.array() * d).matrix()));
        });
}

Handle row_mean(Tape& t, Handle a) {
    return t.record(
        "row_mean", {a},
        [](const Tape& t, const std::vector<Handle>& in) -> Matrix {
            return t.value(in[0]).colwise().mean();
        },
        [](const Tape& t, const std::vector<Handle>& in, const Matrix& g, const auto& acc) {
            double n = static_cast<double>(t.value(in[0]).rows());
            Matrix d = Matrix::Zero(t.value(in[0]).rows(), t.value(in[0]).cols());
            d.rowwise() += (g.row(0) / n);
            acc(in[0], d);
        });
}

Handle sum_all(Tape& t, Handle a) {
    return t.record(
        "sum_all", {a},
        [](const Tape& t, const std::vector<Handle>& in) -> Matrix {
            Matrix s(1, 1);
            s(0, 0) = t.value(in[0]).sum();
            return s;
        },
        [](const Tape& t, const std::vector<Handle>& in, const Matrix& g, const auto& acc) {
            acc(in[0], Matrix(Matrix::Constant(t.value(in[0]).rows(), t.value(in[0]).cols(), g(0, 0))));
        });
}

Handle mean_all(Tape& t, Handle a) {
    Eigen::Index n = t.value(a).size();
    return scale(t, sum_all(t, a), 1.0 / static_cast<double>(n));
}

Handle softmax_rows(Tape& t, Handle a) {
    return t.record(
        "softmax_rows", {a},
        [](const Tape& t, const std::vector<Handle>& in) -> Matrix {
            const Matrix& x = t.value(in[0]);
            Matrix out(x.rows(), x.cols());
            for (Eigen::Index i = 0; i < x.rows(); ++i) {
                Eigen::ArrayXd e = (x.row(i).array() - x.row(i).maxCoeff()).exp();
                out.row(i) = (e / e.sum()).matrix().transpose();
            }
            return out;
        },
        [](const Tape& t, const std::vector<Handle>& in, const Matrix& g, const auto& acc) {
            const Matrix& x = t.value(in[0]);
            Matrix d(x.rows(), x.cols());
            for (Eigen::Index i = 0; i < x.rows(); ++i) {
                Eigen::ArrayXd e = (x.row(i).array() - x.row(i).maxCoeff()).exp();
                Eigen::ArrayXd s = e / e.sum();
                double dot = (g.row(i).transpose().array() * s).sum();
                d.row(i) = (s * (g.row(i).transpose().array() - dot)).matrix().transpose();
            }
            acc(in[0], d);
        });
}

Handle rowwise_dot(Tape& t, Handle a, Handle b) {
    require_same_shape(t.value(a), t.value(b), "rowwise_dot");
    return t.record(
        "rowwise_dot", {a, b},
        [](const Tape& t, const std::vector<Handle>& in) -> Matrix {
            return t.value(in[0]).cwiseProduct(t.value(in[1])).rowwise().sum();
        },
        [](const Tape& t, const std::vector<Handle>& in, const Matrix& g, const auto& acc) {
            acc(in[0], Matrix((t.value(in[1]).array().colwise() * g.col(0).array()).matrix()));
            acc(in[1], Matrix((t.value(in[0]).array().colwise() * g.col(0).array()).matrix()));
        });
}

Handle rowwise_cosine(Tape& t, Handle a, Handle b) {
    require_same_shape(t.value(a), t.value(b), "rowwise_cosine");
    return t.record(
        "rowwise_cosine", {a, b},
        [](const Tape& t, const std::vector<Handle>& in) -> Matrix {
            const Matrix &x = t.value(in[0]), &y = t.value(in[1]);
            Matrix out(x.rows(), 1);
            for (Eigen::Index i = 0; i < x.rows(); ++i) {
                double nx = std::max(x.row(i).norm(), kNormClamp);
                double ny = std::max(y.row(i).norm(), kNormClamp);
                out(i, 0) = x.row(i).dot(y.row(i)) / (nx * ny);
            }
            return out;
        },
        [](const Tape& t, const std::vector<Handle>& in, const Matrix& g, const auto& acc) {
            const Matrix &x = t.value(in[0]), &y = t.value(in[1]);
            Matrix dx = Matrix::Zero(x.rows(), x.cols());
            Matrix dy = Matrix::Zero(y.rows(), y.cols());
            for (Eigen::Index i = 0; i < x.rows(); ++i) {
                double nxr = x.row(i).norm(), nyr = y.row(i).norm();
                // clamped rows sit on the flat part of the clamp: no gradient
                if (nxr < kNormClamp || nyr < kNormClamp) continue;
                double c = x.row(i).dot(y.row(i)) / (nxr * nyr);
                dx.row(i) = g(i, 0) * (y.row(i) / (nxr * nyr) - c * x.row(i) / (nxr * nxr));
                dy.row(i) = g(i, 0) * (x.row(i) / (nxr * nyr) - c * y.row(i) / (nyr * nyr));
            }
            acc(in[0], dx);
            acc(in[1], dy);
        });
}

Handle concat_cols(Tape& t, const std::vector<Handle>& parts) {
    if (parts.empty()) throw ContractViolation("concat_cols: empty input");
    Eigen::Index rows = t.value(parts[0]).rows();
    for (Handle h : parts)
        if (t.value(h).rows() != rows) throw ContractViolation("concat_cols: row mismatch");
    return t.record(
        "concat_cols", parts,
        [](const Tape& t, const std::vector<Handle>& in) -> Matrix {
            Eigen::Index rows = t.value(in[0]).rows(), cols = 0;
            for (Handle h : in) cols += t.value(h).cols();
            Matrix out(rows, cols);
            Eigen::Index at = 0;
            for (Handle h : in) {
                out.middleCols(at, t.value(h).cols()) = t.value(h);
                at += t.value(h).cols();
            }
            return out;
        },
        [](const Tape& t, const std::vector<Handle>& in, const Matrix& g, const auto& acc) {
            Eigen::Index at = 0;
            for (Handle h : in) {
                acc(h, g.middleCols(at, t.value(h).cols()));
                at += t.value(h).cols();
            }
        });
}

Handle gather_rows(Tape& t, Handle a, std::vector<std::int32_t> idx) {
    for (std::int32_t i : idx)
        if (i < 0 || i >= t.value(a).rows()) throw ContractViolation("gather_rows: index out of range");
    auto shared = std::make_shared<const std::vector<std::int32_t>>(std::move(idx));
    return t.record(
        "gather_rows", {a},
        [shared](const Tape& t, const std::vector<Handle>& in) -> Matrix {
            const Matrix& x = t.value(in[0]);
            Matrix out(static_cast<Eigen::Index>(shared->size()), x.cols());
            for (std::size_t i = 0; i < shared->size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row((*shared)[i]);
            return out;
        },
        [shared](const Tape& t, const std::vector<Handle>& in, const Matrix& g, const auto& acc) {
            const Matrix& x = t.value(in[0]);
            Matrix d = Matrix::Zero(x.rows(), x.cols());
            for (std::size_t i = 0; i < shared->size(); ++i)
                d.row((*shared)[i]) += g.row(static_cast<Eigen::Index>(i));
            acc(in[0], d);
        });
}

Handle stop_gradient(Tape& t, Handle a) {
    return t.record(
        "stop_gradient", {a},
        [](const Tape& t, const std::vector<Handle>& in) -> Matrix { return t.value(in[0]); },
        [](const Tape&, const std::vector<Handle>&, const Matrix&, const auto&) {});
}

Handle straight_through(Tape& t, Handle z, Handle z_q) {
    require_same_shape(t.value(z), t.value(z_q), "straight_through");
    return t.record(
        "straight_through", {z, z_q},
        [](const Tape& t, const std::vector<Handle>& in) -> Matrix { return t.value(in[1]); },
        [](const Tape&, const std::vector<Handle>& in, const Matrix& g, const auto& acc) {
            acc(in[0], g);  // identity route to z; quantized branch gets nothing
        });
}

// ---- finite-difference oracle --------------------------------------------

FdResult finite_difference_check(
    const std::function<Handle(Tape&, const std::vector<Handle>&)>& build,
    const std::vector<Matrix>& params, double eps) {
    if (eps <= 0.0) throw ContractViolation("finite_difference_check: eps must be positive");

    struct Eval {
        double loss;
        std::uint64_t digest;
    };
    auto eval = [&](const std::vector<Matrix>& p) -> Eval {
        Tape tape;
        std::vector<Handle> handles;
        handles.reserve(p.size());
        for (const Matrix& m : p) handles.push_back(tape.parameter(m));
        Handle loss = build(tape, handles);
        const Matrix& lv = tape.value(loss);
        if (lv.rows() != 1 || lv.cols() != 1)
            throw ContractViolation("finite_difference_check: loss must be scalar");
        return {lv(0, 0), tape.discrete_digest()};
    };

    Eval base = eval(params);
    Eval again = eval(params);
    if (std::memcmp(&base.loss, &again.loss, sizeof(double)) != 0 || base.digest != again.digest)
        throw ContractViolation("finite_difference_check: function is not deterministic");

    // analytic gradients once, at the base point
    Tape tape;
    std::vector<Handle> handles;
    for (const Matrix& m : params) handles.push_back(tape.parameter(m));
    Handle loss = build(tape, handles);
    GradientMap grads = tape.backward(loss);

    const bool has_discrete = base.digest != fnv1a_init();

    FdResult result;
    std::vector<Matrix> work = params;
    for (std::size_t m = 0; m < params.size(); ++m) {
        const Matrix& g = grads.at(handles[m]);
        for (Eigen::Index r = 0; r < params[m].rows(); ++r) {
            for (Eigen::Index c = 0; c < params[m].cols(); ++c) {
                double saved = work[m](r, c);
                if (has_discrete) {
                    // fresh rebuilds re-run the discrete selections; a digest
                    // change means the perturbation crossed a boundary
                    work[m](r, c) = saved + eps;
                    std::uint64_t dplus = eval(work).digest;
                    work[m](r, c) = saved - eps;
                    std::uint64_t dminus = eval(work).digest;
                    work[m](r, c) = saved;
                    if (dplus != base.digest || dminus != base.digest) {
                        result.excluded.push_back({static_cast<int>(m), r, c});
                        continue;
                    }
                }
                double lp = tape.forward_linearized(loss, handles[m], r, c, saved + eps);
                double lm = tape.forward_linearized(loss, handles[m], r, c, saved - eps);
                double fd = (lp - lm) / (2.0 * eps);
                result.max_rel_error = std::max(result.max_rel_error, relative_error(fd, g(r, c)));
            }
        }
    }
    return result;
}

}  // namespace fedgfm::ad
