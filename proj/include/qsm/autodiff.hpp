#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "qsm/dipole.hpp"
#include "qsm/volume.hpp"

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Tape owns every node created while evaluating a model. Tensor is a
// non-owning handle into the tape and is valid only while the tape lives.
// Volume tensors are laid out [C, X, Y, Z] or [N, C, X, Y, Z], z fastest.

namespace qsm::nn {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape &s);
std::string shape_str(const Shape &s);

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad; // empty until something flows into it
    bool requires_grad = false;
    std::vector<Node *> inputs;
    std::function<void(Node &)> backward;

    // Zero-initialised on first use.
    std::vector<double> &grad_buffer();
};

class Tape;

class Tensor {
public:
    Tensor() = default;

    const Shape &shape() const { return node_->shape; }
    std::size_t size() const { return node_->value.size(); }
    const std::vector<double> &value() const { return node_->value; }
    const std::vector<double> &grad() const { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }
    double item() const;
    Tape &tape() const { return *tape_; }
    Node *node() const { return node_; }
    explicit operator bool() const { return node_ != nullptr; }

private:
    friend class Tape;
    Tensor(Tape *t, Node *n) : tape_(t), node_(n) {}
    Tape *tape_ = nullptr;
    Node *node_ = nullptr;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape &) = delete;
    Tape &operator=(const Tape &) = delete;

    Tensor constant(Shape shape, std::vector<double> value);
    Tensor variable(Shape shape, std::vector<double> value);

    // Records an op. `backward` reads self.grad and accumulates into inputs.
    Tensor record(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                  std::function<void(Node &)> backward);

    // Seeds d(loss)/d(loss) = 1 and sweeps nodes in reverse creation order.
    // Throws InvalidInput if loss is not a scalar.
    void backward(const Tensor &loss);

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    std::vector<std::unique_ptr<Node>> nodes_;
};

enum class Padding { Same, Valid };

struct ConvOptions {
    std::size_t stride = 1;
    Padding padding = Padding::Same;
};

// Cross-correlation. x: [C,X,Y,Z] or [N,C,X,Y,Z]; w: [Co,Ci,K,K,K]; b: [Co].
Tensor conv3d(const Tensor &x, const Tensor &w, const Tensor &b, ConvOptions opts = {});
Tensor leaky_relu(const Tensor &x, double alpha);
// Stride-2 average pooling over 2x2x2 blocks; spatial dims must be even.
Tensor downsample2(const Tensor &x);
// Nearest-neighbour x2 upsampling.
Tensor upsample2(const Tensor &x);
Tensor concat_channels(const Tensor &a, const Tensor &b);

Tensor add(const Tensor &a, const Tensor &b);
Tensor sub(const Tensor &a, const Tensor &b);
Tensor scale(const Tensor &x, double c);
// s (a single-element tensor) times x.
Tensor scalar_mul(const Tensor &s, const Tensor &x);
Tensor softplus(const Tensor &x);
Tensor sum(const Tensor &x);
Tensor mean(const Tensor &x);
Tensor abs(const Tensor &x);

// Elementwise product with a fixed mask on the spatial grid, every channel.
Tensor mask_mul(const Tensor &x, const Mask3D &m);
// Mean of |a - b| over mask voxels (and all channels).
Tensor masked_mean_abs_diff(const Tensor &a, const Tensor &b, const Mask3D &m);
// Applies the dipole operator to every channel. The backward pass uses the
// adjoint, which for a real even kernel is the operator itself. The tape
// keeps its own copy of `op`.
Tensor dipole_forward(const Tensor &x, const DipoleOperator &op);

// Zero-pad spatial axes by (before, after) per axis; crop is the inverse.
Tensor pad_spatial(const Tensor &x, std::array<std::size_t, 3> before, std::array<std::size_t, 3> after);
Tensor crop_spatial(const Tensor &x, std::array<std::size_t, 3> begin, std::array<std::size_t, 3> extent);

// Volume <-> [1, X, Y, Z] tensor.
Tensor from_volume(Tape &t, const Volume3D &v, bool requires_grad = false);
Volume3D to_volume(const Tensor &x, VoxelSize voxel = {});

} // namespace qsm::nn
