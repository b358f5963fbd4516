#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dhn/common.hpp"
#include "dhn/linalg.hpp"

namespace dhn {

// Static compute graph over matrix registers. A graph is built once per
// (block size, width) configuration and then evaluated many times with
// different bound leaves. Evaluation supports three passes:
//   forward            value of every register, scalar output
//   backward           reverse sweep; gradients of the output w.r.t. leaves
//   grad-of-gradient   derivative of a scalar function of those leaf
//                      gradients w.r.t. parameters (forward-over-reverse
//                      with a numeric seed), used by losses that penalise
//                      partial derivatives of the network output.

enum class Op {
  kParam,        // trainable tensor held in a ParamStore
  kInput,        // per-eval tensor whose gradient is requested
  kData,         // per-eval tensor, no gradient
  kExtern,       // per-eval trainable tensor (latent codes)
  kMatmulNN,     // A·B
  kMatmulNT,     // A·Bᵀ
  kAdd,
  kSub,
  kAddRow,       // A + broadcast of a 1×n row
  kScale,        // c·A
  kTanh,
  kSoftplus,
  kRelu,
  kSoftmaxRows,  // row-wise softmax, shifted by the row max
  kConcatRows,   // [A; B]
  kPickRow,      // one row of A as 1×n
  kSumSq,        // Σ a_ij² as 1×1
  kConv1d,       // same-padded conv over rows; cols are channels
};

const char* op_name(Op op);

struct Node {
  Op op;
  int a = -1;
  int b = -1;
  int rows = 0;
  int cols = 0;
  double cval = 0.0;  // kScale factor
  int extra = 0;      // leaf slot, store index, row index, or kernel size
  std::string name;   // leaves only
};

// Named parameter tensors shared between graphs built against the same store
// (e.g. two readout heads over a common trunk).
struct ParamStore {
  std::vector<std::string> names;
  std::vector<Mat> values;
  std::unordered_map<std::string, int> index;

  int add(const std::string& name, int rows, int cols);
  int find(const std::string& name) const;
  std::vector<Mat> zeros_like() const;
  std::int64_t scalar_count() const;
};

struct Graph {
  std::vector<Node> nodes;
  int output = -1;
  std::vector<int> param_nodes;   // node.extra = store index
  std::vector<int> input_nodes;   // slot order
  std::vector<int> data_nodes;    // slot order
  std::vector<int> extern_nodes;  // slot order
  std::vector<std::pair<int, std::string>> aux;  // registers read after forward

  const Node& at(int id) const { return nodes[static_cast<size_t>(id)]; }
  bool second_order_safe() const;  // no kinked activations anywhere
  std::vector<Mat> zeros_for(const std::vector<int>& leaf_nodes) const;
};

class GraphBuilder {
 public:
  explicit GraphBuilder(ParamStore* store) : store_(store) {}

  int param(const std::string& name, int rows, int cols);
  int input(const std::string& name, int rows, int cols);
  int data(const std::string& name, int rows, int cols);
  int ext(const std::string& name, int rows, int cols);

  int matmul(int a, int b);
  int matmul_nt(int a, int b);
  int add(int a, int b);
  int sub(int a, int b);
  int add_row(int a, int b);
  int scale(int a, double c);
  int tanh_ew(int a);
  int softplus_ew(int a);
  int relu_ew(int a);
  int softmax_rows(int a);
  int concat_rows(int a, int b);
  int pick_row(int a, int row);
  int sum_sq(int a);
  int conv1d(int a, int w, int ksize);

  void mark_aux(int id, const std::string& name);
  const Node& at(int id) const { return g_.nodes[static_cast<size_t>(id)]; }
  Graph finish(int output_id);

 private:
  int push(Node n);
  const Node& chk(int id, const char* who) const;
  ParamStore* store_;
  Graph g_;
};

// Per-evaluation leaf bindings, in slot order. Pointers must stay valid for
// the duration of the pass.
struct Binding {
  std::vector<const Mat*> input;
  std::vector<const Mat*> data;
  std::vector<const Mat*> ext;
};

struct Workspace {
  std::vector<Mat> val, dot, adj, adjdot;
  void prepare(const Graph& g, bool second_order);
};

// Destinations for accumulated (+=) gradients; null entries are skipped.
// `params` is store-shaped, `ext` and `inputs` are slot-ordered.
struct GradSinks {
  std::vector<Mat>* params = nullptr;
  std::vector<Mat>* ext = nullptr;
  std::vector<Mat>* inputs = nullptr;
};

// Scalar function of the input-leaf gradients g:
//   L = bias + Σ_terms Σ_ij [ w2∘(g−target)² + w1∘g ]
// Null mats drop the corresponding part; several terms may address one slot.
struct GradReduction {
  struct Term {
    int input_slot = 0;
    const Mat* w2 = nullptr;
    const Mat* target = nullptr;
    const Mat* w1 = nullptr;
  };
  std::vector<Term> terms;
  double bias = 0.0;
  // Optional per-term contributions (bias excluded), filled in term order.
  std::vector<double>* term_values = nullptr;
};

// Evaluates every register and returns the scalar output. Throws
// NumericError naming the first offending register if anything is non-finite.
double forward(const Graph& g, const ParamStore& store, const Binding& bind,
               Workspace& ws);

// Reverse sweep after forward(); seeds the output adjoint with 1.
void backward(const Graph& g, const ParamStore& store, const Binding& bind,
              Workspace& ws, const GradSinks& sinks);

// forward + backward restricted to input leaves; returns the output value.
double input_gradients(const Graph& g, const ParamStore& store,
                       const Binding& bind, Workspace& ws,
                       std::vector<Mat>& grad_inputs);

// Full second-order pass: runs forward and backward, forms the reduction
// value L over the input gradients, and accumulates dL/dparams (and
// dL/dextern) into the sinks. Requires a second_order_safe() graph.
double grad_reduction_backward(const Graph& g, const ParamStore& store,
                               const Binding& bind, const GradReduction& red,
                               Workspace& ws, const GradSinks& sinks);

// Value of an aux register captured by the last forward pass.
const Mat& aux_value(const Graph& g, const Workspace& ws,
                     const std::string& name);

}  // namespace dhn
