#include "dhn/graph.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dhn {
namespace {

double sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

void acc_into(Mat& dst, const Mat& src, const char* who) {
  if (!dst.same_shape(src)) {
    throw ConfigError(std::string(who) + ": gradient sink has wrong shape");
  }
  for (size_t i = 0; i < dst.a.size(); ++i) dst.a[i] += src.a[i];
}

// C(t,o) = sum_{k,ci} A(t+k-pad, ci) * W(k*Cin+ci, o), zero outside [0,T)
void conv_fwd(Mat& C, const Mat& A, const Mat& W, int ksize, bool acc) {
  const int T = A.rows, cin = A.cols, cout = W.cols;
  const int pad = (ksize - 1) / 2;
  if (!acc) C.set_zero();
  for (int t = 0; t < T; ++t) {
    for (int k = 0; k < ksize; ++k) {
      const int tau = t + k - pad;
      if (tau < 0 || tau >= T) continue;
      const double* arow = A.row(tau);
      const double* wrow = W.row(k * cin);
      double* crow = C.row(t);
      for (int ci = 0; ci < cin; ++ci) {
        const double av = arow[ci];
        const double* wr = wrow + ci * cout;
        for (int o = 0; o < cout; ++o) crow[o] += av * wr[o];
      }
    }
  }
}

void conv_back_data(Mat& Abar, const Mat& Cbar, const Mat& W, int ksize) {
  const int T = Abar.rows, cin = Abar.cols, cout = W.cols;
  const int pad = (ksize - 1) / 2;
  for (int t = 0; t < T; ++t) {
    const double* crow = Cbar.row(t);
    for (int k = 0; k < ksize; ++k) {
      const int tau = t + k - pad;
      if (tau < 0 || tau >= T) continue;
      double* arow = Abar.row(tau);
      const double* wrow = W.row(k * cin);
      for (int ci = 0; ci < cin; ++ci) {
        const double* wr = wrow + ci * cout;
        double s = 0.0;
        for (int o = 0; o < cout; ++o) s += crow[o] * wr[o];
        arow[ci] += s;
      }
    }
  }
}

void conv_back_w(Mat& Wbar, const Mat& Cbar, const Mat& A, int ksize) {
  const int T = A.rows, cin = A.cols, cout = Wbar.cols;
  const int pad = (ksize - 1) / 2;
  for (int t = 0; t < T; ++t) {
    const double* crow = Cbar.row(t);
    for (int k = 0; k < ksize; ++k) {
      const int tau = t + k - pad;
      if (tau < 0 || tau >= T) continue;
      const double* arow = A.row(tau);
      double* wrow = Wbar.row(k * cin);
      for (int ci = 0; ci < cin; ++ci) {
        const double av = arow[ci];
        double* wr = wrow + ci * cout;
        for (int o = 0; o < cout; ++o) wr[o] += av * crow[o];
      }
    }
  }
}

void check_bind(const Graph& g, const ParamStore& store, const Binding& bind) {
  auto check_group = [&](const std::vector<int>& nodes,
                         const std::vector<const Mat*>& ptrs,
                         const char* kind) {
    if (ptrs.size() != nodes.size()) {
      std::ostringstream os;
      os << kind << " binding count " << ptrs.size() << " != " << nodes.size()
         << " leaves in graph";
      throw ConfigError(os.str());
    }
    for (size_t i = 0; i < nodes.size(); ++i) {
      const Node& n = g.at(nodes[i]);
      if (ptrs[i] == nullptr) {
        throw ConfigError(std::string(kind) + " leaf '" + n.name +
                          "' is unbound");
      }
      if (ptrs[i]->rows != n.rows || ptrs[i]->cols != n.cols) {
        std::ostringstream os;
        os << kind << " leaf '" << n.name << "' expects " << n.rows << "x"
           << n.cols << ", bound " << ptrs[i]->rows << "x" << ptrs[i]->cols;
        throw ConfigError(os.str());
      }
    }
  };
  check_group(g.input_nodes, bind.input, "input");
  check_group(g.data_nodes, bind.data, "data");
  check_group(g.extern_nodes, bind.ext, "extern");
  for (int id : g.param_nodes) {
    const Node& n = g.at(id);
    const int si = n.extra;
    if (si < 0 || si >= static_cast<int>(store.values.size()) ||
        store.values[static_cast<size_t>(si)].rows != n.rows ||
        store.values[static_cast<size_t>(si)].cols != n.cols) {
      throw ConfigError("parameter '" + n.name +
                        "' missing from store or has wrong shape");
    }
  }
}

void zero_all(std::vector<Mat>& ms) {
  for (Mat& m : ms) m.set_zero();
}

[[noreturn]] void throw_nonfinite(const Graph& g, const Workspace& ws) {
  for (size_t id = 0; id < g.nodes.size(); ++id) {
    if (!ws.val[id].all_finite()) {
      const Node& n = g.nodes[id];
      std::ostringstream os;
      os << "non-finite values at register " << id << " (" << op_name(n.op);
      if (!n.name.empty()) os << " '" << n.name << "'";
      os << ")";
      throw NumericError(os.str());
    }
  }
  throw NumericError("non-finite output with no offending register found");
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kParam: return "param";
    case Op::kInput: return "input";
    case Op::kData: return "data";
    case Op::kExtern: return "extern";
    case Op::kMatmulNN: return "matmul";
    case Op::kMatmulNT: return "matmul_nt";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kAddRow: return "add_row";
    case Op::kScale: return "scale";
    case Op::kTanh: return "tanh";
    case Op::kSoftplus: return "softplus";
    case Op::kRelu: return "relu";
    case Op::kSoftmaxRows: return "softmax_rows";
    case Op::kConcatRows: return "concat_rows";
    case Op::kPickRow: return "pick_row";
    case Op::kSumSq: return "sum_sq";
    case Op::kConv1d: return "conv1d";
  }
  return "?";
}

int ParamStore::add(const std::string& name, int rows, int cols) {
  auto it = index.find(name);
  if (it != index.end()) {
    const Mat& m = values[static_cast<size_t>(it->second)];
    if (m.rows != rows || m.cols != cols) {
      throw ConfigError("parameter '" + name + "' re-registered with shape " +
                        std::to_string(rows) + "x" + std::to_string(cols));
    }
    return it->second;
  }
  const int id = static_cast<int>(values.size());
  names.push_back(name);
  values.emplace_back();
  values.back().resize(rows, cols);
  index.emplace(name, id);
  return id;
}

int ParamStore::find(const std::string& name) const {
  auto it = index.find(name);
  return it == index.end() ? -1 : it->second;
}

std::vector<Mat> ParamStore::zeros_like() const {
  std::vector<Mat> out(values.size());
  for (size_t i = 0; i < values.size(); ++i) {
    out[i].resize(values[i].rows, values[i].cols);
  }
  return out;
}

std::int64_t ParamStore::scalar_count() const {
  std::int64_t n = 0;
  for (const Mat& m : values) n += static_cast<std::int64_t>(m.a.size());
  return n;
}

bool Graph::second_order_safe() const {
  for (const Node& n : nodes) {
    if (n.op == Op::kRelu) return false;
  }
  return true;
}

std::vector<Mat> Graph::zeros_for(const std::vector<int>& leaf_nodes) const {
  std::vector<Mat> out(leaf_nodes.size());
  for (size_t i = 0; i < leaf_nodes.size(); ++i) {
    const Node& n = at(leaf_nodes[i]);
    out[i].resize(n.rows, n.cols);
  }
  return out;
}

int GraphBuilder::push(Node n) {
  const int id = static_cast<int>(g_.nodes.size());
  g_.nodes.push_back(std::move(n));
  return id;
}

const Node& GraphBuilder::chk(int id, const char* who) const {
  if (id < 0 || id >= static_cast<int>(g_.nodes.size())) {
    throw ConfigError(std::string(who) + ": operand id out of range");
  }
  return g_.nodes[static_cast<size_t>(id)];
}

int GraphBuilder::param(const std::string& name, int rows, int cols) {
  Node n;
  n.op = Op::kParam;
  n.rows = rows;
  n.cols = cols;
  n.extra = store_->add(name, rows, cols);
  n.name = name;
  const int id = push(std::move(n));
  g_.param_nodes.push_back(id);
  return id;
}

int GraphBuilder::input(const std::string& name, int rows, int cols) {
  Node n;
  n.op = Op::kInput;
  n.rows = rows;
  n.cols = cols;
  n.extra = static_cast<int>(g_.input_nodes.size());
  n.name = name;
  const int id = push(std::move(n));
  g_.input_nodes.push_back(id);
  return id;
}

int GraphBuilder::data(const std::string& name, int rows, int cols) {
  Node n;
  n.op = Op::kData;
  n.rows = rows;
  n.cols = cols;
  n.extra = static_cast<int>(g_.data_nodes.size());
  n.name = name;
  const int id = push(std::move(n));
  g_.data_nodes.push_back(id);
  return id;
}

int GraphBuilder::ext(const std::string& name, int rows, int cols) {
  Node n;
  n.op = Op::kExtern;
  n.rows = rows;
  n.cols = cols;
  n.extra = static_cast<int>(g_.extern_nodes.size());
  n.name = name;
  const int id = push(std::move(n));
  g_.extern_nodes.push_back(id);
  return id;
}

int GraphBuilder::matmul(int a, int b) {
  const Node& na = chk(a, "matmul");
  const Node& nb = chk(b, "matmul");
  if (na.cols != nb.rows) {
    throw ConfigError("matmul: inner dimensions " + std::to_string(na.cols) +
                      " vs " + std::to_string(nb.rows));
  }
  Node n;
  n.op = Op::kMatmulNN;
  n.a = a;
  n.b = b;
  n.rows = na.rows;
  n.cols = nb.cols;
  return push(std::move(n));
}

int GraphBuilder::matmul_nt(int a, int b) {
  const Node& na = chk(a, "matmul_nt");
  const Node& nb = chk(b, "matmul_nt");
  if (na.cols != nb.cols) {
    throw ConfigError("matmul_nt: inner dimensions " + std::to_string(na.cols) +
                      " vs " + std::to_string(nb.cols));
  }
  Node n;
  n.op = Op::kMatmulNT;
  n.a = a;
  n.b = b;
  n.rows = na.rows;
  n.cols = nb.rows;
  return push(std::move(n));
}

int GraphBuilder::add(int a, int b) {
  const Node& na = chk(a, "add");
  const Node& nb = chk(b, "add");
  if (na.rows != nb.rows || na.cols != nb.cols) {
    throw ConfigError("add: shape mismatch");
  }
  Node n;
  n.op = Op::kAdd;
  n.a = a;
  n.b = b;
  n.rows = na.rows;
  n.cols = na.cols;
  return push(std::move(n));
}

int GraphBuilder::sub(int a, int b) {
  const Node& na = chk(a, "sub");
  const Node& nb = chk(b, "sub");
  if (na.rows != nb.rows || na.cols != nb.cols) {
    throw ConfigError("sub: shape mismatch");
  }
  Node n;
  n.op = Op::kSub;
  n.a = a;
  n.b = b;
  n.rows = na.rows;
  n.cols = na.cols;
  return push(std::move(n));
}

int GraphBuilder::add_row(int a, int b) {
  const Node& na = chk(a, "add_row");
  const Node& nb = chk(b, "add_row");
  if (nb.rows != 1 || nb.cols != na.cols) {
    throw ConfigError("add_row: second operand must be 1x" +
                      std::to_string(na.cols));
  }
  Node n;
  n.op = Op::kAddRow;
  n.a = a;
  n.b = b;
  n.rows = na.rows;
  n.cols = na.cols;
  return push(std::move(n));
}

int GraphBuilder::scale(int a, double c) {
  const Node& na = chk(a, "scale");
  Node n;
  n.op = Op::kScale;
  n.a = a;
  n.rows = na.rows;
  n.cols = na.cols;
  n.cval = c;
  return push(std::move(n));
}

int GraphBuilder::tanh_ew(int a) {
  const Node& na = chk(a, "tanh");
  Node n;
  n.op = Op::kTanh;
  n.a = a;
  n.rows = na.rows;
  n.cols = na.cols;
  return push(std::move(n));
}

int GraphBuilder::softplus_ew(int a) {
  const Node& na = chk(a, "softplus");
  Node n;
  n.op = Op::kSoftplus;
  n.a = a;
  n.rows = na.rows;
  n.cols = na.cols;
  return push(std::move(n));
}

int GraphBuilder::relu_ew(int a) {
  const Node& na = chk(a, "relu");
  Node n;
  n.op = Op::kRelu;
  n.a = a;
  n.rows = na.rows;
  n.cols = na.cols;
  return push(std::move(n));
}

int GraphBuilder::softmax_rows(int a) {
  const Node& na = chk(a, "softmax_rows");
  Node n;
  n.op = Op::kSoftmaxRows;
  n.a = a;
  n.rows = na.rows;
  n.cols = na.cols;
  return push(std::move(n));
}

int GraphBuilder::concat_rows(int a, int b) {
  const Node& na = chk(a, "concat_rows");
  const Node& nb = chk(b, "concat_rows");
  if (na.cols != nb.cols) {
    throw ConfigError("concat_rows: column mismatch");
  }
  Node n;
  n.op = Op::kConcatRows;
  n.a = a;
  n.b = b;
  n.rows = na.rows + nb.rows;
  n.cols = na.cols;
  return push(std::move(n));
}

int GraphBuilder::pick_row(int a, int row) {
  const Node& na = chk(a, "pick_row");
  if (row < 0 || row >= na.rows) {
    throw ConfigError("pick_row: row " + std::to_string(row) +
                      " out of range for " + std::to_string(na.rows) + " rows");
  }
  Node n;
  n.op = Op::kPickRow;
  n.a = a;
  n.rows = 1;
  n.cols = na.cols;
  n.extra = row;
  return push(std::move(n));
}

int GraphBuilder::sum_sq(int a) {
  chk(a, "sum_sq");
  Node n;
  n.op = Op::kSumSq;
  n.a = a;
  n.rows = 1;
  n.cols = 1;
  return push(std::move(n));
}

int GraphBuilder::conv1d(int a, int w, int ksize) {
  const Node& na = chk(a, "conv1d");
  const Node& nw = chk(w, "conv1d");
  if (ksize < 1 || ksize % 2 == 0) {
    throw ConfigError("conv1d: kernel size must be odd and positive");
  }
  if (nw.rows != ksize * na.cols) {
    throw ConfigError("conv1d: weight rows " + std::to_string(nw.rows) +
                      " != ksize*channels " + std::to_string(ksize * na.cols));
  }
  Node n;
  n.op = Op::kConv1d;
  n.a = a;
  n.b = w;
  n.rows = na.rows;
  n.cols = nw.cols;
  n.extra = ksize;
  return push(std::move(n));
}

void GraphBuilder::mark_aux(int id, const std::string& name) {
  chk(id, "mark_aux");
  g_.aux.emplace_back(id, name);
}

Graph GraphBuilder::finish(int output_id) {
  const Node& out = chk(output_id, "finish");
  if (out.rows != 1 || out.cols != 1) {
    throw ConfigError("graph output must be a 1x1 register");
  }
  g_.output = output_id;
  return std::move(g_);
}

void Workspace::prepare(const Graph& g, bool second_order) {
  const size_t n = g.nodes.size();
  val.resize(n);
  adj.resize(n);
  for (size_t i = 0; i < n; ++i) {
    val[i].resize(g.nodes[i].rows, g.nodes[i].cols);
    adj[i].resize(g.nodes[i].rows, g.nodes[i].cols);
  }
  if (second_order) {
    dot.resize(n);
    adjdot.resize(n);
    for (size_t i = 0; i < n; ++i) {
      dot[i].resize(g.nodes[i].rows, g.nodes[i].cols);
      adjdot[i].resize(g.nodes[i].rows, g.nodes[i].cols);
    }
  }
}

double forward(const Graph& g, const ParamStore& store, const Binding& bind,
               Workspace& ws) {
  check_bind(g, store, bind);
  if (ws.val.size() != g.nodes.size()) {
    throw ConfigError("workspace not prepared for this graph");
  }
  const size_t n = g.nodes.size();
  for (size_t id = 0; id < n; ++id) {
    const Node& nd = g.nodes[id];
    Mat& M = ws.val[id];
    switch (nd.op) {
      case Op::kParam:
        M.a = store.values[static_cast<size_t>(nd.extra)].a;
        break;
      case Op::kInput:
        M.a = bind.input[static_cast<size_t>(nd.extra)]->a;
        break;
      case Op::kData:
        M.a = bind.data[static_cast<size_t>(nd.extra)]->a;
        break;
      case Op::kExtern:
        M.a = bind.ext[static_cast<size_t>(nd.extra)]->a;
        break;
      case Op::kMatmulNN:
        mm_nn(M, ws.val[nd.a], ws.val[nd.b], false);
        break;
      case Op::kMatmulNT:
        mm_nt(M, ws.val[nd.a], ws.val[nd.b], false);
        break;
      case Op::kAdd: {
        const Mat& A = ws.val[nd.a];
        const Mat& B = ws.val[nd.b];
        for (size_t i = 0; i < M.a.size(); ++i) M.a[i] = A.a[i] + B.a[i];
        break;
      }
      case Op::kSub: {
        const Mat& A = ws.val[nd.a];
        const Mat& B = ws.val[nd.b];
        for (size_t i = 0; i < M.a.size(); ++i) M.a[i] = A.a[i] - B.a[i];
        break;
      }
      case Op::kAddRow: {
        const Mat& A = ws.val[nd.a];
        const Mat& B = ws.val[nd.b];
        for (int i = 0; i < M.rows; ++i) {
          const double* ar = A.row(i);
          const double* br = B.row(0);
          double* mr = M.row(i);
          for (int j = 0; j < M.cols; ++j) mr[j] = ar[j] + br[j];
        }
        break;
      }
      case Op::kScale: {
        const Mat& A = ws.val[nd.a];
        for (size_t i = 0; i < M.a.size(); ++i) M.a[i] = nd.cval * A.a[i];
        break;
      }
      case Op::kTanh: {
        const Mat& A = ws.val[nd.a];
        for (size_t i = 0; i < M.a.size(); ++i) M.a[i] = std::tanh(A.a[i]);
        break;
      }
      case Op::kSoftplus: {
        const Mat& A = ws.val[nd.a];
        for (size_t i = 0; i < M.a.size(); ++i) M.a[i] = softplus(A.a[i]);
        break;
      }
      case Op::kRelu: {
        const Mat& A = ws.val[nd.a];
        for (size_t i = 0; i < M.a.size(); ++i)
          M.a[i] = A.a[i] > 0.0 ? A.a[i] : 0.0;
        break;
      }
      case Op::kSoftmaxRows: {
        const Mat& A = ws.val[nd.a];
        for (int i = 0; i < M.rows; ++i) {
          const double* ar = A.row(i);
          double* mr = M.row(i);
          double mx = ar[0];
          for (int j = 1; j < M.cols; ++j) mx = std::max(mx, ar[j]);
          double s = 0.0;
          for (int j = 0; j < M.cols; ++j) {
            mr[j] = std::exp(ar[j] - mx);
            s += mr[j];
          }
          const double inv = 1.0 / s;
          for (int j = 0; j < M.cols; ++j) mr[j] *= inv;
        }
        break;
      }
      case Op::kConcatRows: {
        const Mat& A = ws.val[nd.a];
        const Mat& B = ws.val[nd.b];
        std::copy(A.a.begin(), A.a.end(), M.a.begin());
        std::copy(B.a.begin(), B.a.end(),
                  M.a.begin() + static_cast<std::ptrdiff_t>(A.a.size()));
        break;
      }
      case Op::kPickRow: {
        const Mat& A = ws.val[nd.a];
        const double* ar = A.row(nd.extra);
        std::copy(ar, ar + M.cols, M.a.begin());
        break;
      }
      case Op::kSumSq: {
        const Mat& A = ws.val[nd.a];
        double s = 0.0;
        for (double v : A.a) s += v * v;
        M(0, 0) = s;
        break;
      }
      case Op::kConv1d:
        conv_fwd(M, ws.val[nd.a], ws.val[nd.b], nd.extra, false);
        break;
    }
  }
  const double out = ws.val[static_cast<size_t>(g.output)](0, 0);
  if (!std::isfinite(out)) throw_nonfinite(g, ws);
  return out;
}

namespace {

void collect_leaf_grads(const Graph& g, const Workspace& ws,
                        const GradSinks& sinks) {
  if (sinks.params != nullptr) {
    for (int id : g.param_nodes) {
      acc_into((*sinks.params)[static_cast<size_t>(g.at(id).extra)],
               ws.adj[static_cast<size_t>(id)], "param");
    }
  }
  if (sinks.ext != nullptr) {
    for (int id : g.extern_nodes) {
      acc_into((*sinks.ext)[static_cast<size_t>(g.at(id).extra)],
               ws.adj[static_cast<size_t>(id)], "extern");
    }
  }
  if (sinks.inputs != nullptr) {
    for (int id : g.input_nodes) {
      acc_into((*sinks.inputs)[static_cast<size_t>(g.at(id).extra)],
               ws.adj[static_cast<size_t>(id)], "input");
    }
  }
}

}  // namespace

void backward(const Graph& g, const ParamStore& store, const Binding& bind,
              Workspace& ws, const GradSinks& sinks) {
  (void)store;
  (void)bind;
  zero_all(ws.adj);
  ws.adj[static_cast<size_t>(g.output)](0, 0) = 1.0;
  for (int id = static_cast<int>(g.nodes.size()) - 1; id >= 0; --id) {
    const Node& nd = g.nodes[static_cast<size_t>(id)];
    const Mat& Cb = ws.adj[static_cast<size_t>(id)];
    switch (nd.op) {
      case Op::kParam:
      case Op::kInput:
      case Op::kData:
      case Op::kExtern:
        break;
      case Op::kMatmulNN:
        mm_nt(ws.adj[nd.a], Cb, ws.val[nd.b], true);
        mm_tn(ws.adj[nd.b], ws.val[nd.a], Cb, true);
        break;
      case Op::kMatmulNT:
        mm_nn(ws.adj[nd.a], Cb, ws.val[nd.b], true);
        mm_tn(ws.adj[nd.b], Cb, ws.val[nd.a], true);
        break;
      case Op::kAdd: {
        Mat& Ab = ws.adj[nd.a];
        Mat& Bb = ws.adj[nd.b];
        for (size_t i = 0; i < Cb.a.size(); ++i) {
          Ab.a[i] += Cb.a[i];
          Bb.a[i] += Cb.a[i];
        }
        break;
      }
      case Op::kSub: {
        Mat& Ab = ws.adj[nd.a];
        Mat& Bb = ws.adj[nd.b];
        for (size_t i = 0; i < Cb.a.size(); ++i) {
          Ab.a[i] += Cb.a[i];
          Bb.a[i] -= Cb.a[i];
        }
        break;
      }
      case Op::kAddRow: {
        Mat& Ab = ws.adj[nd.a];
        Mat& Bb = ws.adj[nd.b];
        for (size_t i = 0; i < Cb.a.size(); ++i) Ab.a[i] += Cb.a[i];
        for (int i = 0; i < Cb.rows; ++i) {
          const double* cr = Cb.row(i);
          double* br = Bb.row(0);
          for (int j = 0; j < Cb.cols; ++j) br[j] += cr[j];
        }
        break;
      }
      case Op::kScale: {
        Mat& Ab = ws.adj[nd.a];
        for (size_t i = 0; i < Cb.a.size(); ++i) Ab.a[i] += nd.cval * Cb.a[i];
        break;
      }
      case Op::kTanh: {
        Mat& Ab = ws.adj[nd.a];
        const Mat& T = ws.val[static_cast<size_t>(id)];
        for (size_t i = 0; i < Cb.a.size(); ++i) {
          Ab.a[i] += Cb.a[i] * (1.0 - T.a[i] * T.a[i]);
        }
        break;
      }
      case Op::kSoftplus: {
        Mat& Ab = ws.adj[nd.a];
        const Mat& X = ws.val[nd.a];
        for (size_t i = 0; i < Cb.a.size(); ++i) {
          Ab.a[i] += Cb.a[i] * sigmoid(X.a[i]);
        }
        break;
      }
      case Op::kRelu: {
        Mat& Ab = ws.adj[nd.a];
        const Mat& X = ws.val[nd.a];
        for (size_t i = 0; i < Cb.a.size(); ++i) {
          if (X.a[i] > 0.0) Ab.a[i] += Cb.a[i];
        }
        break;
      }
      case Op::kSoftmaxRows: {
        Mat& Ab = ws.adj[nd.a];
        const Mat& P = ws.val[static_cast<size_t>(id)];
        for (int i = 0; i < P.rows; ++i) {
          const double* p = P.row(i);
          const double* cb = Cb.row(i);
          double* ab = Ab.row(i);
          double dotpc = 0.0;
          for (int j = 0; j < P.cols; ++j) dotpc += p[j] * cb[j];
          for (int j = 0; j < P.cols; ++j) ab[j] += p[j] * (cb[j] - dotpc);
        }
        break;
      }
      case Op::kConcatRows: {
        Mat& Ab = ws.adj[nd.a];
        Mat& Bb = ws.adj[nd.b];
        const size_t na = Ab.a.size();
        for (size_t i = 0; i < na; ++i) Ab.a[i] += Cb.a[i];
        for (size_t i = 0; i < Bb.a.size(); ++i) Bb.a[i] += Cb.a[na + i];
        break;
      }
      case Op::kPickRow: {
        Mat& Ab = ws.adj[nd.a];
        double* ar = Ab.row(nd.extra);
        const double* cr = Cb.row(0);
        for (int j = 0; j < Cb.cols; ++j) ar[j] += cr[j];
        break;
      }
      case Op::kSumSq: {
        Mat& Ab = ws.adj[nd.a];
        const Mat& A = ws.val[nd.a];
        const double c2 = 2.0 * Cb(0, 0);
        for (size_t i = 0; i < Ab.a.size(); ++i) Ab.a[i] += c2 * A.a[i];
        break;
      }
      case Op::kConv1d:
        conv_back_data(ws.adj[nd.a], Cb, ws.val[nd.b], nd.extra);
        conv_back_w(ws.adj[nd.b], Cb, ws.val[nd.a], nd.extra);
        break;
    }
  }
  collect_leaf_grads(g, ws, sinks);
}

double input_gradients(const Graph& g, const ParamStore& store,
                       const Binding& bind, Workspace& ws,
                       std::vector<Mat>& grad_inputs) {
  const double out = forward(g, store, bind, ws);
  GradSinks sinks;
  sinks.inputs = &grad_inputs;
  backward(g, store, bind, ws, sinks);
  return out;
}

namespace {

// Directional derivative of every register along the seed already written
// into ws.dot at the input leaves; all other leaf dots are cleared here.
void dot_forward(const Graph& g, Workspace& ws) {
  const size_t n = g.nodes.size();
  for (size_t id = 0; id < n; ++id) {
    const Node& nd = g.nodes[id];
    Mat& D = ws.dot[id];
    switch (nd.op) {
      case Op::kParam:
      case Op::kData:
      case Op::kExtern:
        D.set_zero();
        break;
      case Op::kInput:
        break;  // seeded by the caller
      case Op::kMatmulNN:
        mm_nn(D, ws.dot[nd.a], ws.val[nd.b], false);
        mm_nn(D, ws.val[nd.a], ws.dot[nd.b], true);
        break;
      case Op::kMatmulNT:
        mm_nt(D, ws.dot[nd.a], ws.val[nd.b], false);
        mm_nt(D, ws.val[nd.a], ws.dot[nd.b], true);
        break;
      case Op::kAdd: {
        const Mat& dA = ws.dot[nd.a];
        const Mat& dB = ws.dot[nd.b];
        for (size_t i = 0; i < D.a.size(); ++i) D.a[i] = dA.a[i] + dB.a[i];
        break;
      }
      case Op::kSub: {
        const Mat& dA = ws.dot[nd.a];
        const Mat& dB = ws.dot[nd.b];
        for (size_t i = 0; i < D.a.size(); ++i) D.a[i] = dA.a[i] - dB.a[i];
        break;
      }
      case Op::kAddRow: {
        const Mat& dA = ws.dot[nd.a];
        const Mat& dB = ws.dot[nd.b];
        for (int i = 0; i < D.rows; ++i) {
          const double* ar = dA.row(i);
          const double* br = dB.row(0);
          double* dr = D.row(i);
          for (int j = 0; j < D.cols; ++j) dr[j] = ar[j] + br[j];
        }
        break;
      }
      case Op::kScale: {
        const Mat& dA = ws.dot[nd.a];
        for (size_t i = 0; i < D.a.size(); ++i) D.a[i] = nd.cval * dA.a[i];
        break;
      }
      case Op::kTanh: {
        const Mat& dA = ws.dot[nd.a];
        const Mat& T = ws.val[id];
        for (size_t i = 0; i < D.a.size(); ++i) {
          D.a[i] = dA.a[i] * (1.0 - T.a[i] * T.a[i]);
        }
        break;
      }
      case Op::kSoftplus: {
        const Mat& dA = ws.dot[nd.a];
        const Mat& X = ws.val[nd.a];
        for (size_t i = 0; i < D.a.size(); ++i) {
          D.a[i] = dA.a[i] * sigmoid(X.a[i]);
        }
        break;
      }
      case Op::kRelu: {
        const Mat& dA = ws.dot[nd.a];
        const Mat& X = ws.val[nd.a];
        for (size_t i = 0; i < D.a.size(); ++i) {
          D.a[i] = X.a[i] > 0.0 ? dA.a[i] : 0.0;
        }
        break;
      }
      case Op::kSoftmaxRows: {
        const Mat& dA = ws.dot[nd.a];
        const Mat& P = ws.val[id];
        for (int i = 0; i < P.rows; ++i) {
          const double* p = P.row(i);
          const double* xd = dA.row(i);
          double* dr = D.row(i);
          double r = 0.0;
          for (int j = 0; j < P.cols; ++j) r += p[j] * xd[j];
          for (int j = 0; j < P.cols; ++j) dr[j] = p[j] * (xd[j] - r);
        }
        break;
      }
      case Op::kConcatRows: {
        const Mat& dA = ws.dot[nd.a];
        const Mat& dB = ws.dot[nd.b];
        std::copy(dA.a.begin(), dA.a.end(), D.a.begin());
        std::copy(dB.a.begin(), dB.a.end(),
                  D.a.begin() + static_cast<std::ptrdiff_t>(dA.a.size()));
        break;
      }
      case Op::kPickRow: {
        const Mat& dA = ws.dot[nd.a];
        const double* ar = dA.row(nd.extra);
        std::copy(ar, ar + D.cols, D.a.begin());
        break;
      }
      case Op::kSumSq: {
        const Mat& A = ws.val[nd.a];
        const Mat& dA = ws.dot[nd.a];
        double s = 0.0;
        for (size_t i = 0; i < A.a.size(); ++i) s += A.a[i] * dA.a[i];
        D(0, 0) = 2.0 * s;
        break;
      }
      case Op::kConv1d:
        conv_fwd(D, ws.dot[nd.a], ws.val[nd.b], nd.extra, false);
        conv_fwd(D, ws.val[nd.a], ws.dot[nd.b], nd.extra, true);
        break;
    }
  }
}

// Reverse sweep over the (value, dot) pair computation. adj carries
// d(output-dot)/d(value), adjdot carries d(output-dot)/d(dot); the value
// adjoints of the leaves are the parameter gradients of the reduction.
void dual_backward(const Graph& g, Workspace& ws, const GradSinks& sinks) {
  zero_all(ws.adj);
  zero_all(ws.adjdot);
  ws.adjdot[static_cast<size_t>(g.output)](0, 0) = 1.0;
  for (int id = static_cast<int>(g.nodes.size()) - 1; id >= 0; --id) {
    const Node& nd = g.nodes[static_cast<size_t>(id)];
    const Mat& Cb = ws.adj[static_cast<size_t>(id)];
    const Mat& Cd = ws.adjdot[static_cast<size_t>(id)];
    switch (nd.op) {
      case Op::kParam:
      case Op::kInput:
      case Op::kData:
      case Op::kExtern:
        break;
      case Op::kMatmulNN:
        mm_nt(ws.adj[nd.a], Cb, ws.val[nd.b], true);
        mm_nt(ws.adj[nd.a], Cd, ws.dot[nd.b], true);
        mm_nt(ws.adjdot[nd.a], Cd, ws.val[nd.b], true);
        mm_tn(ws.adj[nd.b], ws.val[nd.a], Cb, true);
        mm_tn(ws.adj[nd.b], ws.dot[nd.a], Cd, true);
        mm_tn(ws.adjdot[nd.b], ws.val[nd.a], Cd, true);
        break;
      case Op::kMatmulNT:
        mm_nn(ws.adj[nd.a], Cb, ws.val[nd.b], true);
        mm_nn(ws.adj[nd.a], Cd, ws.dot[nd.b], true);
        mm_nn(ws.adjdot[nd.a], Cd, ws.val[nd.b], true);
        mm_tn(ws.adj[nd.b], Cb, ws.val[nd.a], true);
        mm_tn(ws.adj[nd.b], Cd, ws.dot[nd.a], true);
        mm_tn(ws.adjdot[nd.b], Cd, ws.val[nd.a], true);
        break;
      case Op::kAdd: {
        Mat& Ab = ws.adj[nd.a];
        Mat& Bb = ws.adj[nd.b];
        Mat& Ad = ws.adjdot[nd.a];
        Mat& Bd = ws.adjdot[nd.b];
        for (size_t i = 0; i < Cb.a.size(); ++i) {
          Ab.a[i] += Cb.a[i];
          Bb.a[i] += Cb.a[i];
          Ad.a[i] += Cd.a[i];
          Bd.a[i] += Cd.a[i];
        }
        break;
      }
      case Op::kSub: {
        Mat& Ab = ws.adj[nd.a];
        Mat& Bb = ws.adj[nd.b];
        Mat& Ad = ws.adjdot[nd.a];
        Mat& Bd = ws.adjdot[nd.b];
        for (size_t i = 0; i < Cb.a.size(); ++i) {
          Ab.a[i] += Cb.a[i];
          Bb.a[i] -= Cb.a[i];
          Ad.a[i] += Cd.a[i];
          Bd.a[i] -= Cd.a[i];
        }
        break;
      }
      case Op::kAddRow: {
        Mat& Ab = ws.adj[nd.a];
        Mat& Ad = ws.adjdot[nd.a];
        Mat& Bb = ws.adj[nd.b];
        Mat& Bd = ws.adjdot[nd.b];
        for (size_t i = 0; i < Cb.a.size(); ++i) {
          Ab.a[i] += Cb.a[i];
          Ad.a[i] += Cd.a[i];
        }
        for (int i = 0; i < Cb.rows; ++i) {
          const double* cb = Cb.row(i);
          const double* cd = Cd.row(i);
          double* bb = Bb.row(0);
          double* bd = Bd.row(0);
          for (int j = 0; j < Cb.cols; ++j) {
            bb[j] += cb[j];
            bd[j] += cd[j];
          }
        }
        break;
      }
      case Op::kScale: {
        Mat& Ab = ws.adj[nd.a];
        Mat& Ad = ws.adjdot[nd.a];
        for (size_t i = 0; i < Cb.a.size(); ++i) {
          Ab.a[i] += nd.cval * Cb.a[i];
          Ad.a[i] += nd.cval * Cd.a[i];
        }
        break;
      }
      case Op::kTanh: {
        Mat& Ab = ws.adj[nd.a];
        Mat& Ad = ws.adjdot[nd.a];
        const Mat& T = ws.val[static_cast<size_t>(id)];
        const Mat& dA = ws.dot[nd.a];
        for (size_t i = 0; i < Cb.a.size(); ++i) {
          const double d1 = 1.0 - T.a[i] * T.a[i];
          const double d2 = -2.0 * T.a[i] * d1;
          Ab.a[i] += Cb.a[i] * d1 + Cd.a[i] * d2 * dA.a[i];
          Ad.a[i] += Cd.a[i] * d1;
        }
        break;
      }
      case Op::kSoftplus: {
        Mat& Ab = ws.adj[nd.a];
        Mat& Ad = ws.adjdot[nd.a];
        const Mat& X = ws.val[nd.a];
        const Mat& dA = ws.dot[nd.a];
        for (size_t i = 0; i < Cb.a.size(); ++i) {
          const double s = sigmoid(X.a[i]);
          Ab.a[i] += Cb.a[i] * s + Cd.a[i] * s * (1.0 - s) * dA.a[i];
          Ad.a[i] += Cd.a[i] * s;
        }
        break;
      }
      case Op::kRelu:
        throw ConfigError(
            "second-order pass over relu; use a smooth activation");
      case Op::kSoftmaxRows: {
        Mat& Ab = ws.adj[nd.a];
        Mat& Ad = ws.adjdot[nd.a];
        const Mat& P = ws.val[static_cast<size_t>(id)];
        const Mat& dX = ws.dot[nd.a];
        for (int i = 0; i < P.rows; ++i) {
          const double* p = P.row(i);
          const double* xd = dX.row(i);
          const double* pb = Cb.row(i);
          const double* qb = Cd.row(i);
          double* ab = Ab.row(i);
          double* ad = Ad.row(i);
          double r = 0.0, w = 0.0, u = 0.0, s = 0.0;
          for (int j = 0; j < P.cols; ++j) {
            r += p[j] * xd[j];
            w += p[j] * qb[j];
            u += p[j] * qb[j] * xd[j];
            s += p[j] * pb[j];
          }
          for (int j = 0; j < P.cols; ++j) {
            ab[j] += p[j] * (pb[j] - s) +
                     p[j] * (qb[j] * xd[j] - u - w * xd[j] - r * qb[j] +
                             2.0 * r * w);
            ad[j] += p[j] * (qb[j] - w);
          }
        }
        break;
      }
      case Op::kConcatRows: {
        Mat& Ab = ws.adj[nd.a];
        Mat& Bb = ws.adj[nd.b];
        Mat& Ad = ws.adjdot[nd.a];
        Mat& Bd = ws.adjdot[nd.b];
        const size_t na = Ab.a.size();
        for (size_t i = 0; i < na; ++i) {
          Ab.a[i] += Cb.a[i];
          Ad.a[i] += Cd.a[i];
        }
        for (size_t i = 0; i < Bb.a.size(); ++i) {
          Bb.a[i] += Cb.a[na + i];
          Bd.a[i] += Cd.a[na + i];
        }
        break;
      }
      case Op::kPickRow: {
        double* ab = ws.adj[nd.a].row(nd.extra);
        double* ad = ws.adjdot[nd.a].row(nd.extra);
        const double* cb = Cb.row(0);
        const double* cd = Cd.row(0);
        for (int j = 0; j < Cb.cols; ++j) {
          ab[j] += cb[j];
          ad[j] += cd[j];
        }
        break;
      }
      case Op::kSumSq: {
        Mat& Ab = ws.adj[nd.a];
        Mat& Ad = ws.adjdot[nd.a];
        const Mat& A = ws.val[nd.a];
        const Mat& dA = ws.dot[nd.a];
        const double cb2 = 2.0 * Cb(0, 0);
        const double cd2 = 2.0 * Cd(0, 0);
        for (size_t i = 0; i < Ab.a.size(); ++i) {
          Ab.a[i] += cb2 * A.a[i] + cd2 * dA.a[i];
          Ad.a[i] += cd2 * A.a[i];
        }
        break;
      }
      case Op::kConv1d:
        conv_back_data(ws.adj[nd.a], Cb, ws.val[nd.b], nd.extra);
        conv_back_data(ws.adj[nd.a], Cd, ws.dot[nd.b], nd.extra);
        conv_back_data(ws.adjdot[nd.a], Cd, ws.val[nd.b], nd.extra);
        conv_back_w(ws.adj[nd.b], Cb, ws.val[nd.a], nd.extra);
        conv_back_w(ws.adj[nd.b], Cd, ws.dot[nd.a], nd.extra);
        conv_back_w(ws.adjdot[nd.b], Cd, ws.val[nd.a], nd.extra);
        break;
    }
  }
  collect_leaf_grads(g, ws, sinks);
}

}  // namespace

double grad_reduction_backward(const Graph& g, const ParamStore& store,
                               const Binding& bind, const GradReduction& red,
                               Workspace& ws, const GradSinks& sinks) {
  if (!g.second_order_safe()) {
    throw ConfigError(
        "gradient-penalty loss needs smooth activations; graph contains relu");
  }
  if (ws.dot.size() != g.nodes.size()) {
    throw ConfigError("workspace not prepared for second-order passes");
  }
  forward(g, store, bind, ws);
  backward(g, store, bind, ws, GradSinks{});

  // Reduction value and seed direction from the input-leaf gradients.
  for (int id : g.input_nodes) ws.dot[static_cast<size_t>(id)].set_zero();
  if (red.term_values != nullptr) {
    red.term_values->assign(red.terms.size(), 0.0);
  }
  double loss = red.bias;
  for (size_t ti = 0; ti < red.terms.size(); ++ti) {
    const GradReduction::Term& t = red.terms[ti];
    if (t.input_slot < 0 ||
        t.input_slot >= static_cast<int>(g.input_nodes.size())) {
      throw ConfigError("gradient reduction addresses a missing input slot");
    }
    const int id = g.input_nodes[static_cast<size_t>(t.input_slot)];
    const Mat& grad = ws.adj[static_cast<size_t>(id)];
    Mat& seed = ws.dot[static_cast<size_t>(id)];
    for (const Mat* m : {t.w2, t.target, t.w1}) {
      if (m != nullptr && m->a.size() != grad.a.size()) {
        throw ConfigError("gradient reduction term shape mismatch on slot " +
                          std::to_string(t.input_slot));
      }
    }
    double term_sum = 0.0;
    for (size_t i = 0; i < grad.a.size(); ++i) {
      const double gi = grad.a[i];
      if (t.w2 != nullptr) {
        const double tv = t.target != nullptr ? t.target->a[i] : 0.0;
        const double w = t.w2->a[i];
        term_sum += w * (gi - tv) * (gi - tv);
        seed.a[i] += 2.0 * w * (gi - tv);
      }
      if (t.w1 != nullptr) {
        term_sum += t.w1->a[i] * gi;
        seed.a[i] += t.w1->a[i];
      }
    }
    loss += term_sum;
    if (red.term_values != nullptr) (*red.term_values)[ti] = term_sum;
  }
  if (!std::isfinite(loss)) {
    throw NumericError("non-finite gradient-reduction loss");
  }

  dot_forward(g, ws);
  dual_backward(g, ws, sinks);
  return loss;
}

const Mat& aux_value(const Graph& g, const Workspace& ws,
                     const std::string& name) {
  for (const auto& [id, n] : g.aux) {
    if (n == name) return ws.val[static_cast<size_t>(id)];
  }
  throw ConfigError("no aux register named '" + name + "'");
}

}  // namespace dhn
