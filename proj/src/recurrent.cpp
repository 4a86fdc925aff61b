#include "nmt/recurrent.hpp"

#include <cmath>

#include "nmt/error.hpp"

namespace nmt {

namespace {

struct Layout {
  std::vector<std::string> input;      // W_* names
  std::vector<std::string> recurrent;  // U_* names
  std::vector<std::string> bias;       // b_* names
};

const Layout& layout(CellKind kind) {
  static const Layout rnn{{"W_xh"}, {"W_hh"}, {}};
  static const Layout gru{{"W_z", "W_r", "W_h"}, {"U_z", "U_r", "U_h"}, {"b_z", "b_r", "b_h"}};
  static const Layout lstm{{"W_f", "W_i", "W_o", "W_c"}, {"U_f", "U_i", "U_o", "U_c"}, {"b_f", "b_i", "b_o", "b_c"}};
  switch (kind) {
    case CellKind::kRnn: return rnn;
    case CellKind::kGru: return gru;
    case CellKind::kLstm: return lstm;
  }
  return gru;
}

void check_input(const Tensor& x, const CellState& state, const CellParams& params) {
  if (x.rank() != 2 || x.dim(1) != params.input_size) {
    throw DimensionError("cell input " + shape_str(x.shape()) + " does not match input size " +
                         std::to_string(params.input_size));
  }
  if (!state.h.defined() || state.h.rank() != 2 || state.h.dim(1) != params.hidden_size ||
      state.h.dim(0) != x.dim(0)) {
    throw DimensionError("cell state " + (state.h.defined() ? shape_str(state.h.shape()) : std::string("<none>")) +
                         " does not match batch " + std::to_string(x.dim(0)) + " and hidden size " +
                         std::to_string(params.hidden_size));
  }
  if (params.kind == CellKind::kLstm && (!state.c.defined() || state.c.shape() != state.h.shape())) {
    throw DimensionError("LSTM state needs a memory cell shaped like h");
  }
}

Tensor one_minus(const Tensor& x) { return add_scalar(scale(x, -1.0), 1.0); }

}  // namespace

std::string cell_kind_name(CellKind kind) {
  switch (kind) {
    case CellKind::kRnn: return "rnn";
    case CellKind::kGru: return "gru";
    case CellKind::kLstm: return "lstm";
  }
  return "?";
}

CellParams CellParams::zeros(CellKind kind, std::size_t input_size, std::size_t hidden_size) {
  CellParams p;
  p.kind = kind;
  p.input_size = input_size;
  p.hidden_size = hidden_size;
  const auto& l = layout(kind);
  for (const auto& n : l.input) p.tensors[n] = Tensor::zeros({hidden_size, input_size}, true);
  for (const auto& n : l.recurrent) p.tensors[n] = Tensor::zeros({hidden_size, hidden_size}, true);
  for (const auto& n : l.bias) p.tensors[n] = Tensor::zeros({hidden_size}, true);
  if (kind == CellKind::kRnn) p.tensors["W_hy"] = Tensor::zeros({hidden_size, hidden_size}, true);
  return p;
}

CellParams CellParams::init(CellKind kind, std::size_t input_size, std::size_t hidden_size, std::mt19937_64& rng) {
  CellParams p = zeros(kind, input_size, hidden_size);
  const Real bound = std::sqrt(1.0 / static_cast<Real>(hidden_size));
  for (auto& [name, t] : p.tensors) t = Tensor::uniform(t.shape(), bound, rng);
  if (kind == CellKind::kLstm) p.tensors["b_f"] = Tensor::full({hidden_size}, 1.0, true);
  return p;
}

const Tensor& CellParams::operator[](const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ContractError(cell_kind_name(kind) + " cell has no parameter " + name);
  return it->second;
}

Tensor& CellParams::operator[](const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ContractError(cell_kind_name(kind) + " cell has no parameter " + name);
  return it->second;
}

std::size_t CellParams::count(CellKind kind, std::size_t input_size, std::size_t hidden_size) {
  const std::size_t h = hidden_size, x = input_size;
  switch (kind) {
    case CellKind::kRnn: return h * x + h * h + h * h;
    case CellKind::kGru: return 3 * (h * x + h * h + h);
    case CellKind::kLstm: return 4 * (h * x + h * h + h);
  }
  return 0;
}

CellState CellState::zeros(CellKind kind, std::size_t batch, std::size_t hidden_size) {
  CellState s;
  s.h = Tensor::zeros({batch, hidden_size});
  if (kind == CellKind::kLstm) s.c = Tensor::zeros({batch, hidden_size});
  return s;
}

PreparedCell PreparedCell::from(const CellParams& params) {
  PreparedCell cell;
  cell.kind = params.kind;
  cell.hidden_size = params.hidden_size;
  const auto& l = layout(params.kind);
  auto stack = [&](const std::vector<std::string>& names, std::size_t axis) {
    std::vector<Tensor> parts;
    for (const auto& n : names) parts.push_back(params[n]);
    return parts.size() == 1 ? parts.front() : concat(parts, axis);
  };
  cell.input_weights = stack(l.input, 0);
  if (params.kind == CellKind::kGru) {
    cell.recurrent_weights = concat({params["U_z"], params["U_r"]}, 0);
    cell.candidate_recurrent = params["U_h"];
  } else {
    cell.recurrent_weights = stack(l.recurrent, 0);
  }
  if (!l.bias.empty()) cell.bias = stack(l.bias, 0);
  return cell;
}

CellState cell_step(const Tensor& x, const CellState& state, const PreparedCell& cell) {
  const std::size_t batch = x.dim(0), h = cell.hidden_size;
  const Tensor& prev = state.h;
  switch (cell.kind) {
    case CellKind::kRnn: {
      // h_t = tanh(W_hh h_{t-1} + W_xh x_t)
      CellState next;
      next.h = tanh(add(matmul_bt(prev, cell.recurrent_weights), matmul_bt(x, cell.input_weights)));
      return next;
    }
    case CellKind::kGru: {
      const Tensor xw = add(matmul_bt(x, cell.input_weights), tile_rows(cell.bias, batch));  // [B, 3h]
      const Tensor hu = matmul_bt(prev, cell.recurrent_weights);                               // [B, 2h]
      const Tensor gates = sigmoid(add(slice(xw, 1, 0, 2 * h), hu));
      const Tensor z = slice(gates, 1, 0, h);
      const Tensor r = slice(gates, 1, h, 2 * h);
      const Tensor candidate = tanh(add(slice(xw, 1, 2 * h, 3 * h), matmul_bt(mul(r, prev), cell.candidate_recurrent)));
      CellState next;
      next.h = add(mul(z, prev), mul(one_minus(z), candidate));
      return next;
    }
    case CellKind::kLstm: {
      const Tensor pre = add(add(matmul_bt(x, cell.input_weights), matmul_bt(prev, cell.recurrent_weights)),
                             tile_rows(cell.bias, batch));  // [B, 4h]
      const Tensor gates = sigmoid(slice(pre, 1, 0, 3 * h));
      const Tensor f = slice(gates, 1, 0, h);
      const Tensor i = slice(gates, 1, h, 2 * h);
      const Tensor o = slice(gates, 1, 2 * h, 3 * h);
      const Tensor g = tanh(slice(pre, 1, 3 * h, 4 * h));
      CellState next;
      next.c = add(mul(f, state.c), mul(i, g));
      next.h = mul(o, tanh(next.c));
      return next;
    }
  }
  return state;
}

CellState cell_step(const Tensor& x, const CellState& state, const CellParams& params) {
  check_input(x, state, params);
  return cell_step(x, state, PreparedCell::from(params));
}

CellState rnn_step(const Tensor& x, const CellState& state, const CellParams& params) {
  if (params.kind != CellKind::kRnn) throw ContractError("rnn_step needs vanilla cell parameters");
  return cell_step(x, state, params);
}

CellState gru_step(const Tensor& x, const CellState& state, const CellParams& params) {
  if (params.kind != CellKind::kGru) throw ContractError("gru_step needs GRU parameters");
  return cell_step(x, state, params);
}

CellState lstm_step(const Tensor& x, const CellState& state, const CellParams& params) {
  if (params.kind != CellKind::kLstm) throw ContractError("lstm_step needs LSTM parameters");
  return cell_step(x, state, params);
}

Tensor rnn_output(const Tensor& h, const CellParams& params) {
  if (params.kind != CellKind::kRnn) throw ContractError("output projection belongs to the vanilla cell");
  if (h.rank() != 2 || h.dim(1) != params.hidden_size) {
    throw DimensionError("rnn_output: hidden " + shape_str(h.shape()) + " vs hidden size " +
                         std::to_string(params.hidden_size));
  }
  return matmul_bt(h, params["W_hy"]);
}

CellState masked_update(const CellState& next, const CellState& previous, const Tensor& keep) {
  CellState out;
  out.h = add(previous.h, mul(keep, sub(next.h, previous.h)));
  if (next.c.defined()) out.c = add(previous.c, mul(keep, sub(next.c, previous.c)));
  return out;
}

std::vector<CellState> unroll(const CellParams& params, const std::vector<Tensor>& inputs, const CellState& initial,
                              Direction direction, const std::vector<Tensor>* keep_masks) {
  if (inputs.empty()) throw ContractError("unroll: empty input sequence");
  if (keep_masks && keep_masks->size() != inputs.size()) {
    throw DimensionError("unroll: one mask per position required");
  }
  check_input(inputs.front(), initial, params);
  const PreparedCell cell = PreparedCell::from(params);
  const std::size_t n = inputs.size();
  std::vector<CellState> states(n);
  CellState state = initial;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t t = direction == Direction::kForward ? k : n - 1 - k;
    CellState next = cell_step(inputs[t], state, cell);
    if (keep_masks && (*keep_masks)[t].defined()) next = masked_update(next, state, (*keep_masks)[t]);
    states[t] = next;
    state = std::move(next);
  }
  return states;
}

std::vector<Tensor> concat_directions(const std::vector<CellState>& forward, const std::vector<CellState>& backward) {
  if (forward.size() != backward.size()) throw DimensionError("concat_directions: sequence lengths differ");
  std::vector<Tensor> out;
  out.reserve(forward.size());
  for (std::size_t t = 0; t < forward.size(); ++t) out.push_back(concat({forward[t].h, backward[t].h}, 1));
  return out;
}

}  // namespace nmt
