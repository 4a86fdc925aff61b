#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "nmt/tensor.hpp"

namespace nmt {

enum class CellKind { kRnn, kGru, kLstm };
enum class Direction { kForward, kBackward };

std::string cell_kind_name(CellKind kind);

/// Gate weights of one recurrent layer.
///
/// Input weights W_* are [hidden x input], recurrent weights U_* are
/// [hidden x hidden] and biases have length hidden. Names follow the gate
/// letters: GRU uses z, r, h; LSTM uses f, i, o, c; the vanilla cell uses
/// W_xh, W_hh and the output map W_hy.
struct CellParams {
  CellKind kind = CellKind::kGru;
  std::size_t input_size = 0;
  std::size_t hidden_size = 0;
  std::map<std::string, Tensor> tensors;

  /// uniform(-1/sqrt(hidden), 1/sqrt(hidden)); LSTM forget bias starts at 1.
  static CellParams init(CellKind kind, std::size_t input_size, std::size_t hidden_size, std::mt19937_64& rng);
  static CellParams zeros(CellKind kind, std::size_t input_size, std::size_t hidden_size);

  const Tensor& operator[](const std::string& name) const;
  Tensor& operator[](const std::string& name);

  /// Closed-form trainable element count.
  static std::size_t count(CellKind kind, std::size_t input_size, std::size_t hidden_size);
};

/// Hidden state rows ([batch x hidden]); `c` is only set for LSTM.
struct CellState {
  Tensor h;
  Tensor c;

  static CellState zeros(CellKind kind, std::size_t batch, std::size_t hidden_size);
};

/// Gate matrices stacked once so a step needs two products instead of one per gate.
struct PreparedCell {
  CellKind kind = CellKind::kGru;
  std::size_t hidden_size = 0;
  Tensor input_weights;      // stacked W_* rows
  Tensor recurrent_weights;  // stacked U_* rows (GRU: z and r only)
  Tensor bias;               // stacked b_* (empty for the vanilla cell)
  Tensor candidate_recurrent;  // GRU U_h

  static PreparedCell from(const CellParams& params);
};

CellState rnn_step(const Tensor& x, const CellState& state, const CellParams& params);
CellState gru_step(const Tensor& x, const CellState& state, const CellParams& params);
CellState lstm_step(const Tensor& x, const CellState& state, const CellParams& params);

/// y_t = W_hy h_t for the vanilla cell.
Tensor rnn_output(const Tensor& h, const CellParams& params);

CellState cell_step(const Tensor& x, const CellState& state, const PreparedCell& cell);
CellState cell_step(const Tensor& x, const CellState& state, const CellParams& params);

/// Keeps `previous` where the row mask ([batch x hidden] of 0/1) is 0.
CellState masked_update(const CellState& next, const CellState& previous, const Tensor& keep);

/// Runs the cell over `inputs` ([batch x input] per position). States come
/// back in input order for either direction. When `keep_masks` is given,
/// position t only updates rows whose mask is 1 (padding leaves the state as is);
/// an undefined mask tensor means every row updates.
std::vector<CellState> unroll(const CellParams& params, const std::vector<Tensor>& inputs,
                              const CellState& initial, Direction direction,
                              const std::vector<Tensor>* keep_masks = nullptr);

/// [forward ; backward] per position.
std::vector<Tensor> concat_directions(const std::vector<CellState>& forward, const std::vector<CellState>& backward);

}  // namespace nmt
