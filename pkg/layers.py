"""
Trainable layers: dense, dropout, ConvLSTM and the shared multi-head output.

Parameters are ``autograd`` leaf nodes owned by their layer.  A forward pass
builds a fresh graph from the current parameter values, so a layer with
frozen weights can serve any number of concurrent read-only forward passes.
"""
import logging
from dataclasses import dataclass

import numpy as np

import autograd as ag
from losses import ForecastBundle
from tensor import ShapeError, as_tensor

DROPOUT_MODES = ("train", "mc", "eval")
OUTPUT_GATE_SOURCES = ("cell", "hidden")


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Named parameters and sub-modules, flattened as ``child.param`` names."""

    def __init__(self):
        self._params = {}
        self._children = {}

    def _add_param(self, name, value):
        node = ag.leaf(value, requires_grad=True, name=name)
        self._params[name] = node
        return node

    def _add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        out = {}
        for name, node in self._params.items():
            out[f"{prefix}{name}"] = node
        for cname, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{cname}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def state_dict(self):
        return {name: np.array(node.value, copy=True)
                for name, node in self.named_parameters().items()}

    def load_state_dict(self, arrays):
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        unexpected = sorted(set(arrays) - set(params))
        if missing or unexpected:
            raise ValueError(f"Parameter names do not match: missing={missing}, "
                             f"unexpected={unexpected}")
        for name, node in params.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != node.value.shape:
                raise ShapeError(f"Parameter {name} has shape {value.shape}, "
                                 f"expected {node.value.shape}",
                                 axis=name, expected=node.value.shape, actual=value.shape)
            node.value = as_tensor(value, name)


class DenseLayer(Module):
    def __init__(self, n_in, n_out, activation="linear", rng=None):
        super().__init__()
        if n_in < 1 or n_out < 1:
            raise ValueError(f"Invalid dense extents {n_in} -> {n_out}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out, self.activation = n_in, n_out, activation
        self.weights = self._add_param("weights", glorot_uniform(
            rng, (n_in, n_out), n_in, n_out))
        self.bias = self._add_param("bias", np.zeros(n_out))

    def forward(self, x):
        x = ag.as_node(x)
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"Dense input has {x.shape[-1]} features, expected {self.n_in}",
                             axis=-1, expected=self.n_in, actual=x.shape[-1])
        return ag.apply_activation(x @ self.weights + self.bias, self.activation)


@dataclass
class ConvLSTMState:
    C: ag.Node
    H: ag.Node

    def __post_init__(self):
        if self.C.shape != self.H.shape:
            raise ShapeError(f"Cell {self.C.shape} and hidden {self.H.shape} shapes differ",
                             axis="state", expected=self.C.shape, actual=self.H.shape)

    @classmethod
    def zeros(cls, batch_shape, height, width, filters):
        shape = tuple(batch_shape) + (height, width, filters)
        return cls(ag.constant(np.zeros(shape)), ag.constant(np.zeros(shape)))


class ConvLSTMLayer(Module):
    """ConvLSTM without peephole connections.

    ``output_gate_source="cell"`` feeds the previous cell tensor to the
    output gate's state kernel (W_ho * C_{t-1}); ``"hidden"`` uses H_{t-1}.
    """

    INPUT_KERNELS = ("W_yi", "W_yf", "W_yc", "W_yo")
    STATE_KERNELS = ("W_hi", "W_hf", "W_hc", "W_ho")

    def __init__(self, in_channels, filters, kernel_size=(3, 3), rng=None,
                 output_gate_source="cell", forget_bias=1.0):
        super().__init__()
        kh, kw = kernel_size
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"ConvLSTM kernel extent must be odd, got {kh}x{kw}",
                             axis="kernel", expected="odd", actual=(kh, kw))
        if output_gate_source not in OUTPUT_GATE_SOURCES:
            raise ValueError(f"output_gate_source must be one of {OUTPUT_GATE_SOURCES}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.filters = in_channels, filters
        self.kernel_size = (kh, kw)
        self.output_gate_source = output_gate_source

        for name in self.INPUT_KERNELS:
            setattr(self, name, self._add_param(name, glorot_uniform(
                rng, (kh, kw, in_channels, filters), kh * kw * in_channels, kh * kw * filters)))
        for name in self.STATE_KERNELS:
            setattr(self, name, self._add_param(name, glorot_uniform(
                rng, (kh, kw, filters, filters), kh * kw * filters, kh * kw * filters)))
        self.b_i = self._add_param("b_i", np.zeros(filters))
        self.b_f = self._add_param("b_f", np.full(filters, forget_bias))
        self.b_c = self._add_param("b_c", np.zeros(filters))
        self.b_o = self._add_param("b_o", np.zeros(filters))

    def zero_state(self, batch_shape, height, width):
        return ConvLSTMState.zeros(batch_shape, height, width, self.filters)

    def step(self, x, state):
        return convlstm_step(self, x, state)


def convlstm_step(layer, x, state):
    """One ConvLSTM transition; returns the new (C, H)."""
    x = ag.as_node(x)
    if x.shape[-3:-1] != state.H.shape[-3:-1]:
        raise ShapeError(f"Input grid {x.shape[-3:-1]} does not match state grid "
                         f"{state.H.shape[-3:-1]}",
                         axis="spatial", expected=state.H.shape[-3:-1], actual=x.shape[-3:-1])
    S = layer.filters
    # four input convolutions and three state convolutions share one pass each
    zy = ag.conv2d(x, ag.concat([layer.W_yi, layer.W_yf, layer.W_yc, layer.W_yo]))
    zh = ag.conv2d(state.H, ag.concat([layer.W_hi, layer.W_hf, layer.W_hc]))

    i = ag.sigmoid(ag.narrow(zy, 0, S) + ag.narrow(zh, 0, S) + layer.b_i)
    f = ag.sigmoid(ag.narrow(zy, S, 2 * S) + ag.narrow(zh, S, 2 * S) + layer.b_f)
    g = ag.tanh(ag.narrow(zy, 2 * S, 3 * S) + ag.narrow(zh, 2 * S, 3 * S) + layer.b_c)
    cell = f * state.C + i * g

    gate_src = state.C if layer.output_gate_source == "cell" else state.H
    o = ag.sigmoid(ag.narrow(zy, 3 * S, 4 * S) + ag.conv2d(gate_src, layer.W_ho) + layer.b_o)
    hidden = o * ag.tanh(cell)
    return ConvLSTMState(cell, hidden)


def convlstm_unroll(stack, inputs, keep=1.0, mode="eval", rng=None):
    """Run a stack of ConvLSTM layers over ``inputs`` (..., L, M, N, Cin).

    States start at zero.  Between stacked layers each step's hidden tensor
    passes through dropout.  Returns the last layer's H at the final step.
    """
    if not stack:
        raise ValueError("convlstm_unroll needs at least one layer")
    inputs = ag.as_node(inputs)
    if inputs.value.ndim < 4 or inputs.shape[-4] < 1:
        raise ShapeError(f"inputs must be (..., L, M, N, Cin) with L >= 1, got {inputs.shape}",
                         axis="time", expected=">=1", actual=inputs.shape)
    steps = inputs.shape[-4]
    batch_shape, (height, width) = inputs.shape[:-4], inputs.shape[-3:-1]
    states = [layer.zero_state(batch_shape, height, width) for layer in stack]
    for t in range(steps):
        x = ag.take(inputs, t, axis=-4)
        for depth, layer in enumerate(stack):
            if depth > 0:
                x = dropout(x, keep, mode, rng)
            states[depth] = convlstm_step(layer, x, states[depth])
            x = states[depth].H
    return states[-1].H


class MultiHeadOutput(Module):
    """1x1 convolution from the S latent channels to 1 + J outputs per cell."""

    def __init__(self, filters, n_outputs, rng=None):
        super().__init__()
        if n_outputs < 1:
            raise ValueError(f"n_outputs must be >= 1, got {n_outputs}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.filters, self.n_outputs = filters, n_outputs
        self.W_hp = self._add_param("W_hp", glorot_uniform(rng, (filters, n_outputs),
                                                           filters, n_outputs))
        self.b_p = self._add_param("b_p", np.zeros(n_outputs))

    def forward(self, hidden):
        hidden = ag.as_node(hidden)
        if hidden.shape[-1] != self.filters:
            raise ShapeError(f"Latent tensor has {hidden.shape[-1]} channels, "
                             f"head expects {self.filters}",
                             axis="channels", expected=self.filters, actual=hidden.shape[-1])
        return hidden @ self.W_hp + self.b_p


def multihead_forward(head, hidden, levels=None):
    """Apply the shared head at every cell and split mean / quantiles."""
    return ForecastBundle.from_outputs(head.forward(hidden), levels)


def dropout(x, keep, mode, rng=None):
    """Inverted dropout; ``eval`` mode (or keep == 1) returns ``x`` itself."""
    if not 0.0 < keep <= 1.0:
        raise ValueError(f"keep probability must be in (0, 1], got {keep}")
    if mode not in DROPOUT_MODES:
        raise ValueError(f"dropout mode must be one of {DROPOUT_MODES}, got {mode!r}")
    x = ag.as_node(x)
    if mode == "eval" or keep == 1.0:
        return x
    if rng is None:
        logging.debug("dropout called without an rng; using a fresh default generator")
        rng = np.random.default_rng()
    mask = (rng.random(x.shape) < keep) / keep
    return x * ag.constant(mask)
