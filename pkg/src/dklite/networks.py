"""Encoder/decoder network pair used as the learned feature map.

The encoder maps inputs to a feature space in which a linear model acts
as an implicitly deep kernel; the decoder mirrors the encoder's layer
structure and is trained to reconstruct the input from the features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import Tape, Tensor
from .exceptions import ConfigError, DimensionError

ACTIVATIONS = ("elu", "softplus", "linear")


def _activate_array(h: np.ndarray, activation: str) -> np.ndarray:
    if activation == "elu":
        return np.where(h > 0.0, h, np.expm1(h))
    if activation == "softplus":
        return np.logaddexp(0.0, h)
    return h


def _activate_tensor(h: Tensor, activation: str) -> Tensor:
    if activation == "elu":
        return h.elu()
    if activation == "softplus":
        return h.softplus()
    return h


@dataclass
class RepresentationNet:
    """Fully-connected encoder and mirrored decoder.

    ``encoder_sizes`` runs input -> feature dimension; the decoder sizes
    must be its exact reverse. Hidden layers use ``activation``; final
    layers of both stacks are linear.
    """

    encoder_sizes: tuple[int, ...]
    decoder_sizes: tuple[int, ...]
    encoder_weights: list[np.ndarray] = field(repr=False)
    encoder_biases: list[np.ndarray] = field(repr=False)
    decoder_weights: list[np.ndarray] = field(repr=False)
    decoder_biases: list[np.ndarray] = field(repr=False)
    activation: str = "elu"

    def __post_init__(self):
        if tuple(reversed(self.encoder_sizes)) != tuple(self.decoder_sizes):
            raise ConfigError("decoder sizes must be the exact reverse of encoder sizes")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{self.activation}'")
        for mats in (self.encoder_weights, self.encoder_biases,
                     self.decoder_weights, self.decoder_biases):
            for m in mats:
                if not np.all(np.isfinite(m)):
                    raise ConfigError("network weights must be finite")

    @property
    def input_dim(self) -> int:
        return self.encoder_sizes[0]

    @property
    def feature_dim(self) -> int:
        return self.encoder_sizes[-1]

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Flat (name, array) list in a fixed order, encoder then decoder."""
        out = []
        for i, (w, b) in enumerate(zip(self.encoder_weights, self.encoder_biases)):
            out.append((f"enc_w{i}", w))
            out.append((f"enc_b{i}", b))
        for i, (w, b) in enumerate(zip(self.decoder_weights, self.decoder_biases)):
            out.append((f"dec_w{i}", w))
            out.append((f"dec_b{i}", b))
        return out

    def with_parameters(self, arrays: list[np.ndarray]) -> "RepresentationNet":
        """Copy of the net with parameters replaced, in parameters() order."""
        n_enc = len(self.encoder_weights)
        n_dec = len(self.decoder_weights)
        if len(arrays) != 2 * (n_enc + n_dec):
            raise DimensionError("parameter count mismatch")
        it = iter(arrays)
        enc_w, enc_b, dec_w, dec_b = [], [], [], []
        for _ in range(n_enc):
            enc_w.append(np.asarray(next(it), dtype=float))
            enc_b.append(np.asarray(next(it), dtype=float))
        for _ in range(n_dec):
            dec_w.append(np.asarray(next(it), dtype=float))
            dec_b.append(np.asarray(next(it), dtype=float))
        return RepresentationNet(self.encoder_sizes, self.decoder_sizes,
                                 enc_w, enc_b, dec_w, dec_b, self.activation)


def init_representation(input_dim: int, feature_dim: int = 25,
                        hidden: tuple[int, ...] = (50, 50),
                        activation: str = "elu", seed: int = 0) -> RepresentationNet:
    """Seeded network with zero biases and variance-preserving weights.

    Weights are drawn N(0, 2 / (fan_in + fan_out)); the decoder reverses
    the encoder layer sizes.
    """
    if input_dim < 1 or feature_dim < 1:
        raise ConfigError("dimensions must be positive")
    enc_sizes = (input_dim, *hidden, feature_dim)
    dec_sizes = tuple(reversed(enc_sizes))
    rng = np.random.default_rng(seed)

    def make_stack(sizes):
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            sd = np.sqrt(2.0 / (fan_in + fan_out))
            weights.append(rng.normal(0.0, sd, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return weights, biases

    enc_w, enc_b = make_stack(enc_sizes)
    dec_w, dec_b = make_stack(dec_sizes)
    return RepresentationNet(enc_sizes, dec_sizes, enc_w, enc_b, dec_w, dec_b, activation)


def _forward_stack(weights, biases, activation: str, x):
    """Run a linear stack on either numpy arrays or tape tensors.

    Hidden layers are activated; the final layer is linear.
    """
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        if isinstance(h, Tensor):
            h = autodiff.matmul(h, w) + b
            if i != last:
                h = _activate_tensor(h, activation)
        else:
            h = h @ w + b
            if i != last:
                h = _activate_array(h, activation)
    return h


def _check_columns(x, expected: int, what: str):
    cols = x.shape[1] if getattr(x, "ndim", 2) == 2 else None
    if cols != expected:
        raise DimensionError(f"{what} expects {expected} columns, got {cols}")


def encode(net: RepresentationNet, x: np.ndarray) -> np.ndarray:
    """Feature representation of each row of ``x``."""
    x = np.asarray(x, dtype=float)
    _check_columns(x, net.input_dim, "encode")
    return _forward_stack(net.encoder_weights, net.encoder_biases, net.activation, x)


def decode(net: RepresentationNet, z: np.ndarray) -> np.ndarray:
    """Reconstruction of inputs from feature rows ``z``."""
    z = np.asarray(z, dtype=float)
    _check_columns(z, net.feature_dim, "decode")
    return _forward_stack(net.decoder_weights, net.decoder_biases, net.activation, z)


def lift_parameters(net: RepresentationNet, tape: Tape) -> dict[str, Tensor]:
    """Register every weight and bias as a leaf on ``tape``.

    Bias vectors are lifted as 1 x n rows so they broadcast over sample
    rows inside the tape.
    """
    lifted = {}
    for name, arr in net.parameters():
        value = arr[None, :] if arr.ndim == 1 else arr
        lifted[name] = tape.leaf(value, name)
    return lifted


def encode_on_tape(net: RepresentationNet, lifted: dict[str, Tensor], x: Tensor) -> Tensor:
    weights = [lifted[f"enc_w{i}"] for i in range(len(net.encoder_weights))]
    biases = [lifted[f"enc_b{i}"] for i in range(len(net.encoder_biases))]
    return _forward_stack(weights, biases, net.activation, x)


def decode_on_tape(net: RepresentationNet, lifted: dict[str, Tensor], z: Tensor) -> Tensor:
    weights = [lifted[f"dec_w{i}"] for i in range(len(net.decoder_weights))]
    biases = [lifted[f"dec_b{i}"] for i in range(len(net.decoder_biases))]
    return _forward_stack(weights, biases, net.activation, z)
