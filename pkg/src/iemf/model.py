"""Two-branch encoder network with concatenation fusion and unimodal probe heads.

Both branches are independent stacks (MLP layers in continuous mode, LIF
layers in spiking mode). The fusion layer maps the concatenated latents
straight to class logits, so it doubles as the classifier. Each modality also
gets a linear probe head whose confidence feeds the fusion-modulation scores;
in the default ``probe_detached`` mode the head losses stop at the encoder
outputs, in ``joint`` mode they train the encoders too.

Spiking mode injects the same input current at every step (direct coding) and
decodes by averaging the fusion-layer output over the steps (rate decoding).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .neurons import LIFParams, lif_step, relu
from .tensor import Tape, Tensor, softmax_cross_entropy
from .util import STREAM_MODEL, seeded_rng

NEURON_MODES = ("continuous", "spiking")
HEAD_MODES = ("probe_detached", "joint")


@dataclass
class ModelConfig:
    d_in_a: int
    d_in_v: int
    n_classes: int
    hidden: int = 64
    latent: int = 32
    depth: int = 2
    neuron_mode: str = "continuous"
    lif: LIFParams = field(default_factory=LIFParams)
    head_mode: str = "probe_detached"
    head_loss_weight: float = 1.0

    def __post_init__(self):
        for name in ("d_in_a", "d_in_v", "n_classes", "hidden", "latent", "depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if self.neuron_mode not in NEURON_MODES:
            raise ConfigError(f"neuron_mode must be one of {NEURON_MODES}")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}")
        if self.head_loss_weight < 0.0:
            raise ConfigError("head_loss_weight must be non-negative")

    def encoder_widths(self, modality: str) -> list[int]:
        d_in = self.d_in_a if modality == "a" else self.d_in_v
        return [d_in] + [self.hidden] * (self.depth - 1) + [self.latent]


@dataclass
class Batch:
    """One mini-batch of paired two-modality inputs and class labels."""

    x_a: Tensor
    x_v: Tensor
    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.x_a.data.ndim != 2 or self.x_v.data.ndim != 2:
            raise ShapeError("batch inputs must be 2-D (samples x features)")
        if not (self.x_a.shape[0] == self.x_v.shape[0] == self.y.shape[0]):
            raise ShapeError(
                f"inconsistent batch sizes: {self.x_a.shape[0]}, {self.x_v.shape[0]}, {self.y.shape[0]}"
            )
        if self.y.shape[0] < 1:
            raise ShapeError("batch must hold at least one sample")

    @property
    def size(self) -> int:
        return int(self.y.shape[0])

    def subset(self, indices) -> "Batch":
        idx = np.asarray(indices)
        return Batch(Tensor(self.x_a.data[idx]), Tensor(self.x_v.data[idx]), self.y[idx])


@dataclass
class ForwardOutputs:
    z_a: Tensor
    z_v: Tensor
    logits_av: Tensor
    logits_a: Tensor
    logits_v: Tensor
    p_av: Tensor
    p_a: Tensor
    p_v: Tensor
    loss: Tensor


class MultimodalModel:
    """Parameter store for the two encoders, fusion layer, and probe heads."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = {k: np.ascontiguousarray(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
        for pid, arr in self.params.items():
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"parameter {pid} holds non-finite values")

    def encoder_param_ids(self, modality: str) -> list[tuple[str, str]]:
        n_layers = self.cfg.depth
        return [(f"enc_{modality}.{i}.W", f"enc_{modality}.{i}.b") for i in range(n_layers)]

    @staticmethod
    def group_of(param_id: str) -> str:
        return param_id.split(".")[0]

    @property
    def n_params(self) -> int:
        return sum(arr.size for arr in self.params.values())

    def clone(self) -> "MultimodalModel":
        return MultimodalModel(self.cfg, {k: v.copy() for k, v in self.params.items()})


def init_model(cfg: ModelConfig, seed: int) -> MultimodalModel:
    """Seeded init: W ~ N(0, 1/fan_in), biases zero."""
    rng = seeded_rng(seed, STREAM_MODEL)
    params: dict[str, np.ndarray] = {}

    def linear(name: str, fan_in: int, fan_out: int) -> None:
        params[f"{name}.W"] = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
        params[f"{name}.b"] = np.zeros(fan_out)

    for modality in ("a", "v"):
        widths = cfg.encoder_widths(modality)
        for i in range(cfg.depth):
            linear(f"enc_{modality}.{i}", widths[i], widths[i + 1])
    linear("fusion", 2 * cfg.latent, cfg.n_classes)
    linear("head_a", cfg.latent, cfg.n_classes)
    linear("head_v", cfg.latent, cfg.n_classes)
    return MultimodalModel(cfg, params)


def bind_params(model: MultimodalModel, tape: Tape | None) -> dict[str, Tensor]:
    """Parameter tensors for one forward pass; tape leaves when tracing."""
    if tape is None:
        return {pid: Tensor(arr) for pid, arr in model.params.items()}
    return {pid: tape.leaf(arr, param_id=pid) for pid, arr in model.params.items()}


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add_bias(T.matmul(x, T.transpose(w)), b)


def _encode_continuous(x: Tensor, layers: list[tuple[Tensor, Tensor]]) -> Tensor:
    z = x
    for i, (w, b) in enumerate(layers):
        z = _affine(z, w, b)
        if i < len(layers) - 1:
            z = relu(z)
    return z


def _encode_spiking(x: Tensor, layers: list[tuple[Tensor, Tensor]], lif: LIFParams) -> list[Tensor]:
    """T-step LIF stack; returns the last layer's spike train.

    The first layer's drive is the affine image of the input, identical at
    every step, so it is computed once and fanned out on the tape.
    """
    drive = _affine(x, layers[0][0], layers[0][1])
    batch = x.shape[0]
    u = [Tensor(np.zeros((batch, w.shape[0]))) for w, _ in layers]
    spikes_out: list[Tensor] = []
    for _ in range(lif.t_steps):
        s_prev: Tensor | None = None
        for layer_idx, (w, b) in enumerate(layers):
            current = drive if layer_idx == 0 else _affine(s_prev, w, b)
            u[layer_idx], s_prev = lif_step(u[layer_idx], current, lif)
        spikes_out.append(s_prev)
    return spikes_out


def _layer_tensors(model: MultimodalModel, leaves: dict[str, Tensor], modality: str):
    return [(leaves[w_id], leaves[b_id]) for w_id, b_id in model.encoder_param_ids(modality)]


def encode(batch: Batch, model: MultimodalModel, tape: Tape | None = None,
           leaves: dict[str, Tensor] | None = None) -> tuple[Tensor, Tensor]:
    """Latent representations of both branches.

    In spiking mode this returns the per-step spike trains averaged over the
    steps (the firing rates); `forward_full` keeps the per-step trains for the
    step-wise fusion readout.
    """
    if leaves is None:
        leaves = bind_params(model, tape)
    _check_input_widths(batch, model.cfg)
    if model.cfg.neuron_mode == "continuous":
        z_a = _encode_continuous(batch.x_a, _layer_tensors(model, leaves, "a"))
        z_v = _encode_continuous(batch.x_v, _layer_tensors(model, leaves, "v"))
        return z_a, z_v
    sa = _encode_spiking(batch.x_a, _layer_tensors(model, leaves, "a"), model.cfg.lif)
    sv = _encode_spiking(batch.x_v, _layer_tensors(model, leaves, "v"), model.cfg.lif)
    return T.mean_tensors(sa), T.mean_tensors(sv)


def fuse_concat(z_a: Tensor, z_v: Tensor, model: MultimodalModel,
                leaves: dict[str, Tensor] | None = None) -> Tensor:
    """Class logits from the concatenated latents: W_f [z_a ; z_v] + b_f."""
    if leaves is None:
        leaves = bind_params(model, None)
    w, b = leaves["fusion.W"], leaves["fusion.b"]
    if z_a.shape[1] + z_v.shape[1] != w.shape[1]:
        raise ShapeError(
            f"fusion expects latent widths summing to {w.shape[1]}, got {z_a.shape[1]}+{z_v.shape[1]}"
        )
    return T.add_bias(T.matmul(T.concat_cols(z_a, z_v), T.transpose(w)), b)


def _check_input_widths(batch: Batch, cfg: ModelConfig) -> None:
    if batch.x_a.shape[1] != cfg.d_in_a or batch.x_v.shape[1] != cfg.d_in_v:
        raise ShapeError(
            f"input widths ({batch.x_a.shape[1]}, {batch.x_v.shape[1]}) do not match "
            f"model configuration ({cfg.d_in_a}, {cfg.d_in_v})"
        )


def network_logits(batch: Batch, model: MultimodalModel, tape: Tape | None = None,
                   leaves: dict[str, Tensor] | None = None):
    """Latents plus the three logit sets (fused, audio probe, visual probe)."""
    cfg = model.cfg
    if leaves is None:
        leaves = bind_params(model, tape)
    _check_input_widths(batch, cfg)

    def head(latent: Tensor, name: str) -> Tensor:
        inp = T.detach(latent) if cfg.head_mode == "probe_detached" else latent
        return _affine(inp, leaves[f"{name}.W"], leaves[f"{name}.b"])

    if cfg.neuron_mode == "continuous":
        z_a = _encode_continuous(batch.x_a, _layer_tensors(model, leaves, "a"))
        z_v = _encode_continuous(batch.x_v, _layer_tensors(model, leaves, "v"))
        logits_av = fuse_concat(z_a, z_v, model, leaves)
        logits_a = head(z_a, "head_a")
        logits_v = head(z_v, "head_v")
        return z_a, z_v, logits_av, logits_a, logits_v

    sa = _encode_spiking(batch.x_a, _layer_tensors(model, leaves, "a"), cfg.lif)
    sv = _encode_spiking(batch.x_v, _layer_tensors(model, leaves, "v"), cfg.lif)
    logits_av = T.mean_tensors([fuse_concat(a, v, model, leaves) for a, v in zip(sa, sv)])
    logits_a = T.mean_tensors([head(s, "head_a") for s in sa])
    logits_v = T.mean_tensors([head(s, "head_v") for s in sv])
    return T.mean_tensors(sa), T.mean_tensors(sv), logits_av, logits_a, logits_v


def forward_full(batch: Batch, model: MultimodalModel, tape: Tape | None = None) -> ForwardOutputs:
    """Full pass: latents, three logit sets, probabilities, and the total loss.

    total = CE(fused) + head_loss_weight * (CE(audio head) + CE(visual head)) / 2
    """
    leaves = bind_params(model, tape)
    z_a, z_v, logits_av, logits_a, logits_v = network_logits(batch, model, tape, leaves)
    loss_av, p_av = softmax_cross_entropy(logits_av, batch.y)
    loss_a, p_a = softmax_cross_entropy(logits_a, batch.y)
    loss_v, p_v = softmax_cross_entropy(logits_v, batch.y)
    loss = T.add(loss_av, T.smul(T.add(loss_a, loss_v), 0.5 * model.cfg.head_loss_weight))
    return ForwardOutputs(z_a, z_v, logits_av, logits_a, logits_v, p_av, p_a, p_v, loss)
