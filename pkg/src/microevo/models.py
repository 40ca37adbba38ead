"""Encoder-decoder sequence predictors, their training loop and rollout.

Families
--------
``base_rnn`` / ``base_lstm``
    3-D convolutional encoder over the whole input clip, per-step flatten,
    two recurrent layers (the second as wide as the flatten), per-step 2-D
    transposed-convolution decoder.
``base_snn``
    2-D convolution encoder and transposed-convolution decoder with a LIF
    layer after every hidden stage; time is carried by the membranes.
``stc_lif``
    ``base_snn`` with gated leak and spatial self-connection on every LIF layer.
``conv_lstm``
    one strided convolution, a ConvLSTM cell, one transposed convolution.

All predictors emit ``out_len`` frames through a sigmoid. Extra output frames
are produced by feeding the previous prediction back in (frame-wise families)
or by stepping the recurrence on a zero input (flattened families).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .field import WindowedDataset
from .nn.checkpoint import load_params, save_params
from .nn.layers import (
    ConvLSTMCell,
    Conv,
    ConvTranspose,
    Layer,
    LSTMCell,
    RNNCell,
    conv_lstm_cell_step,
)
from .nn.conv import conv_output_shape
from .nn.optim import AdamState, adam_update
from .nn.tensor import Tensor, default_dtype, mse_loss, no_grad
from .spiking import STC_CALIBRATION, LifParams, LifState, StcGates, lif_step, stc_lif_step

log = logging.getLogger(__name__)

FAMILIES = ("base_rnn", "base_lstm", "base_snn", "conv_lstm", "stc_lif")
SPIKING = ("base_snn", "stc_lif")

__all__ = [
    "FAMILIES",
    "ModelSpec",
    "Model",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "Persistence",
    "build_model",
    "prior_logit",
    "forward_sequence",
    "conv_lstm_cell_step",
    "train",
    "rollout_autoregressive",
    "save_model",
    "load_model",
    "count_params",
]


class Predictor(Protocol):
    in_len: int
    out_len: int

    def predict(self, frames: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ModelSpec:
    family: str
    in_len: int = 3
    out_len: int = 1
    grid: tuple[int, int] = (96, 132)
    enc_channels: tuple[int, ...] = (16, 4)
    dec_channels: tuple[int, ...] = (16,)
    kernel: int = 3
    strides: tuple[int, ...] | None = None
    hidden: tuple[int, ...] = (128,)
    conv_lstm_hidden: int = 16
    lif: LifParams = LifParams()
    output_bias: float = 0.0
    init_gain: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.in_len < 1 or self.out_len < 1:
            raise ValueError("in_len and out_len must be >= 1")
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "enc_channels", tuple(self.enc_channels))
        object.__setattr__(self, "dec_channels", tuple(self.dec_channels))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.strides is None:
            object.__setattr__(self, "strides", default_strides(self.family, len(self.enc_channels)))
        object.__setattr__(self, "strides", tuple(self.strides))
        if len(self.strides) != len(self.enc_channels):
            raise ValueError("one stride per encoder layer")
        if len(self.dec_channels) != len(self.enc_channels) - 1:
            raise ValueError("decoder needs len(enc_channels) - 1 hidden channel counts")
        if self.kernel % 2 != 1:
            raise ValueError("kernel must be odd")
        if isinstance(self.lif, dict):
            object.__setattr__(self, "lif", LifParams(**self.lif))

    @property
    def spiking(self) -> bool:
        return self.family in SPIKING

    def feature_shapes(self) -> list[tuple[int, int]]:
        """Spatial size after each encoder stage, starting with the input grid."""
        shapes = [self.grid]
        strides = self.strides if self.family != "conv_lstm" else self.strides[:1]
        for s in strides:
            shapes.append(conv_output_shape(shapes[-1], (self.kernel,) * 2, (s, s), (self.kernel // 2,) * 2))
        return shapes

    def flatten_size(self) -> int:
        h, w = self.feature_shapes()[-1]
        return self.enc_channels[-1] * h * w

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lif"] = dataclasses.asdict(self.lif)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["lif"] = LifParams(**d.get("lif", {}))
        for k in ("grid", "enc_channels", "dec_channels", "hidden", "strides"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def default_init_gain(family: str) -> float:
    """Kernel scale that lets spiking layers fire at initialization.

    Plain Glorot kernels keep every membrane below threshold on sparse binary
    frames, so no spike and no gradient ever reaches the encoder.
    """
    return 4.0 if family in SPIKING else 1.0


def default_strides(family: str, n: int) -> tuple[int, ...]:
    # spiking maps keep full resolution; the 1-pixel crack does not survive downsampling into binary spikes
    return (1,) * n if family in SPIKING else (2,) * n


def _output_padding(target: int, src: int, kernel: int, stride: int) -> int:
    op = target - ((src - 1) * stride - 2 * (kernel // 2) + kernel)
    if not 0 <= op < stride:
        raise ValueError(f"cannot invert a stride-{stride} stage from {src} back to {target}")
    return op


class Model:
    """An instantiated :class:`ModelSpec`: ordered named layers plus a forward pass."""

    def __init__(self, spec: ModelSpec, layers: dict[str, Layer], seed: int):
        self.spec = spec
        self.layers = layers
        self.seed = seed

    @property
    def in_len(self) -> int:
        return self.spec.in_len

    @property
    def out_len(self) -> int:
        return self.spec.out_len

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"{ln}.{pn}": p for ln, layer in self.layers.items() for pn, p in layer.params.items()}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def closed_form_param_count(self) -> int:
        return sum(layer.closed_form_count() for layer in self.layers.values())

    def conv_layers(self) -> dict[str, Layer]:
        """Layers whose weights are convolution kernels."""
        kinds = ("conv2d", "conv3d", "deconv2d", "deconv3d", "conv_lstm_cell", "stc_gate")
        return {n: l for n, l in self.layers.items() if l.kind in kinds}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        if set(named) != set(state):
            raise ValueError("checkpoint parameter names do not match the model")
        for k, p in named.items():
            if p.shape != tuple(state[k].shape):
                raise ValueError(f"{k}: shape {state[k].shape} does not match {p.shape}")
            p.data = np.asarray(state[k], dtype=p.data.dtype).copy()

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        for k, p in self.named_parameters().items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()

    # -- forward ------------------------------------------------------------

    def __call__(self, x, return_logits: bool = False) -> Tensor:
        return forward_sequence(self, x, return_logits=return_logits)

    def predict(self, frames: np.ndarray) -> np.ndarray:
        """``(in_len, H, W)`` or ``(B, in_len, H, W)`` frames to predicted frames, no tape."""
        x = np.asarray(frames, dtype=default_dtype())
        single = x.ndim == 3
        with no_grad():
            y = forward_sequence(self, x[None] if single else x).data
        return y[0] if single else y


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    k, pad = spec.kernel, spec.kernel // 2
    layers: dict[str, Layer] = {}
    shapes = spec.feature_shapes()
    if spec.family in ("base_rnn", "base_lstm"):
        c_prev = 1
        for i, (c, s) in enumerate(zip(spec.enc_channels, spec.strides)):
            layers[f"enc{i}"] = Conv(c_prev, c, (3, k, k), rng, stride=(1, s, s), padding=(1, pad, pad), ndim=3)
            c_prev = c
        cell = RNNCell if spec.family == "base_rnn" else LSTMCell
        sizes = [spec.flatten_size(), *spec.hidden, spec.flatten_size()]
        for i in range(len(sizes) - 1):
            layers[f"rec{i}"] = cell(sizes[i], sizes[i + 1], rng)
        _add_decoder(layers, spec, shapes, rng)
    elif spec.family in SPIKING:
        c_prev = 1
        for i, (c, s) in enumerate(zip(spec.enc_channels, spec.strides)):
            layers[f"enc{i}"] = Conv(c_prev, c, k, rng, stride=s, padding=pad)
            if spec.family == "stc_lif":
                layers[f"enc{i}_stc"] = StcGates(c, k, rng)
            c_prev = c
        _add_decoder(layers, spec, shapes, rng)
        if spec.family == "stc_lif":
            for i, c in enumerate(spec.dec_channels):
                layers[f"dec{i}_stc"] = StcGates(c, k, rng)
    else:  # conv_lstm
        c0, s0 = spec.enc_channels[0], spec.strides[0]
        layers["enc0"] = Conv(1, c0, k, rng, stride=s0, padding=pad)
        layers["cell"] = ConvLSTMCell(c0, spec.conv_lstm_hidden, k, rng)
        op = tuple(_output_padding(t, s, k, s0) for t, s in zip(shapes[0], shapes[1]))
        layers["dec0"] = ConvTranspose(spec.conv_lstm_hidden, 1, k, rng, stride=s0, padding=pad, output_padding=op)
    if spec.init_gain != 1.0:
        for layer in layers.values():
            if layer.kind.startswith(("conv", "deconv")):
                layer.weight.data *= np.asarray(spec.init_gain, layer.weight.data.dtype)
    last = layers[f"dec{len(spec.strides) - 1}"] if spec.family != "conv_lstm" else layers["dec0"]
    last.bias.data[...] = spec.output_bias
    return Model(spec, layers, seed)


def prior_logit(targets: np.ndarray, floor: float = 1e-4) -> float:
    """Logit of the mean target intensity, a starting output bias for sparse frames."""
    p = float(np.clip(np.mean(targets, dtype=np.float64), floor, 1 - floor))
    return float(np.log(p / (1 - p)))


def _add_decoder(layers, spec: ModelSpec, shapes, rng) -> None:
    k, pad = spec.kernel, spec.kernel // 2
    chans = [spec.enc_channels[-1], *spec.dec_channels, 1]
    n = len(spec.strides)
    for j in range(n):
        s = spec.strides[n - 1 - j]
        src, dst = shapes[n - j], shapes[n - 1 - j]
        op = tuple(_output_padding(t, q, k, s) for t, q in zip(dst, src))
        layers[f"dec{j}"] = ConvTranspose(chans[j], chans[j + 1], k, rng, stride=s, padding=pad, output_padding=op)


def count_params(model: Model) -> int:
    """Stored scalars, counted by walking every parameter array."""
    return sum(p.size for p in model.parameters())


# ---------------------------------------------------------------------------
# forward passes


def forward_sequence(model: Model, frames, return_logits: bool = False) -> Tensor:
    """Predict ``out_len`` frames from ``in_len`` input frames.

    ``frames`` is ``(B, in_len, H, W)``; the result is ``(B, out_len, H, W)``.
    Recurrent and membrane state start from zero on every call.
    """
    x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=default_dtype()))
    spec = model.spec
    if x.ndim != 4 or x.shape[1] != spec.in_len or tuple(x.shape[2:]) != spec.grid:
        raise ValueError(f"expected (B, {spec.in_len}, {spec.grid[0]}, {spec.grid[1]}) frames, got {x.shape}")
    if spec.family in ("base_rnn", "base_lstm"):
        logits = _forward_flat(model, x)
    else:
        logits = _forward_framewise(model, x)
    return logits if return_logits else logits.sigmoid()


def _decode(model: Model, z: Tensor, spiking_states=None, stc=False) -> Tensor:
    spec = model.spec
    n = len(spec.strides)
    for j in range(n):
        z = model.layers[f"dec{j}"](z)
        if j < n - 1:
            if spiking_states is None:
                z = z.relu()
            else:
                z = _spiking_stage(model, f"dec{j}", z, spiking_states, stc)
    return z


def _spiking_stage(model: Model, name: str, current: Tensor, states: dict, stc: bool) -> Tensor:
    p = model.spec.lif
    st = states.get(name) or LifState.zeros(current.shape)
    st = stc_lif_step(st, current, model.layers[f"{name}_stc"], p) if stc else lif_step(st, current, p)
    states[name] = st
    return st.o


def _forward_framewise(model: Model, x: Tensor) -> Tensor:
    spec = model.spec
    stc = spec.family == "stc_lif"
    states: dict = {}
    cell_state = None

    def step(frame: Tensor) -> Tensor:
        nonlocal cell_state
        if spec.family == "conv_lstm":
            z = model.layers["enc0"](frame).relu()
            if cell_state is None:
                shape = (z.shape[0], spec.conv_lstm_hidden) + z.shape[2:]
                zero = Tensor(np.zeros(shape, default_dtype()))
                cell_state = (zero, zero)
            h, c = model.layers["cell"](z, *cell_state)
            cell_state = (h, c)
            return model.layers["dec0"](h)
        z = frame
        for i in range(len(spec.enc_channels)):
            z = _spiking_stage(model, f"enc{i}", model.layers[f"enc{i}"](z), states, stc)
        return _decode(model, z, states, stc)

    B = x.shape[0]
    h, w = spec.grid
    y = None
    for t in range(spec.in_len):
        y = step(x[:, t : t + 1])
    outs = [y]
    for _ in range(spec.out_len - 1):
        y = step(y.sigmoid())
        outs.append(y)
    return _stack_frames(outs, B, h, w)


def _stack_frames(outs: list[Tensor], B: int, h: int, w: int) -> Tensor:
    if len(outs) == 1:
        return outs[0].reshape(B, 1, h, w)
    from .nn.tensor import concat

    return concat([o.reshape(B, 1, h, w) for o in outs], axis=1)


def _forward_flat(model: Model, x: Tensor) -> Tensor:
    spec = model.spec
    B, T = x.shape[0], spec.in_len
    z = x.reshape(B, 1, T, *spec.grid)
    for i in range(len(spec.enc_channels)):
        z = model.layers[f"enc{i}"](z).relu()
    c, _, hh, ww = z.shape[1:]
    feats = z.transpose(0, 2, 1, 3, 4).reshape(B, T, c * hh * ww)
    cells = [model.layers[f"rec{i}"] for i in range(len(spec.hidden) + 1)]
    lstm = spec.family == "base_lstm"
    hs = [Tensor(np.zeros((B, cell.n_hidden), default_dtype())) for cell in cells]
    cs = [Tensor(np.zeros((B, cell.n_hidden), default_dtype())) for cell in cells] if lstm else None
    zero_in = Tensor(np.zeros((B, c * hh * ww), default_dtype()))
    outs = []
    for t in range(T + spec.out_len - 1):
        inp = feats[:, t] if t < T else zero_in
        for i, cell in enumerate(cells):
            if lstm:
                hs[i], cs[i] = cell(inp, hs[i], cs[i])
            else:
                hs[i] = cell(inp, hs[i])
            inp = hs[i]
        if t >= T - 1:
            outs.append(_decode(model, inp.reshape(B, c, hh, ww)))
    return _stack_frames(outs, B, *spec.grid)


# ---------------------------------------------------------------------------
# baselines, training, rollout


class Persistence:
    """Repeats the most recent input frame."""

    def __init__(self, in_len: int = 3, out_len: int = 1):
        self.in_len, self.out_len = in_len, out_len

    def predict(self, frames: np.ndarray) -> np.ndarray:
        x = np.asarray(frames)
        last = x[..., -1:, :, :]
        return np.repeat(last, self.out_len, axis=-3)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 0
    checkpoint_every: int = 0
    shuffle: bool = True
    max_seconds: float | None = None  # wall-clock cap checked after each epoch; breaks bit-reproducibility

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.max_seconds is not None and self.max_seconds <= 0:
            raise ValueError("max_seconds must be positive")


@dataclass
class TrainResult:
    model: Model
    history: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [h["train_loss"] for h in self.history]


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, result: TrainResult):
        super().__init__(f"non-finite loss in epoch {epoch}; parameters restored to the last finite epoch")
        self.epoch = epoch
        self.result = result


def train_step(model: Model, inputs: np.ndarray, targets: np.ndarray, state: AdamState) -> float:
    params = model.parameters()
    for p in params:
        p.grad = None
    loss = mse_loss(forward_sequence(model, inputs), targets)
    loss.backward()
    adam_update(params, [p.grad for p in params], state)
    return float(loss.data)


def evaluate_mse(model: Model, data: WindowedDataset, batch_size: int = 16) -> float:
    total = 0.0
    for i in range(0, len(data), batch_size):
        pred = model.predict(data.inputs[i : i + batch_size])
        total += float(np.sum((pred - data.targets[i : i + batch_size]) ** 2, dtype=np.float64))
    return total / data.targets.size


def one_step_mae(predictor: Predictor, data: WindowedDataset, batch_size: int = 16) -> float:
    total = 0.0
    for i in range(0, len(data), batch_size):
        pred = np.asarray(predictor.predict(data.inputs[i : i + batch_size]))
        total += float(np.sum(np.abs(pred - data.targets[i : i + batch_size]), dtype=np.float64))
    return total / data.targets.size


def train(
    model: Model,
    dataset: WindowedDataset,
    cfg: TrainConfig,
    eval_data: WindowedDataset | None = None,
    out_dir: str | os.PathLike | None = None,
) -> TrainResult:
    """Mini-batch Adam on MSE. Writes ``train_log.csv`` and checkpoints under ``out_dir``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    spec = model.spec
    if dataset.in_len != spec.in_len or dataset.out_len != spec.out_len or dataset.inputs.shape[2:] != spec.grid:
        raise ValueError("dataset shapes do not match the model spec")
    result = TrainResult(model)
    if cfg.epochs == 0:
        return result
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    state = AdamState.init(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    good = model.state_dict()
    n = len(dataset)
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        losses, weights = [], []
        for i in range(0, n, cfg.batch_size):
            idx = np.sort(order[i : i + cfg.batch_size])
            loss = train_step(model, dataset.inputs[idx], dataset.targets[idx], state)
            if not math.isfinite(loss):
                model.load_state_dict(good)
                raise TrainingDivergedError(epoch, result)
            losses.append(loss)
            weights.append(len(idx))
        rec = {
            "epoch": epoch,
            "train_loss": float(np.average(losses, weights=weights)),
            "eval_mae": None,
            "seconds": time.perf_counter() - t0,
        }
        if eval_data is not None and cfg.eval_every and epoch % cfg.eval_every == 0:
            rec["eval_mae"] = one_step_mae(model, eval_data)
        result.history.append(rec)
        good = model.state_dict()
        log.info("epoch %d loss %.6g", epoch, rec["train_loss"])
        if out is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_model(model, out / f"epoch_{epoch:04d}", {"epoch": epoch})
        if cfg.max_seconds is not None and rec["seconds"] >= cfg.max_seconds:
            log.info("time budget reached after epoch %d", epoch)
            break
    if out is not None:
        write_train_log(result.history, out / "train_log.csv")
        save_model(model, out / "final", {"epoch": len(result.history)})
    return result


def write_train_log(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "eval_mae"])
        for h in history:
            w.writerow([h["epoch"], repr(h["train_loss"]), "" if h["eval_mae"] is None else repr(h["eval_mae"])])


def default_refeed_threshold(family: str | None, binary_data: bool) -> float | None:
    return 0.5 if binary_data and family in SPIKING else None


def rollout_autoregressive(
    predictor: Predictor, seed_frames: np.ndarray, n_future: int, refeed_threshold: float | None = None
) -> np.ndarray:
    """Extend ``seed_frames`` by ``n_future`` predicted frames.

    Each hop predicts ``out_len`` frames from the last ``in_len`` known or
    predicted frames. With ``refeed_threshold`` set, predictions are binarized
    before being fed back; the returned frames are the raw predictions.
    """
    if n_future <= 0:
        raise ValueError("n_future must be positive")
    seed = np.asarray(seed_frames, dtype=np.float32)
    if seed.shape[0] != predictor.in_len:
        raise ValueError(f"need exactly {predictor.in_len} seed frames, got {seed.shape[0]}")
    context = list(seed)
    produced: list[np.ndarray] = []
    while len(produced) < n_future:
        pred = np.asarray(predictor.predict(np.stack(context[-predictor.in_len :])), dtype=np.float32)
        for f in pred:
            produced.append(f)
            context.append((f >= refeed_threshold).astype(np.float32) if refeed_threshold is not None else f)
    return np.stack(produced[:n_future])


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: Model, path, meta: dict | None = None) -> Path:
    m = {"spec": model.spec.to_dict(), "seed": model.seed, "layers": {n: l.config() for n, l in model.layers.items()}}
    if model.spec.family == "stc_lif":
        m["stc_calibration"] = STC_CALIBRATION
    m.update(meta or {})
    return save_params(model.state_dict(), path, m)


def load_model(path) -> Model:
    params, manifest = load_params(path)
    meta = manifest["meta"]
    model = build_model(ModelSpec.from_dict(meta["spec"]), meta.get("seed", 0))
    model.load_state_dict(params)
    return model
