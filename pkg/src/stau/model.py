"""Encoder / stacked STAU cells / decoder, the training rollout and checkpoints."""

from __future__ import annotations

import io
import json
import os
import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cell import StauCell
from .config import RunConfig
from .tensor import Parameter, Tensor

CKPT_MAGIC = b"STAUCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# state windows


def window_ids(t, k, tau, theta):
    """Symbolic (time, layer) ids of the states a cell at (t, k) reads.

    Returns (temporal, spatial_keys, layer_temporal, spatial_stack), each
    most-recent / top-layer first. Temporal layer indices start at 1 since no
    temporal state exists below the first cell.
    """
    temporal = [(j, k) for j in range(t - 1, max(t - tau, 0) - 1, -1)]
    spatial_keys = [(j, k - 1) for j in range(t, max(t - tau + 1, 1) - 1, -1)]
    layer_temporal = [(t - 1, i) for i in range(k, max(k - theta + 1, 1) - 1, -1)]
    spatial_stack = [(t, i) for i in range(k - 1, max(k - theta, 0) - 1, -1)]
    return temporal, spatial_keys, layer_temporal, spatial_stack


class StateBuffers:
    """Clamped spatiotemporal state windows for one rollout.

    States are opaque objects here, so the same class drives both the model
    and the symbolic window checks.
    """

    def __init__(self, layers, tau, theta, initial_temporal):
        if len(initial_temporal) != layers:
            raise ValueError("need one initial temporal state per layer")
        self.layers = layers
        self.tau = tau
        self.theta = theta
        self.temporal = [deque([t0], maxlen=tau) for t0 in initial_temporal]
        # spatial[k-1] holds the recent S^{k-1}, newest first
        self.spatial = [deque(maxlen=tau) for _ in range(layers)]
        self.prev_temporal = list(initial_temporal)
        self.stack = []

    def begin_step(self, s0):
        self.prev_temporal = [dq[0] for dq in self.temporal]
        self.stack = [s0]
        self.spatial[0].appendleft(s0)

    def view(self, k):
        if not 1 <= k <= self.layers or len(self.stack) != k:
            raise IndexError(f"layer {k} not ready (have {len(self.stack)} spatial states)")
        width = min(self.theta, k)
        temporal = list(self.temporal[k - 1])
        spatial_keys = list(self.spatial[k - 1])
        layer_temporal = [self.prev_temporal[k - i] for i in range(1, width + 1)]
        spatial_stack = [self.stack[k - j] for j in range(1, width + 1)]
        return temporal, spatial_keys, layer_temporal, spatial_stack

    def push(self, k, t_new, s_new):
        self.temporal[k - 1].appendleft(t_new)
        self.stack.append(s_new)
        if k < self.layers:
            self.spatial[k].appendleft(s_new)


# ---------------------------------------------------------------------------
# model


@dataclass
class RolloutResult:
    predictions: list  # Tensors for v_2 .. v_T
    loss: Tensor
    step_losses: list = field(default_factory=list)
    traces: list = field(default_factory=list)  # traces[t-1][k-1]


class PredictiveModel:
    def __init__(self, config: RunConfig, rng=None, dtype=T.DEFAULT_DTYPE):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        c, e = config.hidden, config.encoder_depth
        ch = config.frame_channels
        self.gamma = config.gamma
        self.encoder = []
        cin = ch
        for _ in range(e):
            w = Parameter(T.kaiming_uniform(rng, (c, cin, 3, 3), cin * 9, dtype))
            b = Parameter(np.zeros((1, c, 1, 1), dtype))
            self.encoder.append((w, b))
            cin = c
        self.cells = [StauCell(c, config.kernel, config.tau, config.theta, config.flags, rng, dtype)
                      for _ in range(config.layers)]
        self.decoder = []
        for i in range(e):
            cout = ch if i == e - 1 else c
            w = Parameter(T.kaiming_uniform(rng, (c, cout, 3, 3), c * 9, dtype))
            b = Parameter(np.zeros((1, cout, 1, 1), dtype))
            self.decoder.append((w, b))

    # parameters ------------------------------------------------------------

    def named_parameters(self):
        for i, (w, b) in enumerate(self.encoder):
            yield f"enc.{i}.weight", w
            yield f"enc.{i}.bias", b
        for k, cell in enumerate(self.cells, 1):
            yield from cell.named_parameters(f"cell.{k}")
        for i, (w, b) in enumerate(self.decoder):
            yield f"dec.{i}.weight", w
            yield f"dec.{i}.bias", b

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())

    def astype(self, dtype):
        for p in self.parameters():
            p.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.encoder[0][0].dtype

    # encoder / decoder -----------------------------------------------------

    def encode(self, frame: Tensor) -> Tensor:
        h, w = frame.shape[2:]
        f = 2 ** len(self.encoder)
        if h % f or w % f:
            raise ValueError(f"frame size {h}x{w} not divisible by {f}")
        x = frame
        for wt, b in self.encoder:
            x = T.leaky_relu(T.conv2d(x, wt, b, stride=2, padding=1), 0.2)
        return x

    def decode(self, state: Tensor) -> Tensor:
        if state.shape[1] != self.config.hidden:
            raise ValueError(f"state has {state.shape[1]} channels, expected {self.config.hidden}")
        x = state
        last = len(self.decoder) - 1
        for i, (wt, b) in enumerate(self.decoder):
            # output_padding 1 makes each layer exactly double H and W
            x = T.deconv2d(x, wt, b, stride=2, padding=1, output_padding=1)
            x = T.sigmoid(x) if i == last else T.leaky_relu(x, 0.2)
        return x

    # rollout ---------------------------------------------------------------

    def rollout(self, frames, mode="teacher_forced", after_step=None, record_maps=False):
        """Run the recurrent model over a frame batch (B, T, C, H, W).

        At step t the model reads v_t (or its own prediction of v_t when
        closed-loop and t > after_step) and predicts v_{t+1}. The loss is the
        sum over steps of per-pixel MSE.
        """
        frames = np.asarray(frames)
        if frames.ndim != 5:
            raise ValueError("frames must be (B, T, C, H, W)")
        n_steps = frames.shape[1]
        if n_steps < 2:
            raise ValueError("need at least 2 frames")
        if mode == "closed_loop":
            if after_step is None or not 1 <= after_step < n_steps:
                raise ValueError(f"after_step must lie in [1, {n_steps - 1}]")
        elif mode == "teacher_forced":
            after_step = n_steps
        else:
            raise ValueError(f"unknown rollout mode {mode!r}")

        dtype = self.dtype
        frames = frames.astype(dtype, copy=False)
        buffers = None
        predictions, step_losses, traces = [], [], []
        for t in range(1, n_steps):
            if t > after_step:
                inp = predictions[-1]
            else:
                inp = Tensor(frames[:, t - 1])
            s0 = self.encode(inp)
            if buffers is None:
                zeros = Tensor(np.zeros(s0.shape, dtype))
                buffers = StateBuffers(len(self.cells), self.config.tau, self.config.theta,
                                       [zeros] * len(self.cells))
            buffers.begin_step(s0)
            step_traces = []
            for k, cell in enumerate(self.cells, 1):
                t_new, s_new, trace = cell.step(*buffers.view(k), self.gamma, record_maps)
                buffers.push(k, t_new, s_new)
                step_traces.append(trace)
            pred = self.decode(buffers.stack[-1])
            predictions.append(pred)
            step_losses.append(T.mse_loss(pred, Tensor(frames[:, t])))
            traces.append(step_traces)
        loss = T.sum_scalars(step_losses)
        return RolloutResult(predictions, loss, step_losses, traces)

    def predict(self, frames, cond_len):
        """Closed-loop prediction with gradients off; returns (B, T-1, C, H, W) numpy."""
        with T.no_grad():
            res = self.rollout(frames, "closed_loop", after_step=cond_len)
        return np.stack([p.data for p in res.predictions], axis=1), res

    # cost accounting ---------------------------------------------------------

    def macs_per_step(self):
        """Per-sample multiply-accumulates of one time step (all cells, full windows)."""
        cfg = self.config
        h = cfg.canvas // 2 ** cfg.encoder_depth
        return sum(cell.macs_per_step(h, h, cell.tau, min(cell.theta, k))
                   for k, cell in enumerate(self.cells, 1))


def parameter_count(config: RunConfig) -> int:
    """Closed-form parameter count of PredictiveModel(config)."""
    c, ch, e, k = config.hidden, config.frame_channels, config.encoder_depth, config.kernel
    enc = (c * ch * 9 + c) + (e - 1) * (c * c * 9 + c)
    dec = (e - 1) * (c * c * 9 + c) + (c * ch * 9 + ch)
    conv = c * c * k * k
    cell = 2 * conv + 6 * (conv + c) + 8 * 2 * c
    return enc + dec + config.layers * cell


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: PredictiveModel, step=0, extra=None, optimizer=None):
    """Write parameters (and Adam state) in the STAUCKPT container."""
    tensors = []
    steps = {}
    for name, p in model.named_parameters():
        tensors.append((name, p.data))
        if optimizer is not None:
            tensors.append((f"adam.m/{name}", p.m))
            tensors.append((f"adam.v/{name}", p.v))
            steps[name] = p.step
    meta = {
        "config": model.config.to_dict(),
        "step": step,
        "tensor_count": len(tensors),
        "adam_steps": steps,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    # write-then-rename so an interrupted save never clobbers the last good file
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def _write_tensor(buf, name, arr):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    if arr.ndim != 4:
        raise ValueError(f"tensor {name} is not rank 4")
    buf.write(struct.pack("<4I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path):
    """Parse a STAUCKPT file into (meta, {name: float32 array})."""
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("corrupt checkpoint: truncated file")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(8)) != CKPT_MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    (mlen,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(bytes(take(mlen)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: bad header ({exc})") from None
    tensors = {}
    for _ in range(meta.get("tensor_count", 0)):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        dims = struct.unpack("<4I", take(16))
        count = int(np.prod(dims))
        arr = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
        tensors[name] = arr
    if pos != len(data):
        raise CheckpointError("corrupt checkpoint: trailing bytes")
    return meta, tensors


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; returns (model, meta)."""
    meta, tensors = read_checkpoint(path)
    config = RunConfig.from_dict(meta["config"])
    model = PredictiveModel(config)
    steps = meta.get("adam_steps", {})
    for name, p in model.named_parameters():
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name}")
        if tensors[name].shape != p.shape:
            raise CheckpointError(f"tensor {name}: shape {tensors[name].shape} != {p.shape}")
        p.data = tensors[name].copy()
        if f"adam.m/{name}" in tensors:
            p.m = tensors[f"adam.m/{name}"].copy()
            p.v = tensors[f"adam.v/{name}"].copy()
            p.step = int(steps.get(name, 0))
    return model, meta
