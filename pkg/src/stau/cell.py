"""The spatiotemporal-aware recurrent unit.

A unit at (time t, layer k) sees the temporal states of its own layer over the
last tau steps and the spatial states of the layers below over the last theta
layers. The temporal attention module (TAM) weights past temporal states by
how well past spatial states match the current one; the spatial attention
module (SAM) weights lower-layer spatial states by how well lower-layer
temporal states match the current one. A GRU-like fusion module then mixes the
two augmented streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

MODULATION = ("ws", "wt")
FUSION = ("wtu", "wsu", "wtt", "wst", "wss", "wts")
CONV_NAMES = MODULATION + FUSION

SUPERVISION = ("cross", "self")


@dataclass(frozen=True)
class VariantFlags:
    use_tam: bool = True
    use_sam: bool = True
    temporal_supervision: str = "cross"
    spatial_supervision: str = "cross"
    per_location_scores: bool = False

    def __post_init__(self):
        for v in (self.temporal_supervision, self.spatial_supervision):
            if v not in SUPERVISION:
                raise ValueError(f"supervision must be one of {SUPERVISION}, got {v!r}")


@dataclass
class CellTrace:
    """Attention weights and gate statistics emitted by one cell step.

    ``alphas``/``betas`` hold one (B,) array per history entry (per-sample
    scalars) or (B,H,W) maps when per-location scoring is on.
    """

    alphas: list = field(default_factory=list)
    betas: list = field(default_factory=list)
    gate_means: dict = field(default_factory=dict)
    maps: dict | None = None


class _ConvLN:
    """Same-padded conv followed by layer normalization."""

    def __init__(self, channels, kernel, rng, bias=True, dtype=T.DEFAULT_DTYPE):
        fan_in = channels * kernel * kernel
        self.weight = Parameter(T.kaiming_uniform(rng, (channels, channels, kernel, kernel), fan_in, dtype))
        self.bias = Parameter(np.zeros((1, channels, 1, 1), dtype)) if bias else None
        self.gain = Parameter(np.ones((1, channels, 1, 1), dtype))
        self.shift = Parameter(np.zeros((1, channels, 1, 1), dtype))
        self.padding = kernel // 2

    def __call__(self, x):
        y = T.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)
        return T.layer_norm(y, self.gain, self.shift)

    def named_parameters(self, prefix):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias
        yield f"{prefix}.ln_gain", self.gain
        yield f"{prefix}.ln_bias", self.shift


def conv_ln_group(x, convs):
    """Apply several biased _ConvLN blocks to the same input with one shared im2col.

    Mathematically identical to ``[c(x) for c in convs]``.
    """
    if len(convs) == 1:
        return [convs[0](x)]
    w = T.concat([c.weight for c in convs], axis=0)
    b = T.concat([c.bias for c in convs], axis=1)
    y = T.conv2d(x, w, b, stride=1, padding=convs[0].padding)
    parts = T.split_channels(y, [c.weight.shape[0] for c in convs])
    return [T.layer_norm(p, c.gain, c.shift) for p, c in zip(parts, convs)]


def temporal_attention(keys, s_mod, values, per_location=False):
    """Aggregate temporal history ``values`` with weights softmax(keys[i] . s_mod).

    Histories are most-recent-first and must have equal length >= 1.
    Returns (T_att, alphas).
    """
    if not keys or not values:
        raise ValueError("temporal_attention: empty history")
    if len(keys) != len(values):
        raise ValueError("temporal_attention: key/value histories differ in length")
    scores = [T.dot_score(k, s_mod, per_location) for k in keys]
    alphas = T.score_softmax(scores)
    return T.weighted_sum(alphas, values), alphas


def temporal_fusion(t_att, t_prev, t_mod):
    """T_AMI = F_T*T_{t-1} + (1-F_T)*T_att with F_T = sigmoid(T')."""
    gate = T.sigmoid(t_mod)
    return T.affine_combine(gate, t_prev, t_att), gate


def spatial_attention(keys, t_mod, stack, per_location=False):
    """Aggregate the lower-layer spatial ``stack`` with weights softmax(keys[i] . t_mod)."""
    if not keys or not stack:
        raise ValueError("spatial_attention: empty stack")
    if len(keys) != len(stack):
        raise ValueError("spatial_attention: key/stack lengths differ")
    scores = [T.dot_score(k, t_mod, per_location) for k in keys]
    betas = T.score_softmax(scores)
    return T.weighted_sum(betas, stack), betas


def spatial_fusion(s_att, s_cur, s_mod):
    """S_AAI = F_S*S_t^{k-1} + (1-F_S)*S_att with F_S = sigmoid(S')."""
    gate = T.sigmoid(s_mod)
    return T.affine_combine(gate, s_cur, s_att), gate


class StauCell:
    def __init__(self, channels, kernel=5, tau=5, theta=5, flags=None, rng=None,
                 dtype=T.DEFAULT_DTYPE):
        if tau < 1 or theta < 1:
            raise ValueError("tau and theta must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.kernel = kernel
        self.tau = tau
        self.theta = theta
        self.flags = flags or VariantFlags()
        # W_s / W_t only modulate queries and gates; no conv bias
        self.convs = {name: _ConvLN(channels, kernel, rng, bias=name not in MODULATION, dtype=dtype)
                      for name in CONV_NAMES}

    def named_parameters(self, prefix="cell"):
        for name in CONV_NAMES:
            yield from self.convs[name].named_parameters(f"{prefix}.{name}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def fusion_update(self, t_ami, s_aai, s_cur, gamma, gates=None):
        """Final state update; returns (T_t^k, S_t^k)."""
        if gamma < 0:
            raise ValueError("gamma must be >= 0")
        c = self.convs
        tu, tt, ts = conv_ln_group(t_ami, [c["wtu"], c["wtt"], c["wts"]])
        su, st, ss = conv_ln_group(s_aai, [c["wsu"], c["wst"], c["wss"]])
        u_t = T.sigmoid(tu)
        u_s = T.sigmoid(su)
        t_new = T.affine_combine(u_t, tt, st)
        s_new = T.affine_combine(u_s, ss, ts)
        if gamma:
            s_new = T.add(s_new, T.scale(s_cur, gamma))
        if gates is not None:
            gates["U_T"] = u_t
            gates["U_S"] = u_s
        return t_new, s_new

    def step(self, temporal_hist, spatial_hist, layer_temporal_hist, spatial_stack, gamma,
             record_maps=False):
        """One state transition.

        temporal_hist:       [T_{t-1}^k, ..., T_{t-tau'}^k]
        spatial_hist:        [S_t^{k-1}, ..., S_{t-tau'+1}^{k-1}]  (TAM keys)
        layer_temporal_hist: [T_{t-1}^k, ..., T_{t-1}^{k-theta'+1}]  (SAM keys)
        spatial_stack:       [S_t^{k-1}, ..., S_t^{k-theta'}]
        """
        if not temporal_hist or not spatial_stack:
            raise ValueError("cell step needs non-empty histories")
        if len(temporal_hist) > self.tau or len(spatial_stack) > self.theta:
            raise ValueError("history longer than the configured window")
        fl = self.flags
        c = self.convs
        t_prev = temporal_hist[0]
        s_cur = spatial_stack[0]
        s_mod = c["ws"](s_cur)
        t_mod = c["wt"](t_prev)
        trace = CellTrace()
        gates = {}

        if fl.use_tam:
            keys = spatial_hist if fl.temporal_supervision == "cross" else temporal_hist
            q = s_mod if fl.temporal_supervision == "cross" else t_mod
            t_att, alphas = temporal_attention(keys, q, temporal_hist, fl.per_location_scores)
            t_ami, f_t = temporal_fusion(t_att, t_prev, t_mod)
            gates["F_T"] = f_t
            trace.alphas = [_squeeze(a) for a in alphas]
        else:
            t_att = t_ami = t_prev

        if fl.use_sam:
            keys = layer_temporal_hist if fl.spatial_supervision == "cross" else spatial_stack
            q = t_mod if fl.spatial_supervision == "cross" else s_mod
            s_att, betas = spatial_attention(keys, q, spatial_stack, fl.per_location_scores)
            s_aai, f_s = spatial_fusion(s_att, s_cur, s_mod)
            gates["F_S"] = f_s
            trace.betas = [_squeeze(b) for b in betas]
        else:
            s_att = s_aai = s_cur

        t_new, s_new = self.fusion_update(t_ami, s_aai, s_cur, gamma, gates)
        trace.gate_means = {k: float(v.data.mean(dtype=np.float64)) for k, v in gates.items()}
        if record_maps:
            trace.maps = {k: v.data.copy() for k, v in gates.items()}
            for name, v in (("T_prev", t_prev), ("T_att", t_att), ("T_AMI", t_ami),
                            ("S_cur", s_cur), ("S_att", s_att), ("S_AAI", s_aai),
                            ("T_new", t_new), ("S_new", s_new)):
                trace.maps[name] = v.data.copy()
        return t_new, s_new, trace

    def macs_per_step(self, height, width, tau_eff=None, theta_eff=None):
        """Multiply-accumulates for one cell step on one sample."""
        c, k = self.channels, self.kernel
        conv = len(CONV_NAMES) * c * c * k * k * height * width
        tau_eff = self.tau if tau_eff is None else tau_eff
        theta_eff = self.theta if theta_eff is None else theta_eff
        state = c * height * width
        attn = 0
        if self.flags.use_tam:
            attn += 2 * tau_eff * state  # scores + weighted sum
        if self.flags.use_sam:
            attn += 2 * theta_eff * state
        return conv + attn


def _squeeze(t: Tensor):
    d = t.data
    return d.reshape(d.shape[0]) if d.shape[1:] == (1, 1, 1) else d[:, 0]
