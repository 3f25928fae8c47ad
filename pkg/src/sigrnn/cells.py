"""Recurrent cells, signature-gated variants, stacking, and the linear head.

Four layer kinds: `lstm` and `gru` are the standard gated cells; under
`sig_lstm` the forget gate, and under `sig_gru` the reset gate, is driven
by the time-normalized prefix signature of a learned low-dimensional
projection of the layer input. The signature gate has no input kernel and
no recurrent kernel, only the signature-space weight and a bias, so at
step 1 (empty path) it equals sigmoid(bias).

Every layer maps (B, T, D) -> (B, T, H); the head reads either the last
hidden state or the flattened full sequence. Forward passes cache enough
to run the hand-written reverse-mode pass in `*_layer_backward`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import FLOAT, RngStream, as_tensor3, glorot_uniform, orthogonal, sigmoid
from .signature import (
    ProjectionParams,
    SigSpec,
    normalize_stream_values,
    sig_stream_backward,
    sig_stream_batch,
)

LAYER_KINDS = ("lstm", "gru", "sig_lstm", "sig_gru")
SIG_KINDS = ("sig_lstm", "sig_gru")
DEFAULT_HIDDEN = 100
DEFAULT_PROJ_DIM = 5
DEFAULT_SIG_DEPTH = 2

# gates carrying (b, U, W) triples, in checkpoint order (alphabetical)
STANDARD_GATES = {
    "lstm": ("c", "f", "i", "o"),
    "gru": ("h", "r", "z"),
    "sig_lstm": ("c", "i", "o"),
    "sig_gru": ("h", "z"),
}


@dataclass(frozen=True)
class GateParams:
    """One gate's affine parameters: W (H, D), U (H, H), b (H,)."""

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class LstmParams:
    i: GateParams
    f: GateParams
    c: GateParams
    o: GateParams


@dataclass(frozen=True)
class GruParams:
    z: GateParams
    r: GateParams
    h: GateParams


@dataclass(frozen=True)
class SigLstmParams:
    """LSTM parameters without the forget gate (replaced by the signature gate)."""

    i: GateParams
    c: GateParams
    o: GateParams


@dataclass(frozen=True)
class SigGruParams:
    """GRU parameters without the reset gate (replaced by the signature gate)."""

    z: GateParams
    h: GateParams


@dataclass(frozen=True)
class SigGateParams:
    """Signature gate: project input, stream signatures, then one affine map.

    W_gate has shape (H, sig_dim(path_dim, depth)); its column count is
    tied to `spec`, checked at construction.
    """

    projection: ProjectionParams
    W_gate: np.ndarray
    b_gate: np.ndarray
    spec: SigSpec

    def __post_init__(self):
        if self.projection.path_dim != self.spec.path_dim:
            raise ShapeError(
                f"SigGateParams: projection maps to {self.projection.path_dim} dims "
                f"but spec.path_dim is {self.spec.path_dim}"
            )
        if self.W_gate.shape[1] != self.spec.dim:
            raise ShapeError(
                f"SigGateParams: W_gate {self.W_gate.shape} does not match "
                f"signature dim {self.spec.dim}"
            )


@dataclass(frozen=True)
class LayerConfig:
    kind: str
    hidden: int
    sig_depth: int | None = None
    proj_dim: int | None = None
    return_sequences: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}; valid: {LAYER_KINDS}")
        if self.hidden < 1:
            raise ConfigError(f"hidden width must be >= 1, got {self.hidden}")
        if self.kind in SIG_KINDS:
            if self.sig_depth is None or self.proj_dim is None:
                raise ConfigError(f"{self.kind} layers need sig_depth and proj_dim")
            SigSpec(self.proj_dim, self.sig_depth)  # validates ranges
        elif self.sig_depth is not None or self.proj_dim is not None:
            raise ConfigError(f"{self.kind} layers take no signature fields")

    @property
    def is_sig(self) -> bool:
        return self.kind in SIG_KINDS


@dataclass(frozen=True)
class ModelConfig:
    """Layer stack plus head wiring.

    seq_len is only required when flatten_output is set, because the
    flattened head consumes T*H features and must be sized up front.
    """

    layers: tuple
    input_dim: int
    flatten_output: bool = False
    seq_len: int | None = None

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ConfigError("ModelConfig: need at least one layer")
        if self.input_dim < 1:
            raise ConfigError(f"ModelConfig: input_dim must be >= 1, got {self.input_dim}")
        widths = {layer.hidden for layer in layers}
        if len(widths) != 1:
            raise ConfigError(f"ModelConfig: hidden width must be uniform, got {sorted(widths)}")
        if self.flatten_output and self.seq_len is None:
            raise ConfigError("ModelConfig: flatten_output requires seq_len")
        for layer in layers[:-1]:
            if not layer.return_sequences:
                raise ConfigError("ModelConfig: inner layers must return sequences")
        if layers[-1].return_sequences != self.flatten_output:
            raise ConfigError(
                "ModelConfig: last layer return_sequences must equal flatten_output"
            )

    @property
    def hidden(self) -> int:
        return self.layers[0].hidden

    def layer_input_dim(self, index: int) -> int:
        return self.input_dim if index == 0 else self.hidden

    def head_input_dim(self) -> int:
        if self.flatten_output:
            return self.seq_len * self.hidden
        return self.hidden

    def to_json(self) -> str:
        payload = {
            "input_dim": self.input_dim,
            "flatten_output": self.flatten_output,
            "seq_len": self.seq_len,
            "layers": [
                {
                    "kind": l.kind,
                    "hidden": l.hidden,
                    "sig_depth": l.sig_depth,
                    "proj_dim": l.proj_dim,
                    "return_sequences": l.return_sequences,
                }
                for l in self.layers
            ],
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        payload = json.loads(text)
        layers = tuple(LayerConfig(**entry) for entry in payload["layers"])
        return cls(
            layers=layers,
            input_dim=payload["input_dim"],
            flatten_output=payload["flatten_output"],
            seq_len=payload["seq_len"],
        )


def parse_variant(
    name: str,
    input_dim: int,
    hidden: int = DEFAULT_HIDDEN,
    proj_dim: int = DEFAULT_PROJ_DIM,
    flatten: bool = False,
    seq_len: int | None = None,
) -> ModelConfig:
    """Build a ModelConfig from a variant string.

    Grammar: `lstm` / `gru` are single baseline layers and `lstm-3` is a
    3-layer baseline; `sig_lstm-3-2` stacks one signature layer of depth 3
    and one of depth 2 (suffix length = layer count, values = per-layer
    signature depths); bare `sig_lstm` means one layer of depth 2. The
    two-layer setups from the reference tables are `lstm-2`, `sig_gru-3-3`,
    and so on.
    """
    head, _, suffix = name.partition("-")
    if head not in LAYER_KINDS:
        raise ConfigError(
            f"unknown model variant {name!r}; valid kinds: {', '.join(LAYER_KINDS)} "
            "with optional -N (baseline layer count) or -d1-d2-... (signature depths)"
        )
    try:
        numbers = [int(part) for part in suffix.split("-")] if suffix else []
    except ValueError:
        raise ConfigError(f"malformed variant suffix in {name!r}") from None
    if head in SIG_KINDS:
        depths = numbers or [DEFAULT_SIG_DEPTH]
        layers = [
            LayerConfig(head, hidden, sig_depth=d, proj_dim=proj_dim, return_sequences=True)
            for d in depths
        ]
    else:
        if len(numbers) > 1:
            raise ConfigError(f"baseline variant {name!r} takes a single layer count")
        count = numbers[0] if numbers else 1
        if count < 1:
            raise ConfigError(f"layer count must be >= 1 in {name!r}")
        layers = [LayerConfig(head, hidden, return_sequences=True) for _ in range(count)]
    last = layers[-1]
    layers[-1] = LayerConfig(last.kind, last.hidden, last.sig_depth, last.proj_dim, flatten)
    return ModelConfig(
        layers=tuple(layers), input_dim=input_dim, flatten_output=flatten, seq_len=seq_len
    )


# ---------------------------------------------------------------------------
# Parameter naming, initialization, and views.
# ---------------------------------------------------------------------------


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Canonical parameter order and shapes; checkpointing relies on it."""
    shapes: dict[str, tuple] = {}
    for idx, layer in enumerate(config.layers):
        d_in = config.layer_input_dim(idx)
        h = layer.hidden
        for gate in STANDARD_GATES[layer.kind]:
            shapes[f"layer{idx}.{gate}.b"] = (h,)
            shapes[f"layer{idx}.{gate}.U"] = (h, h)
            shapes[f"layer{idx}.{gate}.W"] = (h, d_in)
        if layer.is_sig:
            spec = SigSpec(layer.proj_dim, layer.sig_depth)
            shapes[f"layer{idx}.sig.b_gate"] = (h,)
            shapes[f"layer{idx}.sig.W_gate"] = (h, spec.dim)
            shapes[f"layer{idx}.sig.W_sig"] = (d_in, layer.proj_dim)
    shapes["head.b"] = (1,)
    shapes["head.W"] = (1, config.head_input_dim())
    return shapes


def init_params(config: ModelConfig, rng: RngStream) -> dict[str, np.ndarray]:
    """Glorot input kernels, orthogonal recurrent kernels, zero biases.

    The baseline LSTM forget-gate bias starts at 1.0, and so does the
    signature-gate bias of sig_lstm layers (it plays the same role).
    """
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        local = name.split(".", 1)[1]
        if local.endswith(".b") or local in ("b", "sig.b_gate"):
            params[name] = np.zeros(shape, dtype=FLOAT)
        elif local.endswith(".U"):
            params[name] = orthogonal(rng, *shape)
        else:
            params[name] = glorot_uniform(rng, *shape)
    for idx, layer in enumerate(config.layers):
        if layer.kind == "lstm":
            params[f"layer{idx}.f.b"][:] = 1.0
        elif layer.kind == "sig_lstm":
            params[f"layer{idx}.sig.b_gate"][:] = 1.0
    return params


def _gate(params: dict, idx: int, gate: str) -> GateParams:
    return GateParams(
        W=params[f"layer{idx}.{gate}.W"],
        U=params[f"layer{idx}.{gate}.U"],
        b=params[f"layer{idx}.{gate}.b"],
    )


def _sig_gate(params: dict, idx: int, layer: LayerConfig) -> SigGateParams:
    return SigGateParams(
        projection=ProjectionParams(params[f"layer{idx}.sig.W_sig"]),
        W_gate=params[f"layer{idx}.sig.W_gate"],
        b_gate=params[f"layer{idx}.sig.b_gate"],
        spec=SigSpec(layer.proj_dim, layer.sig_depth),
    )


def layer_param_view(params: dict, idx: int, layer: LayerConfig):
    if layer.kind == "lstm":
        return LstmParams(*(_gate(params, idx, g) for g in "ifco"))
    if layer.kind == "gru":
        return GruParams(*(_gate(params, idx, g) for g in "zrh"))
    if layer.kind == "sig_lstm":
        return SigLstmParams(*(_gate(params, idx, g) for g in "ico")), _sig_gate(params, idx, layer)
    return SigGruParams(*(_gate(params, idx, g) for g in "zh")), _sig_gate(params, idx, layer)


# ---------------------------------------------------------------------------
# Layer kernels. Inputs (B, T, D); input-kernel transforms are batched over
# the whole sequence up front, the recurrence runs per step.
# ---------------------------------------------------------------------------


def _input_transform(x: np.ndarray, gate: GateParams) -> np.ndarray:
    return np.einsum("btd,hd->bth", x, gate.W) + gate.b


def _shifted(seq: np.ndarray) -> np.ndarray:
    """h_{t-1} stack: zeros at t=0, then seq shifted right by one step."""
    prev = np.zeros_like(seq)
    prev[:, 1:] = seq[:, :-1]
    return prev


def _check_layer_input(x: np.ndarray, d_expected: int, kind: str) -> np.ndarray:
    x = as_tensor3(x, f"{kind} input")
    if x.shape[2] != d_expected:
        raise ShapeError(
            f"{kind}: input features {x.shape} do not match parameter width {d_expected}"
        )
    return x


def lstm_layer_forward(x: np.ndarray, p: LstmParams):
    x = _check_layer_input(x, p.i.W.shape[1], "lstm")
    batch, steps, _ = x.shape
    width = p.i.b.shape[0]
    zi, zf, zc, zo = (_input_transform(x, g) for g in (p.i, p.f, p.c, p.o))
    gi, gf, gc, go = (np.empty((batch, steps, width), dtype=FLOAT) for _ in range(4))
    cell = np.empty((batch, steps, width), dtype=FLOAT)
    out = np.empty((batch, steps, width), dtype=FLOAT)
    h = np.zeros((batch, width), dtype=FLOAT)
    c = np.zeros((batch, width), dtype=FLOAT)
    for t in range(steps):
        ig = sigmoid(zi[:, t] + h @ p.i.U.T)
        fg = sigmoid(zf[:, t] + h @ p.f.U.T)
        cand = np.tanh(zc[:, t] + h @ p.c.U.T)
        og = sigmoid(zo[:, t] + h @ p.o.U.T)
        c = fg * c + ig * cand
        h = og * np.tanh(c)
        gi[:, t], gf[:, t], gc[:, t], go[:, t] = ig, fg, cand, og
        cell[:, t] = c
        out[:, t] = h
    cache = {"x": x, "i": gi, "f": gf, "cand": gc, "o": go, "c": cell, "h": out, "p": p}
    return out, cache


def lstm_layer_backward(d_out: np.ndarray, cache: dict):
    p: LstmParams = cache["p"]
    x, gi, gf, gc, go = cache["x"], cache["i"], cache["f"], cache["cand"], cache["o"]
    cell, out = cache["c"], cache["h"]
    batch, steps, width = out.shape
    tanh_c = np.tanh(cell)
    c_prev = _shifted(cell)
    dzi, dzf, dzc, dzo = (np.empty_like(out) for _ in range(4))
    dh = np.zeros((batch, width), dtype=FLOAT)
    dc = np.zeros((batch, width), dtype=FLOAT)
    for t in range(steps - 1, -1, -1):
        dh = dh + d_out[:, t]
        tc = tanh_c[:, t]
        do = dh * tc
        dc = dc + dh * go[:, t] * (1.0 - tc * tc)
        di = dc * gc[:, t]
        df = dc * c_prev[:, t]
        dcand = dc * gi[:, t]
        dzi[:, t] = di * gi[:, t] * (1.0 - gi[:, t])
        dzf[:, t] = df * gf[:, t] * (1.0 - gf[:, t])
        dzc[:, t] = dcand * (1.0 - gc[:, t] * gc[:, t])
        dzo[:, t] = do * go[:, t] * (1.0 - go[:, t])
        dc = dc * gf[:, t]
        dh = dzi[:, t] @ p.i.U + dzf[:, t] @ p.f.U + dzc[:, t] @ p.c.U + dzo[:, t] @ p.o.U
    h_prev = _shifted(out)
    grads = {}
    for gate, dz in zip("ifco", (dzi, dzf, dzc, dzo)):
        grads[f"{gate}.W"] = np.einsum("bth,btd->hd", dz, x)
        grads[f"{gate}.U"] = np.einsum("bth,btk->hk", dz, h_prev)
        grads[f"{gate}.b"] = dz.sum(axis=(0, 1))
    dx = (
        np.einsum("bth,hd->btd", dzi, p.i.W)
        + np.einsum("bth,hd->btd", dzf, p.f.W)
        + np.einsum("bth,hd->btd", dzc, p.c.W)
        + np.einsum("bth,hd->btd", dzo, p.o.W)
    )
    return dx, grads


def gru_layer_forward(x: np.ndarray, p: GruParams):
    x = _check_layer_input(x, p.z.W.shape[1], "gru")
    batch, steps, _ = x.shape
    width = p.z.b.shape[0]
    zz, zr, zh = (_input_transform(x, g) for g in (p.z, p.r, p.h))
    gz, gr, gcand, rh = (np.empty((batch, steps, width), dtype=FLOAT) for _ in range(4))
    out = np.empty((batch, steps, width), dtype=FLOAT)
    h = np.zeros((batch, width), dtype=FLOAT)
    for t in range(steps):
        upd = sigmoid(zz[:, t] + h @ p.z.U.T)
        res = sigmoid(zr[:, t] + h @ p.r.U.T)
        gated = res * h
        cand = np.tanh(zh[:, t] + gated @ p.h.U.T)
        h = (1.0 - upd) * h + upd * cand
        gz[:, t], gr[:, t], gcand[:, t], rh[:, t] = upd, res, cand, gated
        out[:, t] = h
    cache = {"x": x, "z": gz, "r": gr, "cand": gcand, "rh": rh, "h": out, "p": p}
    return out, cache


def gru_layer_backward(d_out: np.ndarray, cache: dict):
    p: GruParams = cache["p"]
    x, gz, gr, gcand, rh, out = (
        cache["x"],
        cache["z"],
        cache["r"],
        cache["cand"],
        cache["rh"],
        cache["h"],
    )
    batch, steps, width = out.shape
    h_prev = _shifted(out)
    dzz, dzr, dzh = (np.empty_like(out) for _ in range(3))
    dh = np.zeros((batch, width), dtype=FLOAT)
    for t in range(steps - 1, -1, -1):
        dh = dh + d_out[:, t]
        hp = h_prev[:, t]
        dupd = dh * (gcand[:, t] - hp)
        dcand = dh * gz[:, t]
        dh_next = dh * (1.0 - gz[:, t])
        dzh[:, t] = dcand * (1.0 - gcand[:, t] * gcand[:, t])
        drh = dzh[:, t] @ p.h.U
        dres = drh * hp
        dh_next = dh_next + drh * gr[:, t]
        dzz[:, t] = dupd * gz[:, t] * (1.0 - gz[:, t])
        dzr[:, t] = dres * gr[:, t] * (1.0 - gr[:, t])
        dh = dh_next + dzz[:, t] @ p.z.U + dzr[:, t] @ p.r.U
    grads = {}
    for gate, dz, against in (("z", dzz, h_prev), ("r", dzr, h_prev), ("h", dzh, rh)):
        grads[f"{gate}.W"] = np.einsum("bth,btd->hd", dz, x)
        grads[f"{gate}.U"] = np.einsum("bth,btk->hk", dz, against)
        grads[f"{gate}.b"] = dz.sum(axis=(0, 1))
    dx = (
        np.einsum("bth,hd->btd", dzz, p.z.W)
        + np.einsum("bth,hd->btd", dzr, p.r.W)
        + np.einsum("bth,hd->btd", dzh, p.h.W)
    )
    return dx, grads


def _sig_gate_forward(x: np.ndarray, g: SigGateParams):
    """Signature-driven gate values for every timestep: sigmoid of an affine
    map of the time-normalized prefix-signature stream."""
    projected = np.einsum("btd,dp->btp", x, g.projection.kernel)
    raw = sig_stream_batch(projected, g.spec)
    norm = normalize_stream_values(raw)
    gate = sigmoid(np.einsum("btk,hk->bth", norm, g.W_gate) + g.b_gate)
    return gate, {"projected": projected, "raw": raw, "norm": norm}


def _sig_gate_backward(d_pre: np.ndarray, x: np.ndarray, g: SigGateParams, sig_cache: dict):
    """Backprop the gate pre-activation gradient to (dx, W_sig/W_gate/b_gate grads)."""
    norm, raw, projected = sig_cache["norm"], sig_cache["raw"], sig_cache["projected"]
    grads = {
        "sig.b_gate": d_pre.sum(axis=(0, 1)),
        "sig.W_gate": np.einsum("bth,btk->hk", d_pre, norm),
    }
    d_norm = np.einsum("bth,hk->btk", d_pre, g.W_gate)
    d_raw = normalize_stream_values(d_norm)  # the 1/t factor is constant per step
    d_projected = sig_stream_backward(projected, raw, d_raw, g.spec)
    grads["sig.W_sig"] = np.einsum("btd,btp->dp", x, d_projected)
    dx = np.einsum("btp,dp->btd", d_projected, g.projection.kernel)
    return dx, grads


def sig_lstm_layer_forward(x: np.ndarray, p: SigLstmParams, g: SigGateParams):
    x = _check_layer_input(x, p.i.W.shape[1], "sig_lstm")
    batch, steps, _ = x.shape
    width = p.i.b.shape[0]
    gf, sig_cache = _sig_gate_forward(x, g)
    zi, zc, zo = (_input_transform(x, gate) for gate in (p.i, p.c, p.o))
    gi, gc, go = (np.empty((batch, steps, width), dtype=FLOAT) for _ in range(3))
    cell = np.empty((batch, steps, width), dtype=FLOAT)
    out = np.empty((batch, steps, width), dtype=FLOAT)
    h = np.zeros((batch, width), dtype=FLOAT)
    c = np.zeros((batch, width), dtype=FLOAT)
    for t in range(steps):
        ig = sigmoid(zi[:, t] + h @ p.i.U.T)
        cand = np.tanh(zc[:, t] + h @ p.c.U.T)
        og = sigmoid(zo[:, t] + h @ p.o.U.T)
        c = gf[:, t] * c + ig * cand
        h = og * np.tanh(c)
        gi[:, t], gc[:, t], go[:, t] = ig, cand, og
        cell[:, t] = c
        out[:, t] = h
    cache = {
        "x": x,
        "i": gi,
        "f": gf,
        "cand": gc,
        "o": go,
        "c": cell,
        "h": out,
        "p": p,
        "g": g,
        "sig": sig_cache,
    }
    return out, cache


def sig_lstm_layer_backward(d_out: np.ndarray, cache: dict):
    p: SigLstmParams = cache["p"]
    g: SigGateParams = cache["g"]
    x, gi, gf, gc, go = cache["x"], cache["i"], cache["f"], cache["cand"], cache["o"]
    cell, out = cache["c"], cache["h"]
    batch, steps, width = out.shape
    tanh_c = np.tanh(cell)
    c_prev = _shifted(cell)
    dzi, dzf, dzc, dzo = (np.empty_like(out) for _ in range(4))
    dh = np.zeros((batch, width), dtype=FLOAT)
    dc = np.zeros((batch, width), dtype=FLOAT)
    for t in range(steps - 1, -1, -1):
        dh = dh + d_out[:, t]
        tc = tanh_c[:, t]
        do = dh * tc
        dc = dc + dh * go[:, t] * (1.0 - tc * tc)
        di = dc * gc[:, t]
        df = dc * c_prev[:, t]
        dcand = dc * gi[:, t]
        dzi[:, t] = di * gi[:, t] * (1.0 - gi[:, t])
        dzf[:, t] = df * gf[:, t] * (1.0 - gf[:, t])  # to the signature gate
        dzc[:, t] = dcand * (1.0 - gc[:, t] * gc[:, t])
        dzo[:, t] = do * go[:, t] * (1.0 - go[:, t])
        dc = dc * gf[:, t]
        # the signature gate has no recurrent kernel, so only i, c, o feed dh
        dh = dzi[:, t] @ p.i.U + dzc[:, t] @ p.c.U + dzo[:, t] @ p.o.U
    h_prev = _shifted(out)
    grads = {}
    for gate, dz in zip(("i", "c", "o"), (dzi, dzc, dzo)):
        grads[f"{gate}.W"] = np.einsum("bth,btd->hd", dz, x)
        grads[f"{gate}.U"] = np.einsum("bth,btk->hk", dz, h_prev)
        grads[f"{gate}.b"] = dz.sum(axis=(0, 1))
    dx = (
        np.einsum("bth,hd->btd", dzi, p.i.W)
        + np.einsum("bth,hd->btd", dzc, p.c.W)
        + np.einsum("bth,hd->btd", dzo, p.o.W)
    )
    dx_sig, sig_grads = _sig_gate_backward(dzf, x, g, cache["sig"])
    grads.update(sig_grads)
    return dx + dx_sig, grads


def sig_gru_layer_forward(x: np.ndarray, p: SigGruParams, g: SigGateParams):
    x = _check_layer_input(x, p.z.W.shape[1], "sig_gru")
    batch, steps, _ = x.shape
    width = p.z.b.shape[0]
    gr, sig_cache = _sig_gate_forward(x, g)
    zz, zh = (_input_transform(x, gate) for gate in (p.z, p.h))
    gz, gcand, rh = (np.empty((batch, steps, width), dtype=FLOAT) for _ in range(3))
    out = np.empty((batch, steps, width), dtype=FLOAT)
    h = np.zeros((batch, width), dtype=FLOAT)
    for t in range(steps):
        upd = sigmoid(zz[:, t] + h @ p.z.U.T)
        gated = gr[:, t] * h
        cand = np.tanh(zh[:, t] + gated @ p.h.U.T)
        h = (1.0 - upd) * h + upd * cand
        gz[:, t], gcand[:, t], rh[:, t] = upd, cand, gated
        out[:, t] = h
    cache = {
        "x": x,
        "z": gz,
        "r": gr,
        "cand": gcand,
        "rh": rh,
        "h": out,
        "p": p,
        "g": g,
        "sig": sig_cache,
    }
    return out, cache


def sig_gru_layer_backward(d_out: np.ndarray, cache: dict):
    p: SigGruParams = cache["p"]
    g: SigGateParams = cache["g"]
    x, gz, gr, gcand, rh, out = (
        cache["x"],
        cache["z"],
        cache["r"],
        cache["cand"],
        cache["rh"],
        cache["h"],
    )
    batch, steps, width = out.shape
    h_prev = _shifted(out)
    dzz, dzr, dzh = (np.empty_like(out) for _ in range(3))
    dh = np.zeros((batch, width), dtype=FLOAT)
    for t in range(steps - 1, -1, -1):
        dh = dh + d_out[:, t]
        hp = h_prev[:, t]
        dupd = dh * (gcand[:, t] - hp)
        dcand = dh * gz[:, t]
        dh_next = dh * (1.0 - gz[:, t])
        dzh[:, t] = dcand * (1.0 - gcand[:, t] * gcand[:, t])
        drh = dzh[:, t] @ p.h.U
        dres = drh * hp
        dh_next = dh_next + drh * gr[:, t]
        dzz[:, t] = dupd * gz[:, t] * (1.0 - gz[:, t])
        dzr[:, t] = dres * gr[:, t] * (1.0 - gr[:, t])  # to the signature gate
        dh = dh_next + dzz[:, t] @ p.z.U
    grads = {}
    for gate, dz, against in (("z", dzz, h_prev), ("h", dzh, rh)):
        grads[f"{gate}.W"] = np.einsum("bth,btd->hd", dz, x)
        grads[f"{gate}.U"] = np.einsum("bth,btk->hk", dz, against)
        grads[f"{gate}.b"] = dz.sum(axis=(0, 1))
    dx = np.einsum("bth,hd->btd", dzz, p.z.W) + np.einsum("bth,hd->btd", dzh, p.h.W)
    dx_sig, sig_grads = _sig_gate_backward(dzr, x, g, cache["sig"])
    grads.update(sig_grads)
    return dx + dx_sig, grads


# ---------------------------------------------------------------------------
# Single-step cells (the vector-level reference surface).
# ---------------------------------------------------------------------------


def lstm_step(x_t: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray, p: LstmParams):
    """One LSTM update for a single sample; returns (h, c)."""
    x_t = np.asarray(x_t, dtype=FLOAT)
    h_prev = np.asarray(h_prev, dtype=FLOAT)
    c_prev = np.asarray(c_prev, dtype=FLOAT)
    if x_t.shape != (p.i.W.shape[1],) or h_prev.shape != (p.i.U.shape[1],):
        raise ShapeError(
            f"lstm_step: input {x_t.shape} / state {h_prev.shape} do not match "
            f"weights {p.i.W.shape}"
        )
    ig = sigmoid(p.i.W @ x_t + p.i.U @ h_prev + p.i.b)
    fg = sigmoid(p.f.W @ x_t + p.f.U @ h_prev + p.f.b)
    cand = np.tanh(p.c.W @ x_t + p.c.U @ h_prev + p.c.b)
    og = sigmoid(p.o.W @ x_t + p.o.U @ h_prev + p.o.b)
    c = fg * c_prev + ig * cand
    return og * np.tanh(c), c


def gru_step(x_t: np.ndarray, h_prev: np.ndarray, p: GruParams):
    """One GRU update for a single sample; returns h."""
    x_t = np.asarray(x_t, dtype=FLOAT)
    h_prev = np.asarray(h_prev, dtype=FLOAT)
    if x_t.shape != (p.z.W.shape[1],) or h_prev.shape != (p.z.U.shape[1],):
        raise ShapeError(
            f"gru_step: input {x_t.shape} / state {h_prev.shape} do not match "
            f"weights {p.z.W.shape}"
        )
    upd = sigmoid(p.z.W @ x_t + p.z.U @ h_prev + p.z.b)
    res = sigmoid(p.r.W @ x_t + p.r.U @ h_prev + p.r.b)
    cand = np.tanh(p.h.W @ x_t + p.h.U @ (res * h_prev) + p.h.b)
    return (1.0 - upd) * h_prev + upd * cand


def siglstm_forward(x: np.ndarray, p: SigLstmParams, g: SigGateParams) -> np.ndarray:
    """Full hidden sequence of one signature-forget-gate LSTM layer."""
    out, _ = sig_lstm_layer_forward(x, p, g)
    return out


def siggru_forward(x: np.ndarray, p: SigGruParams, g: SigGateParams) -> np.ndarray:
    """Full hidden sequence of one signature-reset-gate GRU layer."""
    out, _ = sig_gru_layer_forward(x, p, g)
    return out


# ---------------------------------------------------------------------------
# Stack + head.
# ---------------------------------------------------------------------------

_FORWARD = {
    "lstm": lstm_layer_forward,
    "gru": gru_layer_forward,
    "sig_lstm": sig_lstm_layer_forward,
    "sig_gru": sig_gru_layer_forward,
}
_BACKWARD = {
    "lstm": lstm_layer_backward,
    "gru": gru_layer_backward,
    "sig_lstm": sig_lstm_layer_backward,
    "sig_gru": sig_gru_layer_backward,
}


def stack_forward_cached(x: np.ndarray, config: ModelConfig, params: dict):
    """Run the full stack and head; returns (predictions (B,), layer caches, head feat)."""
    x = as_tensor3(x, "model input")
    if x.shape[2] != config.input_dim:
        raise ShapeError(
            f"model input features {x.shape} do not match config input_dim {config.input_dim}"
        )
    if config.flatten_output and x.shape[1] != config.seq_len:
        raise ShapeError(
            f"flattened head was sized for seq_len {config.seq_len}, got T={x.shape[1]}"
        )
    seq = x
    caches = []
    for idx, layer in enumerate(config.layers):
        view = layer_param_view(params, idx, layer)
        if layer.is_sig:
            seq, cache = _FORWARD[layer.kind](seq, *view)
        else:
            seq, cache = _FORWARD[layer.kind](seq, view)
        caches.append(cache)
    batch = seq.shape[0]
    feat = seq.reshape(batch, -1) if config.flatten_output else seq[:, -1, :]
    preds = feat @ params["head.W"][0] + params["head.b"][0]
    return preds, caches, feat


def stack_forward(x: np.ndarray, config: ModelConfig, params: dict) -> np.ndarray:
    """Predictions (B,) of the configured stack on a (B, T, F) block."""
    preds, _, _ = stack_forward_cached(x, config, params)
    return preds


def stack_backward(d_preds: np.ndarray, config: ModelConfig, params: dict, caches, feat):
    """Gradients of every parameter given d(loss)/d(predictions)."""
    grads: dict[str, np.ndarray] = {}
    grads["head.b"] = np.array([d_preds.sum()], dtype=FLOAT)
    grads["head.W"] = (d_preds @ feat)[None, :]
    d_feat = d_preds[:, None] * params["head.W"][0][None, :]
    last = caches[-1]["h"]
    if config.flatten_output:
        d_seq = d_feat.reshape(last.shape)
    else:
        d_seq = np.zeros_like(last)
        d_seq[:, -1, :] = d_feat
    for idx in range(len(config.layers) - 1, -1, -1):
        layer = config.layers[idx]
        d_seq, layer_grads = _BACKWARD[layer.kind](d_seq, caches[idx])
        for local, grad in layer_grads.items():
            grads[f"layer{idx}.{local}"] = grad
    ordered = {name: grads[name] for name in param_shapes(config)}
    return ordered, d_seq


@dataclass
class Model:
    """A configured stack plus its parameter arrays, keyed by canonical names."""

    config: ModelConfig
    params: dict = field(repr=False)

    @classmethod
    def build(cls, config: ModelConfig, rng: RngStream) -> "Model":
        return cls(config=config, params=init_params(config, rng))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return stack_forward(x, self.config, self.params)

    def copy_params(self) -> dict:
        return {name: arr.copy() for name, arr in self.params.items()}

    def set_params(self, params: dict) -> None:
        for name in self.params:
            self.params[name] = params[name].copy()
