"""Offline calibration: power-of-two scales, adaptive PoT rounding, PTF for
LayerNorm inputs, PoT-aware smoothing with migration-factor fusion, and log2
quantization of attention maps.

Everything here runs once against a floating-point activation trace; the
results (qparams) drive both the fake-quant reference and the integer engine.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng, clip_codes, int_range, round_half_up, round_half_up_array
from .refmodel import FloatModel, forward, weight_layer_names

SCALE_FLOOR_EXP = -20  # pinned scale for all-zero tensors
PTF_OFFSETS = (0, 1, 2, 3)  # bounded shifter width in the LN module
GELU_LUT_BITS = 8


@dataclass
class QuantConfig:
    act_bits: int = 8
    attn_bits: int = 4
    weight_bits: int = 8  # default uniform width; mixed configs override per layer
    rounding: str = "adaptive"  # adaptive | nearest
    smoothing: bool = True
    ptf: bool = True
    beta_s: float = 0.5
    calib_samples: int = 100

    def __post_init__(self):
        if self.rounding not in ("adaptive", "nearest"):
            raise ValueError(f"unknown rounding mode {self.rounding!r}")
        if not 0.0 <= self.beta_s <= 1.0:
            raise ValueError("beta_s must be in [0, 1]")


@dataclass
class QuantSpec:
    """Quantization parameters for one layer point.

    exponent is the per-tensor PoT exponent (for PTF: the global one);
    exponents are per-channel exponents along the last axis. For smoothed
    LN outputs, exponents are the fused migration+scale values and
    base_exponent is the single scale the codes carry downstream.
    """

    kind: str  # uniform | log2 | ptf
    bits: int
    signed: bool
    exponent: int | None = None
    exponents: np.ndarray | None = None
    migration: np.ndarray | None = None
    beta_s: float | None = None
    base_exponent: int | None = None

    def channel_exponents(self) -> np.ndarray:
        if self.exponents is not None:
            return np.asarray(self.exponents, dtype=np.int64)
        return np.asarray(self.exponent, dtype=np.int64)

    def matmul_exponent(self) -> int:
        """Scale exponent of the codes as seen by a downstream matmul."""
        if self.base_exponent is not None:
            return int(self.base_exponent)
        if self.exponent is None:
            raise ValueError("per-channel point has no single downstream scale")
        return int(self.exponent)


def quantize(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Round-half-up quantization to integer codes (int64)."""
    if spec.kind == "log2":
        return log2_quantize(x, spec.bits)
    scaled = np.asarray(x, dtype=np.float64) * np.exp2(
        -spec.channel_exponents().astype(np.float64)
    )
    return clip_codes(round_half_up_array(scaled), spec.bits, spec.signed)


def dequantize(codes: np.ndarray, spec: QuantSpec) -> np.ndarray:
    if spec.kind == "log2":
        return np.exp2(-np.asarray(codes, dtype=np.float64))
    return np.asarray(codes, dtype=np.float64) * np.exp2(
        spec.channel_exponents().astype(np.float64)
    )


def minmax_scale(x: np.ndarray, b: int) -> float:
    """Symmetric min-max scale 2*max|x| / (2^b - 1)."""
    if b < 2:
        raise ValueError("need b >= 2")
    peak = float(np.abs(x).max()) if np.size(x) else 0.0
    if peak == 0.0:
        return 2.0**SCALE_FLOOR_EXP
    return 2.0 * peak / (2**b - 1)


def nearest_pot(s: float) -> int:
    if s <= 0:
        raise ValueError("scale must be positive")
    return round_half_up(math.log2(s))


def _candidates(s: float) -> list[int]:
    lf = math.floor(math.log2(s))
    lc = math.ceil(math.log2(s))
    return sorted({lf - 1, lf, lc, lc + 1})


def _perturbation(x: np.ndarray, alpha: int, b: int, signed: bool) -> float:
    lo, hi = int_range(b, signed)
    q = np.clip(round_half_up_array(x * 2.0**-alpha), lo, hi)
    return float(np.linalg.norm(x - q.astype(np.float64) * 2.0**alpha))


def adaptive_pot_round_act(x: np.ndarray, b: int, signed: bool = True) -> int:
    """Pick the PoT exponent minimizing the activation's own L2 perturbation.

    Search space is [floor-1, ceil+1] around log2 of the min-max scale.
    Ties: smaller |alpha - log2(S)|, then smaller alpha.
    """
    x = np.asarray(x, dtype=np.float64)
    s = minmax_scale(x, b)
    log_s = math.log2(s)
    best = None
    for a in _candidates(s):
        key = (_perturbation(x, a, b, signed), abs(a - log_s), a)
        if best is None or key < best[0]:
            best = (key, a)
    return best[1]


def adaptive_pot_round_act_channels(x: np.ndarray, b: int, signed: bool = True) -> np.ndarray:
    """Per-channel adaptive exponents along the last axis."""
    x2 = np.asarray(x, dtype=np.float64).reshape(-1, x.shape[-1])
    return np.array(
        [adaptive_pot_round_act(x2[:, j], b, signed) for j in range(x2.shape[1])],
        dtype=np.int64,
    )


def adaptive_pot_round_weight(x_cal: np.ndarray, w: np.ndarray, b: int) -> np.ndarray:
    """Per-output-feature exponents minimizing output perturbation ||XW - X W_q||2."""
    x = np.asarray(x_cal, dtype=np.float64).reshape(-1, w.shape[0])
    w = np.asarray(w, dtype=np.float64)
    ref = x @ w
    lo, hi = int_range(b, True)
    exps = np.zeros(w.shape[1], dtype=np.int64)
    for j in range(w.shape[1]):
        col = w[:, j]
        s = minmax_scale(col, b)
        log_s = math.log2(s)
        best = None
        for a in _candidates(s):
            deq = np.clip(round_half_up_array(col * 2.0**-a), lo, hi).astype(np.float64) * 2.0**a
            err = float(np.linalg.norm(ref[:, j] - x @ deq))
            key = (err, abs(a - log_s), a)
            if best is None or key < best[0]:
                best = (key, a)
        exps[j] = best[1]
    return exps


def nearest_pot_weight(w: np.ndarray, b: int) -> np.ndarray:
    """Per-output-feature nearest-PoT exponents (the rounding baseline)."""
    return np.array(
        [nearest_pot(minmax_scale(w[:, j], b)) for j in range(w.shape[1])],
        dtype=np.int64,
    )


def pot_smooth(
    x_cal: np.ndarray, w: np.ndarray, beta_s: float
) -> tuple[np.ndarray, np.ndarray]:
    """Channel-wise PoT migration: returns (M, W*2^M).

    M_i = round(log2(max|X_i|^beta / max|W_i|^(1-beta))); channels where
    either side is all-zero keep M_i = 0. X/2^M paired with W*2^M leaves
    the product XW unchanged in exact arithmetic.
    """
    x = np.asarray(x_cal, dtype=np.float64).reshape(-1, w.shape[0])
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"channel mismatch: X has {x.shape[1]}, W has {w.shape[0]}")
    xmax = np.abs(x).max(axis=0)
    wmax = np.abs(w).max(axis=1)
    m = np.zeros(w.shape[0], dtype=np.int64)
    for i in range(w.shape[0]):
        if xmax[i] == 0.0 or wmax[i] == 0.0:
            continue
        m[i] = round_half_up(math.log2(xmax[i] ** beta_s / wmax[i] ** (1.0 - beta_s)))
    w_hat = np.asarray(w, dtype=np.float64) * np.exp2(m.astype(np.float64))[:, None]
    return m, w_hat.astype(w.dtype if np.asarray(w).dtype.kind == "f" else np.float64)


def fuse_migration(migration: np.ndarray, alpha_xhat: int) -> np.ndarray:
    """Fused per-channel exponents M_i + alpha so X is quantized directly."""
    return np.asarray(migration, dtype=np.int64) + int(alpha_xhat)


def ptf_calibrate(x_cal: np.ndarray, b: int, rounding: str = "adaptive") -> QuantSpec:
    """Global PoT scale fit to the least-spread channel plus 2-bit channel offsets."""
    x = np.asarray(x_cal, dtype=np.float64).reshape(-1, x_cal.shape[-1])
    ranges = np.abs(x).max(axis=0)
    nonzero = ranges > 0
    if nonzero.any():
        base_ch = int(np.flatnonzero(nonzero)[np.argmin(ranges[nonzero])])
        col = x[:, base_ch]
        if rounding == "adaptive":
            alpha_g = adaptive_pot_round_act(col, b, signed=True)
        else:
            alpha_g = nearest_pot(minmax_scale(col, b))
    else:
        alpha_g = SCALE_FLOOR_EXP
    exps = np.empty(x.shape[1], dtype=np.int64)
    for j in range(x.shape[1]):
        best = None
        for off in PTF_OFFSETS:
            err = _perturbation(x[:, j], alpha_g + off, b, True)
            key = (err, off)
            if best is None or key < best[0]:
                best = (key, off)
        exps[j] = alpha_g + best[1]
    return QuantSpec(kind="ptf", bits=b, signed=True, exponent=int(alpha_g), exponents=exps)


def log2_quantize(m: np.ndarray, b: int) -> np.ndarray:
    """clip(round(-log2 m), 0, 2^b-1); m must lie in [0, 1], m=0 saturates."""
    m = np.asarray(m, dtype=np.float64)
    if m.size and (m.min() < 0.0 or m.max() > 1.0):
        raise ValueError("log2 quantization input must be in [0, 1]")
    hi = 2**b - 1
    with np.errstate(divide="ignore"):
        codes = round_half_up_array(np.where(m > 0, -np.log2(np.where(m > 0, m, 1.0)), hi))
    return np.clip(np.where(m > 0, codes, hi), 0, hi)


def gelu_reference(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def build_gelu_lut(in_exp: int, out_exp: int, bits: int = GELU_LUT_BITS) -> np.ndarray:
    """Signed-code lookup table for GELU; index = code + 2^(bits-1)."""
    lo, hi = int_range(bits, True)
    codes = np.arange(lo, hi + 1, dtype=np.float64)
    y = gelu_reference(codes * 2.0**in_exp)
    return clip_codes(round_half_up_array(y * 2.0**-out_exp), bits, True)


# --------------------------------------------------------------------------
# whole-model calibration


@dataclass
class QuantParams:
    qconfig: QuantConfig
    act: dict[str, QuantSpec]
    weight_exps: dict[str, dict[int, np.ndarray]]  # layer -> bits -> per-feature exps
    gelu_lut: dict[str, np.ndarray]  # "block{i}" -> 256-entry table

    def weight_spec(self, name: str, bits: int) -> QuantSpec:
        return QuantSpec(
            kind="uniform", bits=bits, signed=True, exponents=self.weight_exps[name][bits]
        )


def _act_spec(trace_x, cfg: QuantConfig, per_channel: bool) -> QuantSpec:
    b = cfg.act_bits
    if per_channel:
        if cfg.rounding == "adaptive":
            exps = adaptive_pot_round_act_channels(trace_x, b)
        else:
            x2 = trace_x.reshape(-1, trace_x.shape[-1])
            exps = np.array(
                [nearest_pot(minmax_scale(x2[:, j], b)) for j in range(x2.shape[1])],
                dtype=np.int64,
            )
        return QuantSpec(kind="uniform", bits=b, signed=True, exponents=exps)
    if cfg.rounding == "adaptive":
        a = adaptive_pot_round_act(trace_x, b)
    else:
        a = nearest_pot(minmax_scale(trace_x, b))
    return QuantSpec(kind="uniform", bits=b, signed=True, exponent=int(a))


def _smoothed_ln_out_spec(
    trace_x: np.ndarray, w_cat: np.ndarray, cfg: QuantConfig
) -> tuple[QuantSpec, np.ndarray]:
    """Spec for an LN output feeding a linear layer; returns (spec, migration)."""
    if cfg.smoothing:
        migration, _ = pot_smooth(trace_x.reshape(-1, w_cat.shape[0]), w_cat, cfg.beta_s)
    else:
        migration = np.zeros(w_cat.shape[0], dtype=np.int64)
    x_hat = trace_x.reshape(-1, w_cat.shape[0]) * np.exp2(-migration.astype(np.float64))
    if cfg.rounding == "adaptive":
        base = adaptive_pot_round_act(x_hat, cfg.act_bits)
    else:
        base = nearest_pot(minmax_scale(x_hat, cfg.act_bits))
    return (
        QuantSpec(
            kind="uniform",
            bits=cfg.act_bits,
            signed=True,
            exponents=fuse_migration(migration, base),
            migration=migration,
            beta_s=cfg.beta_s,
            base_exponent=int(base),
        ),
        migration,
    )


def _weight_exps_for(
    x_cal: np.ndarray, w: np.ndarray, cfg: QuantConfig
) -> dict[int, np.ndarray]:
    out = {}
    for b in (4, 8):
        if cfg.rounding == "adaptive":
            out[b] = adaptive_pot_round_weight(x_cal, w, b)
        else:
            out[b] = nearest_pot_weight(np.asarray(w, np.float64), b)
    return out


def smoothed_weight(model: FloatModel, qparams: "QuantParams", name: str) -> np.ndarray:
    """Weight with its input-side migration applied (W * 2^M), float64."""
    w = np.asarray(model.params[name], dtype=np.float64)
    point = _weight_input_point(name)
    spec = qparams.act.get(point)
    if spec is not None and spec.migration is not None:
        w = w * np.exp2(spec.migration.astype(np.float64))[:, None]
    return w


def _weight_input_point(name: str) -> str:
    if name == "embed.w":
        return "embed.in"
    if name == "head.w":
        return "final_ln.out"
    block, w = name.rsplit(".", 1)
    return {
        "wq": f"{block}.ln1.out",
        "wk": f"{block}.ln1.out",
        "wv": f"{block}.ln1.out",
        "wo": f"{block}.attn.out",
        "fc1": f"{block}.ln2.out",
        "fc2": f"{block}.gelu.out",
    }[w]


def calibrate(model: FloatModel, calib_x: np.ndarray, cfg: QuantConfig) -> QuantParams:
    """Compute every quantization parameter from a calibration batch.

    Statistics are max|x| over the whole stacked calibration set; specs are
    derived from the float trace (no error propagation during calibration).
    """
    c = model.config
    _, trace = forward(model, calib_x[: cfg.calib_samples])
    act: dict[str, QuantSpec] = {}
    weight_exps: dict[str, dict[int, np.ndarray]] = {}
    gelu_lut: dict[str, np.ndarray] = {}

    act["embed.in"] = _act_spec(trace["embed.in"], cfg, per_channel=False)
    act["embed.out"] = _act_spec(trace["embed.out"], cfg, per_channel=True)
    weight_exps["embed.w"] = _weight_exps_for(
        trace["embed.in"], np.asarray(model.params["embed.w"], np.float64), cfg
    )

    for i in range(c.layers):
        pre = f"block{i}"
        if cfg.ptf:
            act[f"{pre}.ln1.in"] = ptf_calibrate(trace[f"{pre}.ln1.in"], cfg.act_bits, cfg.rounding)
            act[f"{pre}.ln2.in"] = ptf_calibrate(trace[f"{pre}.ln2.in"], cfg.act_bits, cfg.rounding)
        else:
            act[f"{pre}.ln1.in"] = _ptf_from_per_tensor(trace[f"{pre}.ln1.in"], cfg)
            act[f"{pre}.ln2.in"] = _ptf_from_per_tensor(trace[f"{pre}.ln2.in"], cfg)

        w_qkv = np.concatenate(
            [np.asarray(model.params[f"{pre}.{w}"], np.float64) for w in ("wq", "wk", "wv")],
            axis=1,
        )
        spec1, m1 = _smoothed_ln_out_spec(trace[f"{pre}.ln1.out"], w_qkv, cfg)
        act[f"{pre}.ln1.out"] = spec1
        x_hat1 = trace[f"{pre}.ln1.out"].reshape(-1, c.dim) * np.exp2(-m1.astype(np.float64))
        for w in ("wq", "wk", "wv"):
            w_hat = np.asarray(model.params[f"{pre}.{w}"], np.float64) * np.exp2(
                m1.astype(np.float64)
            )[:, None]
            weight_exps[f"{pre}.{w}"] = _weight_exps_for(x_hat1, w_hat, cfg)

        act[f"{pre}.q"] = _act_spec(trace[f"{pre}.q"], cfg, per_channel=False)
        act[f"{pre}.k"] = _act_spec(trace[f"{pre}.k"], cfg, per_channel=False)
        act[f"{pre}.v"] = _act_spec(trace[f"{pre}.v"], cfg, per_channel=False)
        act[f"{pre}.attn.logits"] = _act_spec(trace[f"{pre}.attn.logits"], cfg, per_channel=False)
        act[f"{pre}.attn.map"] = QuantSpec(kind="log2", bits=cfg.attn_bits, signed=False)
        act[f"{pre}.attn.out"] = _act_spec(trace[f"{pre}.attn.out"], cfg, per_channel=False)
        weight_exps[f"{pre}.wo"] = _weight_exps_for(
            trace[f"{pre}.attn.out"], np.asarray(model.params[f"{pre}.wo"], np.float64), cfg
        )
        act[f"{pre}.msa.out"] = _act_spec(trace[f"{pre}.msa.out"], cfg, per_channel=True)
        act[f"{pre}.res1"] = _act_spec(trace[f"{pre}.res1"], cfg, per_channel=True)

        w_fc1 = np.asarray(model.params[f"{pre}.fc1"], np.float64)
        spec2, m2 = _smoothed_ln_out_spec(trace[f"{pre}.ln2.out"], w_fc1, cfg)
        act[f"{pre}.ln2.out"] = spec2
        x_hat2 = trace[f"{pre}.ln2.out"].reshape(-1, c.dim) * np.exp2(-m2.astype(np.float64))
        w_fc1_hat = w_fc1 * np.exp2(m2.astype(np.float64))[:, None]
        weight_exps[f"{pre}.fc1"] = _weight_exps_for(x_hat2, w_fc1_hat, cfg)

        act[f"{pre}.fc1.out"] = _act_spec(trace[f"{pre}.fc1.out"], cfg, per_channel=False)
        act[f"{pre}.gelu.out"] = _act_spec(trace[f"{pre}.gelu.out"], cfg, per_channel=False)
        gelu_lut[pre] = build_gelu_lut(
            act[f"{pre}.fc1.out"].exponent, act[f"{pre}.gelu.out"].exponent, cfg.act_bits
        )
        weight_exps[f"{pre}.fc2"] = _weight_exps_for(
            trace[f"{pre}.gelu.out"], np.asarray(model.params[f"{pre}.fc2"], np.float64), cfg
        )
        act[f"{pre}.fc2.out"] = _act_spec(trace[f"{pre}.fc2.out"], cfg, per_channel=True)
        act[f"{pre}.res2"] = _act_spec(trace[f"{pre}.res2"], cfg, per_channel=True)

    if cfg.ptf:
        act["final_ln.in"] = ptf_calibrate(trace["final_ln.in"], cfg.act_bits, cfg.rounding)
    else:
        act["final_ln.in"] = _ptf_from_per_tensor(trace["final_ln.in"], cfg)
    w_head = np.asarray(model.params["head.w"], np.float64)
    cls_rows = trace["final_ln.out"][:, 0, :]
    spec_f, m_f = _smoothed_ln_out_spec(cls_rows, w_head, cfg)
    act["final_ln.out"] = spec_f
    x_hat_f = cls_rows.reshape(-1, c.dim) * np.exp2(-m_f.astype(np.float64))
    w_head_hat = w_head * np.exp2(m_f.astype(np.float64))[:, None]
    weight_exps["head.w"] = _weight_exps_for(x_hat_f, w_head_hat, cfg)

    return QuantParams(cfg, act, weight_exps, gelu_lut)


def _ptf_from_per_tensor(trace_x, cfg: QuantConfig) -> QuantSpec:
    """PTF-shaped spec with all offsets zero (used when PTF is disabled)."""
    flat = _act_spec(trace_x, cfg, per_channel=False)
    exps = np.full(trace_x.shape[-1], flat.exponent, dtype=np.int64)
    return QuantSpec(
        kind="ptf", bits=cfg.act_bits, signed=True, exponent=flat.exponent, exponents=exps
    )


# --------------------------------------------------------------------------
# serialization (qparams.json)


def _spec_to_json(spec: QuantSpec) -> dict:
    out = {"kind": spec.kind, "bits": spec.bits, "signed": spec.signed}
    if spec.exponent is not None:
        out["exponent"] = int(spec.exponent)
    if spec.exponents is not None:
        out["exponents"] = [int(v) for v in spec.exponents]
    if spec.migration is not None:
        out["migration"] = [int(v) for v in spec.migration]
    if spec.beta_s is not None:
        out["beta_s"] = spec.beta_s
    if spec.base_exponent is not None:
        out["base_exponent"] = int(spec.base_exponent)
    return out


def _spec_from_json(d: dict) -> QuantSpec:
    return QuantSpec(
        kind=d["kind"],
        bits=d["bits"],
        signed=d["signed"],
        exponent=d.get("exponent"),
        exponents=np.asarray(d["exponents"], np.int64) if "exponents" in d else None,
        migration=np.asarray(d["migration"], np.int64) if "migration" in d else None,
        beta_s=d.get("beta_s"),
        base_exponent=d.get("base_exponent"),
    )


def save_qparams(qparams: QuantParams, path) -> None:
    from dataclasses import asdict

    doc = {
        "config": asdict(qparams.qconfig),
        "activations": {k: _spec_to_json(v) for k, v in qparams.act.items()},
        "weights": {
            name: {str(b): [int(v) for v in exps] for b, exps in by_bits.items()}
            for name, by_bits in qparams.weight_exps.items()
        },
        "gelu_lut": {k: [int(v) for v in lut] for k, lut in qparams.gelu_lut.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_qparams(path) -> QuantParams:
    doc = json.loads(Path(path).read_text())
    return QuantParams(
        QuantConfig(**doc["config"]),
        {k: _spec_from_json(v) for k, v in doc["activations"].items()},
        {
            name: {int(b): np.asarray(exps, np.int64) for b, exps in by_bits.items()}
            for name, by_bits in doc["weights"].items()
        },
        {k: np.asarray(lut, np.int64) for k, lut in doc["gelu_lut"].items()},
    )
