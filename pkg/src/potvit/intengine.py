"""Integer-only inference engine.

All matmuls run on integer codes; every rescale between quantization points
is a bitwise shift because scales are powers of two. LayerNorm and softmax
use the fixed-point kernels defined here (Q16.16 reciprocal-sigma LayerNorm,
shift-only log2 softmax); GELU is a 256-entry code lookup. The fake-quant
reference engine calls the same three kernels, so both paths are bit-equal
by construction on those blocks and independently implemented everywhere
else (matmul, requantization, residuals, attention-map shifts).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import LN_EPS
from .numerics import (
    IntTensor,
    clip_codes,
    int_range,
    round_half_up,
    round_half_up_array,
    shift_round_array,
)
from .quantizer import QuantParams, QuantSpec, load_qparams, save_qparams, smoothed_weight
from .refmodel import FloatModel, ModelConfig, weight_layer_names

FX_FRAC = 16  # Q16.16 fixed point for LayerNorm gamma/beta and 1/sigma
SOFTMAX_FRAC = 20  # fractional bits carried by softmax exponent values
SOFTMAX_PRE = 6  # internal left-shift so ln2 range reduction stays accurate
SOFTMAX_MIN_INNER = -15  # smallest working exponent keeping constants in int32
IEXP_A, IEXP_B, IEXP_C = 0.3585, 1.353, 0.344  # 2nd-order exp(x) fit on (-ln2, 0]


class EngineError(RuntimeError):
    pass


def div_round_half_up(a, b):
    """floor(a/b + 1/2) for integers, b > 0; a may be negative or an array."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    return (2 * a + b) // (2 * b)


# --------------------------------------------------------------------------
# fixed-point LayerNorm


def ln_row_kernel(
    xhat: np.ndarray,
    alpha_g: int,
    gamma_fx: np.ndarray,
    beta_fx: np.ndarray,
    out_exps: np.ndarray,
    out_bits: int,
) -> np.ndarray:
    """Normalize integer rows that share the single scale 2^alpha_g.

    Mean/variance come from the exact integer sums S1, S2 (single pass);
    the only non-integer step is one reciprocal square root per row, frozen
    into a Q16.16 factor with round-half-up. gamma_fx/beta_fx are Q16.16.
    """
    xhat = np.asarray(xhat, dtype=np.int64)
    n = xhat.shape[-1]
    s1 = xhat.sum(axis=-1, keepdims=True)
    s2 = (xhat * xhat).sum(axis=-1, keepdims=True)
    var_n2 = n * s2 - s1 * s1  # n^2 * variance, exact
    var_real = var_n2.astype(np.float64) * 4.0**alpha_g / (n * n)
    r_fx = round_half_up_array(2.0**FX_FRAC * 2.0**alpha_g / np.sqrt(var_real + LN_EPS))
    centered = n * xhat - s1
    t = div_round_half_up(centered * r_fx, n)
    y_fx = shift_round_array(t * np.asarray(gamma_fx, np.int64), -FX_FRAC)
    y_fx = y_fx + np.asarray(beta_fx, np.int64)
    k = -(FX_FRAC + np.asarray(out_exps, dtype=np.int64))
    return clip_codes(shift_round_array(y_fx, k), out_bits, True)


def fixed_point(values: np.ndarray, frac: int = FX_FRAC) -> np.ndarray:
    return round_half_up_array(np.asarray(values, np.float64) * 2.0**frac)


# --------------------------------------------------------------------------
# shift-only softmax (integer exp + integer log2)


def softmax_params(scale_exp: int) -> tuple[int, int, int]:
    """(q_ln2, q_b, q_c) for inputs with scale 2^scale_exp."""
    s = 2.0**scale_exp
    q_ln2 = max(1, round_half_up(math.log(2.0) / s))
    q_b = round_half_up(IEXP_B / s)
    q_c = round_half_up(IEXP_C / (IEXP_A * s * s))
    return q_ln2, q_b, q_c


def i_exp(x_q: int, scale_exp: int) -> tuple[int, int]:
    """Integer exp for x_q <= 0: returns (mantissa, z) with
    exp(x_q * 2^scale_exp) ~ A * S^2 * mantissa * 2^-z."""
    if x_q > 0:
        raise EngineError("i_exp input must be <= 0 after max subtraction")
    q_ln2, q_b, q_c = softmax_params(scale_exp)
    z = (-x_q) // q_ln2
    p = x_q + z * q_ln2
    return (p + q_b) ** 2 + q_c, z


def i_exp_value(x_q: int, scale_exp: int) -> float:
    mant, z = i_exp(x_q, scale_exp)
    s = 2.0**scale_exp
    return IEXP_A * s * s * mant * 2.0**-z


def i_log2(v: int) -> int:
    """Integer round(log2 v): highest set bit, +1 when v is above sqrt(2)
    times that power of two. Pure integer; never hits a halfway case."""
    v = int(v)
    if v < 1:
        raise EngineError(f"i_log2 needs v >= 1, got {v}")
    i = v.bit_length() - 1
    return i + (1 if v * v >= 1 << (2 * i + 1) else 0)


def i_log2_array(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.int64)
    if v.size and v.min() < 1:
        raise EngineError("i_log2 needs v >= 1")
    # frexp is exact for integers below 2^53: v = m * 2^e with m in [0.5, 1)
    _, e = np.frexp(v.astype(np.float64))
    i = (e - 1).astype(np.int64)
    up = (v * v) >= (np.int64(1) << (2 * i + 1))
    return i + up


def int_softmax_lis(codes: np.ndarray, scale_exp: int, out_bits: int) -> np.ndarray:
    """Row softmax straight to log2 codes: out = round(log2(sum / elem)).

    Inputs are max-subtracted then left-shifted SOFTMAX_PRE bits so the
    integer ln2 used for range reduction is accurate regardless of the input
    scale. Division uses one round-half-up integer divide per element; the
    shared polynomial prefactor cancels in the ratio. Zero-valued elements
    saturate to the largest code.
    """
    x = np.asarray(codes, dtype=np.int64)
    # clamp the working exponent so q_c = C / (A * s^2) fits a 32-bit register;
    # only degenerate calibrations (all-zero logits) ever hit the clamp
    inner_exp = max(scale_exp - SOFTMAX_PRE, SOFTMAX_MIN_INNER)
    x = shift_round_array(x - x.max(axis=-1, keepdims=True), scale_exp - inner_exp)
    q_ln2, q_b, q_c = softmax_params(inner_exp)
    z = (-x) // q_ln2
    p = x + z * q_ln2
    mant = (p + q_b) ** 2 + q_c
    # keep the mantissa near 26 bits so the shifted sum stays inside int64
    norm = max(0, 2 * (-inner_exp) - 26)
    mant = mant >> norm
    zc = np.minimum(z, 62 - SOFTMAX_FRAC)
    bias = np.where(zc > 0, np.int64(1) << np.maximum(zc - 1, 0), np.int64(0))
    v = ((mant << SOFTMAX_FRAC) + bias) >> zc
    v = np.where(z > 62 - SOFTMAX_FRAC, np.int64(0), v)
    total = v.sum(axis=-1, keepdims=True)
    hi = 2**out_bits - 1
    safe_v = np.where(v > 0, v, np.int64(1))
    quot = np.clip(div_round_half_up(total, safe_v), 1, 2**31 - 1)
    out = np.clip(i_log2_array(quot), 0, hi)
    return np.where(v > 0, out, np.int64(hi))


# --------------------------------------------------------------------------
# product-scaling MACs: 8-bit weights as two 4-bit halves


def psmac_split(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(high, low) with w == high*16 + low; high is signed 4-bit (arithmetic
    shift), low is unsigned 4-bit."""
    w = np.asarray(w, dtype=np.int64)
    return w >> 4, w & 0xF


def psmac_matmul(x: np.ndarray, w: np.ndarray, w_bits: int) -> np.ndarray:
    """Integer matmul as executed by the 4-bit MAC array.

    8-bit weights run as two 4-bit passes recombined with a shift-add;
    4-bit weights run in a single (doubled-throughput) pass.
    """
    x = np.asarray(x, dtype=np.int64)
    w = np.asarray(w, dtype=np.int64)
    if w_bits == 8:
        wh, wl = psmac_split(w)
        return np.matmul(x, wh) * 16 + np.matmul(x, wl)
    if w_bits == 4:
        return np.matmul(x, w)
    raise EngineError(f"unsupported weight width {w_bits}")


def requantize(acc: np.ndarray, k) -> np.ndarray:
    """Rescale an integer accumulator by 2^k (k = in_exp + w_exp - out_exp)."""
    return shift_round_array(acc, k)


def shift_attention_v(v_codes: np.ndarray, m_codes: np.ndarray) -> np.ndarray:
    """Attention-map application as shifts: out[i,:] = sum_j (V[j,:] >> M[i,j])
    with round-half-up per element before accumulation."""
    v = np.asarray(v_codes, dtype=np.int64)  # (..., N, dh)
    m = np.asarray(m_codes, dtype=np.int64)  # (..., N, N)
    shifted = shift_round_array(v[..., None, :, :], -m[..., :, :, None])
    return shifted.sum(axis=-2)


# --------------------------------------------------------------------------
# quantized model


@dataclass
class QuantizedModel:
    config: ModelConfig
    qparams: QuantParams
    bits: dict[str, int]  # matmul weight name -> 4 | 8
    weights: dict[str, IntTensor]
    ln_gamma_fx: dict[str, np.ndarray]  # "block0.ln1" ... "final_ln" -> Q16.16
    ln_beta_fx: dict[str, np.ndarray]
    cls_codes: np.ndarray  # at embed.out channel scales
    pos_codes: np.ndarray

    def model_size_mb(self) -> float:
        return sum(
            self.bits[n] * self.weights[n].data.size for n in self.bits
        ) / 8.0 / 2.0**20


def build_quantized_model(
    model: FloatModel, qparams: QuantParams, bits: dict[str, int] | None = None
) -> QuantizedModel:
    c = model.config
    names = weight_layer_names(c)
    if bits is None:
        bits = {n: qparams.qconfig.weight_bits for n in names}
    missing = set(names) - set(bits)
    if missing:
        raise EngineError(f"bit widths missing for layers: {sorted(missing)}")
    weights = {}
    for name in names:
        b = bits[name]
        exps = qparams.weight_exps[name][b].astype(np.float64)
        w_hat = smoothed_weight(model, qparams, name)
        codes = clip_codes(round_half_up_array(w_hat * np.exp2(-exps)[None, :]), b, True)
        weights[name] = IntTensor(codes, b)
    gamma_fx, beta_fx = {}, {}
    for i in range(c.layers):
        for ln in ("ln1", "ln2"):
            gamma_fx[f"block{i}.{ln}"] = fixed_point(model.params[f"block{i}.{ln}.gamma"])
            beta_fx[f"block{i}.{ln}"] = fixed_point(model.params[f"block{i}.{ln}.beta"])
    gamma_fx["final_ln"] = fixed_point(model.params["final_ln.gamma"])
    beta_fx["final_ln"] = fixed_point(model.params["final_ln.beta"])
    out_exps = qparams.act["embed.out"].channel_exponents().astype(np.float64)
    cls_codes = clip_codes(
        round_half_up_array(model.params["embed.cls"].astype(np.float64) * np.exp2(-out_exps)),
        qparams.qconfig.act_bits,
        True,
    )
    pos_codes = clip_codes(
        round_half_up_array(model.params["embed.pos"].astype(np.float64) * np.exp2(-out_exps)),
        qparams.qconfig.act_bits,
        True,
    )
    return QuantizedModel(c, qparams, dict(bits), weights, gamma_fx, beta_fx, cls_codes, pos_codes)


def _ptf_enter(res_codes, res_exps, spec: QuantSpec):
    """Requantize per-channel residual codes into PTF codes and pre-shifted
    rows sharing the global scale; returns (ptf_codes, xhat)."""
    exps = spec.channel_exponents()
    offs = exps - spec.exponent
    k = np.asarray(res_exps, np.int64) - exps
    codes = clip_codes(shift_round_array(res_codes, k), spec.bits, True)
    xhat = np.asarray(codes, np.int64) << offs
    return codes, xhat


def int_forward(qm: QuantizedModel, x: np.ndarray) -> tuple[np.ndarray, dict]:
    """Run the integer pipeline; returns (float logits, code trace).

    The trace holds the integer codes at every quantization point, keyed
    like the float trace.
    """
    c = qm.config
    qp = qm.qparams
    act = qp.act
    ab = qp.qconfig.act_bits
    x = np.asarray(x, np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    b = x.shape[0]
    trace: dict[str, np.ndarray] = {}

    def wexp(name):
        return qp.weight_exps[name][qm.bits[name]].astype(np.int64)

    in_spec = act["embed.in"]
    xq = np.clip(
        round_half_up_array(x * 2.0**-in_spec.exponent), *int_range(ab, True)
    )
    trace["embed.in"] = xq
    out_exps = act["embed.out"].channel_exponents()
    acc = psmac_matmul(xq, qm.weights["embed.w"].data, qm.bits["embed.w"])
    tok = shift_round_array(acc, in_spec.exponent + wexp("embed.w") - out_exps)
    cls = np.broadcast_to(qm.cls_codes, (b, 1, c.dim))
    h = clip_codes(np.concatenate([cls, tok], axis=1) + qm.pos_codes, ab, True)
    h_exps = out_exps
    trace["embed.out"] = h

    for i in range(c.layers):
        pre = f"block{i}"
        ptf1 = act[f"{pre}.ln1.in"]
        ptf_codes, xhat = _ptf_enter(h, h_exps, ptf1)
        trace[f"{pre}.ln1.in"] = ptf_codes
        ln_out = act[f"{pre}.ln1.out"]
        a = ln_row_kernel(
            xhat,
            ptf1.exponent,
            qm.ln_gamma_fx[f"{pre}.ln1"],
            qm.ln_beta_fx[f"{pre}.ln1"],
            ln_out.channel_exponents(),
            ab,
        )
        trace[f"{pre}.ln1.out"] = a
        a_exp = ln_out.matmul_exponent()  # codes share one scale after smoothing

        qkv = {}
        for w in ("wq", "wk", "wv"):
            point = {"wq": "q", "wk": "k", "wv": "v"}[w]
            spec = act[f"{pre}.{point}"]
            acc = psmac_matmul(a, qm.weights[f"{pre}.{w}"].data, qm.bits[f"{pre}.{w}"])
            codes = clip_codes(
                shift_round_array(acc, a_exp + wexp(f"{pre}.{w}") - spec.exponent), ab, True
            )
            trace[f"{pre}.{point}"] = codes
            qkv[point] = codes

        dh = c.head_dim
        half_log_dh = int(math.log2(dh)) // 2  # 1/sqrt(dh) = 2^-half_log_dh
        def heads(t):
            return t.reshape(b, c.tokens, c.heads, dh).transpose(0, 2, 1, 3)

        hq, hk, hv = heads(qkv["q"]), heads(qkv["k"]), heads(qkv["v"])
        logit_spec = act[f"{pre}.attn.logits"]
        acc = np.matmul(hq, hk.swapaxes(-1, -2))
        logits_q = clip_codes(
            shift_round_array(
                acc,
                act[f"{pre}.q"].exponent
                + act[f"{pre}.k"].exponent
                - half_log_dh
                - logit_spec.exponent,
            ),
            ab,
            True,
        )
        trace[f"{pre}.attn.logits"] = logits_q
        m = int_softmax_lis(logits_q, logit_spec.exponent, act[f"{pre}.attn.map"].bits)
        trace[f"{pre}.attn.map"] = m
        o_acc = shift_attention_v(hv, m)
        o_spec = act[f"{pre}.attn.out"]
        o = clip_codes(
            shift_round_array(o_acc, act[f"{pre}.v"].exponent - o_spec.exponent), ab, True
        )
        o = o.transpose(0, 2, 1, 3).reshape(b, c.tokens, c.dim)
        trace[f"{pre}.attn.out"] = o

        msa_exps = act[f"{pre}.msa.out"].channel_exponents()
        acc = psmac_matmul(o, qm.weights[f"{pre}.wo"].data, qm.bits[f"{pre}.wo"])
        msa = clip_codes(
            shift_round_array(acc, o_spec.exponent + wexp(f"{pre}.wo") - msa_exps), ab, True
        )
        trace[f"{pre}.msa.out"] = msa

        res1_exps = act[f"{pre}.res1"].channel_exponents()
        h = clip_codes(
            shift_round_array(h, h_exps - res1_exps)
            + shift_round_array(msa, msa_exps - res1_exps),
            ab,
            True,
        )
        h_exps = res1_exps
        trace[f"{pre}.res1"] = h

        ptf2 = act[f"{pre}.ln2.in"]
        ptf_codes, xhat = _ptf_enter(h, h_exps, ptf2)
        trace[f"{pre}.ln2.in"] = ptf_codes
        ln2_out = act[f"{pre}.ln2.out"]
        g = ln_row_kernel(
            xhat,
            ptf2.exponent,
            qm.ln_gamma_fx[f"{pre}.ln2"],
            qm.ln_beta_fx[f"{pre}.ln2"],
            ln2_out.channel_exponents(),
            ab,
        )
        trace[f"{pre}.ln2.out"] = g
        g_exp = ln2_out.matmul_exponent()

        f1_spec = act[f"{pre}.fc1.out"]
        acc = psmac_matmul(g, qm.weights[f"{pre}.fc1"].data, qm.bits[f"{pre}.fc1"])
        f1 = clip_codes(
            shift_round_array(acc, g_exp + wexp(f"{pre}.fc1") - f1_spec.exponent), ab, True
        )
        trace[f"{pre}.fc1.out"] = f1
        lut = qp.gelu_lut[pre]
        ge = lut[f1 + 2 ** (ab - 1)]
        trace[f"{pre}.gelu.out"] = ge
        ge_exp = act[f"{pre}.gelu.out"].exponent

        fc2_exps = act[f"{pre}.fc2.out"].channel_exponents()
        acc = psmac_matmul(ge, qm.weights[f"{pre}.fc2"].data, qm.bits[f"{pre}.fc2"])
        f2 = clip_codes(
            shift_round_array(acc, ge_exp + wexp(f"{pre}.fc2") - fc2_exps), ab, True
        )
        trace[f"{pre}.fc2.out"] = f2

        res2_exps = act[f"{pre}.res2"].channel_exponents()
        h = clip_codes(
            shift_round_array(h, h_exps - res2_exps)
            + shift_round_array(f2, fc2_exps - res2_exps),
            ab,
            True,
        )
        h_exps = res2_exps
        trace[f"{pre}.res2"] = h

    ptf_f = act["final_ln.in"]
    ptf_codes, xhat = _ptf_enter(h, h_exps, ptf_f)
    trace["final_ln.in"] = ptf_codes
    fin_out = act["final_ln.out"]
    z = ln_row_kernel(
        xhat,
        ptf_f.exponent,
        qm.ln_gamma_fx["final_ln"],
        qm.ln_beta_fx["final_ln"],
        fin_out.channel_exponents(),
        ab,
    )
    trace["final_ln.out"] = z
    z_exp = fin_out.matmul_exponent()
    acc = psmac_matmul(z[:, 0, :], qm.weights["head.w"].data, qm.bits["head.w"])
    trace["logits"] = acc
    logit_exps = (z_exp + wexp("head.w")).astype(np.float64)
    logits = acc.astype(np.float64) * np.exp2(logit_exps)
    if squeeze:
        logits = logits[0]
    return logits, trace


# --------------------------------------------------------------------------
# on-disk format: int8 code blobs + qparams.json + bitconfig.json


def save_qmodel(qm: QuantizedModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_qparams(qm.qparams, directory / "qparams.json")
    names = weight_layer_names(qm.config)
    chunks, tensors, offset = [], [], 0
    for name in names:
        raw = qm.weights[name].data.astype("<i1").tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(qm.weights[name].shape),
                "bits": qm.bits[name],
                "byte_offset": offset,
                "byte_len": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    (directory / "codes.bin").write_bytes(b"".join(chunks))
    manifest = {
        "config": qm.config.__dict__,
        "tensors": tensors,
        "ln_gamma_fx": {k: [int(v) for v in arr] for k, arr in qm.ln_gamma_fx.items()},
        "ln_beta_fx": {k: [int(v) for v in arr] for k, arr in qm.ln_beta_fx.items()},
        "cls_codes": [int(v) for v in qm.cls_codes],
        "pos_codes": [[int(v) for v in row] for row in qm.pos_codes],
    }
    (directory / "qmodel.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    bitdoc = {
        "layers": names,
        "bits": [qm.bits[n] for n in names],
        "model_size_mb": qm.model_size_mb(),
    }
    (directory / "bitconfig.json").write_text(json.dumps(bitdoc, indent=2) + "\n")


def load_qmodel(directory) -> QuantizedModel:
    directory = Path(directory)
    manifest = json.loads((directory / "qmodel.json").read_text())
    qparams = load_qparams(directory / "qparams.json")
    blob = (directory / "codes.bin").read_bytes()
    config = ModelConfig(**manifest["config"])
    weights, bits = {}, {}
    for entry in manifest["tensors"]:
        raw = blob[entry["byte_offset"] : entry["byte_offset"] + entry["byte_len"]]
        if len(raw) != entry["byte_len"]:
            raise EngineError(f"truncated codes for {entry['name']}")
        arr = np.frombuffer(raw, dtype="<i1").astype(np.int64).reshape(entry["shape"])
        weights[entry["name"]] = IntTensor(arr, entry["bits"])
        bits[entry["name"]] = entry["bits"]
    return QuantizedModel(
        config,
        qparams,
        bits,
        weights,
        {k: np.asarray(v, np.int64) for k, v in manifest["ln_gamma_fx"].items()},
        {k: np.asarray(v, np.int64) for k, v in manifest["ln_beta_fx"].items()},
        np.asarray(manifest["cls_codes"], np.int64),
        np.asarray(manifest["pos_codes"], np.int64),
    )
