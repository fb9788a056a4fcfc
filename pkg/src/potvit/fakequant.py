"""Fake-quantized reference engine.

Runs the same pipeline as the integer engine but in float64 on dequantized
values, rounding back to codes at every quantization point with
floor(x + 0.5). Because every scale is a power of two and accumulators stay
far below 2^53, each float step is exact, so the code trace must match the
integer engine bit for bit; any divergence flags a bug in one of the two.

LayerNorm, softmax, and the GELU table are shared fixed-point kernels (their
rounding is part of the model definition); matmuls, requantization, residual
adds, and attention-map shifts are implemented independently here.
"""

from __future__ import annotations

import math

import numpy as np

from .intengine import QuantizedModel, int_softmax_lis, ln_row_kernel
from .numerics import clip_codes, int_range, round_half_up_array
from .quantizer import QuantSpec


def _deq(codes, exps):
    return np.asarray(codes, np.float64) * np.exp2(
        np.asarray(exps, np.float64)
    )


def _requant(value: np.ndarray, exps) -> np.ndarray:
    """Codes at scale 2^exps from an exact float value (no clipping)."""
    return round_half_up_array(value * np.exp2(-np.asarray(exps, np.float64)))


def _ptf_enter_f(h_codes, h_exps, spec: QuantSpec):
    exps = spec.channel_exponents()
    value = _deq(h_codes, h_exps)
    codes = clip_codes(_requant(value, exps), spec.bits, True)
    xhat = codes * (np.int64(1) << (exps - spec.exponent))
    return codes, xhat


def fake_quant_forward(qm: QuantizedModel, x: np.ndarray) -> tuple[np.ndarray, dict]:
    """Float-domain twin of int_forward; returns (float logits, code trace)."""
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

    def wdeq(name):
        exps = qp.weight_exps[name][qm.bits[name]].astype(np.float64)
        return qm.weights[name].data.astype(np.float64) * np.exp2(exps)[None, :]

    in_spec = act["embed.in"]
    lo, hi = int_range(ab, True)
    xq = np.clip(_requant(x, in_spec.exponent), lo, hi)
    trace["embed.in"] = xq
    out_exps = act["embed.out"].channel_exponents()
    tok = _requant(_deq(xq, in_spec.exponent) @ wdeq("embed.w"), out_exps)
    cls = np.broadcast_to(qm.cls_codes, (b, 1, c.dim))
    h = clip_codes(np.concatenate([cls, tok], axis=1) + qm.pos_codes, ab, True)
    h_exps = out_exps
    trace["embed.out"] = h

    for i in range(c.layers):
        pre = f"block{i}"
        ptf1 = act[f"{pre}.ln1.in"]
        ptf_codes, xhat = _ptf_enter_f(h, h_exps, ptf1)
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
        a_val = _deq(a, ln_out.matmul_exponent())

        qkv = {}
        for w, point in (("wq", "q"), ("wk", "k"), ("wv", "v")):
            spec = act[f"{pre}.{point}"]
            codes = clip_codes(_requant(a_val @ wdeq(f"{pre}.{w}"), spec.exponent), ab, True)
            trace[f"{pre}.{point}"] = codes
            qkv[point] = codes

        dh = c.head_dim

        def heads(t):
            return t.reshape(b, c.tokens, c.heads, dh).transpose(0, 2, 1, 3)

        hq, hk, hv = heads(qkv["q"]), heads(qkv["k"]), heads(qkv["v"])
        logit_spec = act[f"{pre}.attn.logits"]
        logits_val = np.matmul(
            _deq(hq, act[f"{pre}.q"].exponent), _deq(hk, act[f"{pre}.k"].exponent).swapaxes(-1, -2)
        ) / math.sqrt(dh)
        logits_q = clip_codes(_requant(logits_val, logit_spec.exponent), ab, True)
        trace[f"{pre}.attn.logits"] = logits_q
        m = int_softmax_lis(logits_q, logit_spec.exponent, act[f"{pre}.attn.map"].bits)
        trace[f"{pre}.attn.map"] = m

        shifted = round_half_up_array(
            hv[..., None, :, :].astype(np.float64) * np.exp2(-m[..., :, :, None].astype(np.float64))
        )
        o_acc = shifted.sum(axis=-2)
        o_spec = act[f"{pre}.attn.out"]
        o = clip_codes(
            _requant(_deq(o_acc, act[f"{pre}.v"].exponent), o_spec.exponent), ab, True
        )
        o = o.transpose(0, 2, 1, 3).reshape(b, c.tokens, c.dim)
        trace[f"{pre}.attn.out"] = o

        msa_exps = act[f"{pre}.msa.out"].channel_exponents()
        msa = clip_codes(
            _requant(_deq(o, o_spec.exponent) @ wdeq(f"{pre}.wo"), msa_exps), ab, True
        )
        trace[f"{pre}.msa.out"] = msa

        res1_exps = act[f"{pre}.res1"].channel_exponents()
        h = clip_codes(
            _requant(_deq(h, h_exps), res1_exps) + _requant(_deq(msa, msa_exps), res1_exps),
            ab,
            True,
        )
        h_exps = res1_exps
        trace[f"{pre}.res1"] = h

        ptf2 = act[f"{pre}.ln2.in"]
        ptf_codes, xhat = _ptf_enter_f(h, h_exps, ptf2)
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
        g_val = _deq(g, ln2_out.matmul_exponent())

        f1_spec = act[f"{pre}.fc1.out"]
        f1 = clip_codes(_requant(g_val @ wdeq(f"{pre}.fc1"), f1_spec.exponent), ab, True)
        trace[f"{pre}.fc1.out"] = f1
        ge = qp.gelu_lut[pre][f1 + 2 ** (ab - 1)]
        trace[f"{pre}.gelu.out"] = ge

        fc2_exps = act[f"{pre}.fc2.out"].channel_exponents()
        f2 = clip_codes(
            _requant(
                _deq(ge, act[f"{pre}.gelu.out"].exponent) @ wdeq(f"{pre}.fc2"), fc2_exps
            ),
            ab,
            True,
        )
        trace[f"{pre}.fc2.out"] = f2

        res2_exps = act[f"{pre}.res2"].channel_exponents()
        h = clip_codes(
            _requant(_deq(h, h_exps), res2_exps) + _requant(_deq(f2, fc2_exps), res2_exps),
            ab,
            True,
        )
        h_exps = res2_exps
        trace[f"{pre}.res2"] = h

    ptf_f = act["final_ln.in"]
    ptf_codes, xhat = _ptf_enter_f(h, h_exps, ptf_f)
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
    logits_val = _deq(z[:, 0, :], fin_out.matmul_exponent()) @ wdeq("head.w")
    w_exps = qp.weight_exps["head.w"][qm.bits["head.w"]].astype(np.int64)
    trace["logits"] = _requant(logits_val, fin_out.matmul_exponent() + w_exps)
    logits = logits_val
    if squeeze:
        logits = logits[0]
    return logits, trace


def fakequant_accuracy(qm: QuantizedModel, inputs: np.ndarray, labels: np.ndarray) -> float:
    logits, _ = fake_quant_forward(qm, inputs)
    return float((logits.argmax(axis=-1) == labels).mean())


def int_accuracy(qm: QuantizedModel, inputs: np.ndarray, labels: np.ndarray) -> float:
    from .intengine import int_forward

    logits, _ = int_forward(qm, inputs)
    return float((logits.argmax(axis=-1) == labels).mean())
