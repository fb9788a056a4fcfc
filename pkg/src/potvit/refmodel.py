"""Tiny pre-LN Vision Transformer in float: forward with an activation trace,
reverse-mode gradients, and a deterministic SGD trainer.

The forward is the quantization target; its trace records every layer point
the calibrator needs (LN inputs/outputs, attention maps, residual outputs).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import LN_EPS
from .dataset import SyntheticDataset
from .numerics import Rng, matmul


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    layers: int = 2
    heads: int = 2
    dim: int = 32
    tokens: int = 17  # class token + patch tokens
    mlp_ratio: float = 2.0
    classes: int = 4
    in_dim: int = 16

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.layers < 1 or self.tokens < 2:
            raise ValueError("need layers >= 1 and tokens >= 2")
        # 1/sqrt(head_dim) must itself be a power of two so attention logits
        # can be rescaled with a shift in the integer engine
        if not float(math.log2(self.head_dim) / 2).is_integer():
            raise ValueError("head_dim must be a power of 4")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def mlp_dim(self) -> int:
        return int(self.dim * self.mlp_ratio)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        return cls(**json.loads(Path(path).read_text()))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


@dataclass
class FloatModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def weight_layer_names(config: ModelConfig) -> list[str]:
    """Matmul weights, in forward order; the mixed-precision search space."""
    names = ["embed.w"]
    for i in range(config.layers):
        names += [f"block{i}.{w}" for w in ("wq", "wk", "wv", "wo", "fc1", "fc2")]
    names.append("head.w")
    return names


def init_model(config: ModelConfig, rng: Rng) -> FloatModel:
    c = config
    p: dict[str, np.ndarray] = {}

    def lin(fan_in, fan_out):
        return (rng.normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(np.float32)

    p["embed.w"] = lin(c.in_dim, c.dim)
    p["embed.cls"] = (rng.normal((c.dim,)) * 0.02).astype(np.float32)
    p["embed.pos"] = (rng.normal((c.tokens, c.dim)) * 0.02).astype(np.float32)
    for i in range(c.layers):
        for w in ("wq", "wk", "wv", "wo"):
            p[f"block{i}.{w}"] = lin(c.dim, c.dim)
        p[f"block{i}.fc1"] = lin(c.dim, c.mlp_dim)
        p[f"block{i}.fc2"] = lin(c.mlp_dim, c.dim)
        for ln in ("ln1", "ln2"):
            p[f"block{i}.{ln}.gamma"] = np.ones(c.dim, np.float32)
            p[f"block{i}.{ln}.beta"] = np.zeros(c.dim, np.float32)
    p["final_ln.gamma"] = np.ones(c.dim, np.float32)
    p["final_ln.beta"] = np.zeros(c.dim, np.float32)
    p["head.w"] = lin(c.dim, c.classes)
    return FloatModel(config, p)


def _layernorm(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gamma + beta


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(ad.GELU_C * (x + 0.044715 * x**3)))


def forward(model: FloatModel, x: np.ndarray) -> tuple[np.ndarray, dict]:
    """Pre-LN transformer forward; returns (logits, activation trace).

    x is (tokens-1, in_dim) or a batch (B, tokens-1, in_dim); trace values
    carry the batch axis.
    """
    c = model.config
    p = model.params
    x = np.asarray(x, np.float32)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.shape[-2] != c.tokens - 1 or x.shape[-1] != c.in_dim:
        raise ValueError(f"input shape {x.shape} incompatible with config")
    b = x.shape[0]
    trace: dict[str, np.ndarray] = {}

    tok = matmul(x, p["embed.w"])
    cls = np.broadcast_to(p["embed.cls"], (b, 1, c.dim))
    h = np.concatenate([cls, tok], axis=1) + p["embed.pos"]
    trace["embed.in"] = x
    trace["embed.out"] = h

    for i in range(c.layers):
        pre = f"block{i}"
        trace[f"{pre}.ln1.in"] = h
        a = _layernorm(h, p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"])
        trace[f"{pre}.ln1.out"] = a
        q = matmul(a, p[f"{pre}.wq"])
        k = matmul(a, p[f"{pre}.wk"])
        v = matmul(a, p[f"{pre}.wv"])
        trace[f"{pre}.q"], trace[f"{pre}.k"], trace[f"{pre}.v"] = q, k, v

        dh = c.head_dim
        heads_q = q.reshape(b, c.tokens, c.heads, dh).transpose(0, 2, 1, 3)
        heads_k = k.reshape(b, c.tokens, c.heads, dh).transpose(0, 2, 1, 3)
        heads_v = v.reshape(b, c.tokens, c.heads, dh).transpose(0, 2, 1, 3)
        logits_attn = np.matmul(heads_q, heads_k.swapaxes(-1, -2)) / np.sqrt(dh)
        trace[f"{pre}.attn.logits"] = logits_attn.astype(np.float32)
        m = _softmax(logits_attn.astype(np.float32))
        trace[f"{pre}.attn.map"] = m
        o = np.matmul(m, heads_v)  # (B, H, N, dh)
        o = o.transpose(0, 2, 1, 3).reshape(b, c.tokens, c.dim)
        trace[f"{pre}.attn.out"] = o
        msa = matmul(o, p[f"{pre}.wo"])
        trace[f"{pre}.msa.out"] = msa
        h = h + msa
        trace[f"{pre}.res1"] = h

        trace[f"{pre}.ln2.in"] = h
        g = _layernorm(h, p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"])
        trace[f"{pre}.ln2.out"] = g
        f1 = matmul(g, p[f"{pre}.fc1"])
        trace[f"{pre}.fc1.out"] = f1
        act = _gelu(f1).astype(np.float32)
        trace[f"{pre}.gelu.out"] = act
        f2 = matmul(act, p[f"{pre}.fc2"])
        trace[f"{pre}.fc2.out"] = f2
        h = h + f2
        trace[f"{pre}.res2"] = h

    trace["final_ln.in"] = h
    z = _layernorm(h, p["final_ln.gamma"], p["final_ln.beta"])
    trace["final_ln.out"] = z
    logits = matmul(z[:, 0, :], p["head.w"])
    trace["logits"] = logits
    if squeeze:
        logits = logits[0]
    return logits, trace


def _loss_graph(model: FloatModel, params: dict[str, ad.Var], x, labels) -> ad.Var:
    """Autodiff twin of forward(); x is (B, tokens-1, in_dim)."""
    c = model.config
    b = x.shape[0]
    xv = ad.Var(x)

    tok = ad.matmul(xv, params["embed.w"])
    cls = ad.broadcast_to(params["embed.cls"], (b, 1, c.dim))
    h = ad.add(ad.concat([cls, tok], axis=1), params["embed.pos"])

    for i in range(c.layers):
        pre = f"block{i}"
        a = ad.layernorm_rows(h, params[f"{pre}.ln1.gamma"], params[f"{pre}.ln1.beta"])
        q = ad.matmul(a, params[f"{pre}.wq"])
        k = ad.matmul(a, params[f"{pre}.wk"])
        v = ad.matmul(a, params[f"{pre}.wv"])
        dh = c.head_dim
        outs = []
        for hd in range(c.heads):
            sl = (Ellipsis, slice(hd * dh, (hd + 1) * dh))
            qh, kh, vh = ad.getitem(q, sl), ad.getitem(k, sl), ad.getitem(v, sl)
            logits_attn = ad.scale(
                ad.matmul(qh, ad.transpose_last2(kh)), 1.0 / np.sqrt(dh)
            )
            outs.append(ad.matmul(ad.softmax_rows(logits_attn), vh))
        o = ad.concat(outs, axis=-1)
        h = ad.add(h, ad.matmul(o, params[f"{pre}.wo"]))
        g = ad.layernorm_rows(h, params[f"{pre}.ln2.gamma"], params[f"{pre}.ln2.beta"])
        f1 = ad.matmul(g, params[f"{pre}.fc1"])
        h = ad.add(h, ad.matmul(ad.gelu_tanh(f1), params[f"{pre}.fc2"]))

    z = ad.layernorm_rows(h, params["final_ln.gamma"], params["final_ln.beta"])
    logits = ad.matmul(ad.getitem(z, (slice(None), 0, slice(None))), params["head.w"])
    return ad.mean_cross_entropy(logits, labels)


def loss_and_gradient(
    model: FloatModel, x: np.ndarray, labels: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy and reverse-mode gradients for every weight."""
    params = {k: ad.Var(v) for k, v in model.params.items()}
    loss = _loss_graph(model, params, np.asarray(x, np.float64), labels)
    ad.backward(loss)
    return float(loss.value), {k: v.grad for k, v in params.items()}


def gradient(model: FloatModel, batch: tuple[np.ndarray, np.ndarray]) -> dict:
    x, labels = batch
    if len(labels) == 0:
        raise ValueError("empty batch")
    return loss_and_gradient(model, x, labels)[1]


def accuracy(model: FloatModel, inputs: np.ndarray, labels: np.ndarray) -> float:
    logits, _ = forward(model, inputs)
    return float((logits.argmax(axis=-1) == labels).mean())


def train(
    config: ModelConfig,
    dataset: SyntheticDataset,
    epochs: int = 30,
    lr: float = 0.05,
    seed: int = 0,
    batch_size: int = 32,
    momentum: float = 0.9,
) -> FloatModel:
    """Plain SGD with momentum; fully deterministic per seed."""
    rng = Rng(seed)
    model = init_model(config, rng.split(1)[0])
    xs, ys = dataset.train
    vel = {k: np.zeros_like(v, dtype=np.float64) for k, v in model.params.items()}
    for _ in range(epochs):
        order = rng.permutation(len(ys))
        for start in range(0, len(ys), batch_size):
            idx = order[start : start + batch_size]
            loss, grads = loss_and_gradient(model, xs[idx], ys[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss}")
            for k in model.params:
                vel[k] = momentum * vel[k] - lr * grads[k]
                model.params[k] = (model.params[k].astype(np.float64) + vel[k]).astype(
                    np.float32
                )
    vx, vy = dataset.val
    model.meta = {
        "train_acc": accuracy(model, xs, ys),
        "val_acc": accuracy(model, vx, vy),
        "epochs": epochs,
        "lr": lr,
        "seed": seed,
    }
    return model
