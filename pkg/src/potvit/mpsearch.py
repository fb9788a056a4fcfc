"""Coarse-to-fine mixed-precision bit allocation for the matmul weights.

Coarse stage: Hutchinson estimates of each layer's Hessian trace combine with
the L2 weight-rounding perturbation into a sensitivity score (omega); Pareto
allocation picks the minimal-omega configurations under a model-size budget.
Fine stage: a small evolutionary search over {4, 8} bit vectors, scored by
fake-quant accuracy on the calibration split, refines the coarse seeds.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fakequant import fake_quant_forward
from .intengine import build_quantized_model
from .numerics import Rng, clip_codes, round_half_up_array
from .quantizer import QuantParams, smoothed_weight
from .refmodel import FloatModel, loss_and_gradient, weight_layer_names

BIT_CHOICES = (4, 8)


class InfeasibleBudget(ValueError):
    pass


@dataclass
class TraceEstimate:
    value: float  # averaged Hessian trace for one layer
    samples: int
    seed: int

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("need at least one probe")
        if not np.isfinite(self.value):
            raise ValueError("non-finite trace estimate")


@dataclass
class BitConfig:
    bits: tuple  # one of BIT_CHOICES per weight layer, forward order
    model_size_mb: float
    omega: float | None = None
    accuracy: float | None = None


@dataclass
class SearchConfig:
    population: int = 25
    children: int = 10  # crossover offspring per iteration; same count mutated
    mutation_prob: float = 0.5
    iterations: int = 20
    seed: int = 0
    budget_mb: float = 0.0
    probe: str = "rademacher"  # rademacher | gaussian
    trace_samples: int = 32

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.probe not in ("rademacher", "gaussian"):
            raise ValueError(f"unknown probe distribution {self.probe!r}")


# --------------------------------------------------------------------------
# Hessian trace estimation


def hessian_matvec(model: FloatModel, batch, layer: str, z: np.ndarray) -> np.ndarray:
    """H @ z for one layer's weights via central differences of the gradient.

    eps = 1e-3 * ||W||_inf / ||z||_inf keeps the probe perturbation small
    relative to the weights regardless of the probe's norm.
    """
    z = np.asarray(z, dtype=np.float64)
    if not z.any():
        return np.zeros_like(z)
    x, labels = batch
    w = model.params[layer]
    orig = w.astype(np.float64)
    eps = 1e-3 * np.abs(orig).max() / np.abs(z).max()
    try:
        model.params[layer] = (orig + eps * z).astype(np.float64)
        _, gp = loss_and_gradient(model, x, labels)
        model.params[layer] = (orig - eps * z).astype(np.float64)
        _, gm = loss_and_gradient(model, x, labels)
    finally:
        model.params[layer] = w
    hz = (gp[layer] - gm[layer]) / (2.0 * eps)
    if not np.all(np.isfinite(hz)):
        raise FloatingPointError(f"non-finite Hessian matvec for {layer}")
    return hz


def hutchinson_trace_matvec(matvec, shape, m: int, rng: Rng, probe: str = "rademacher") -> float:
    """(1/m) sum z^T (H z) with +-1 (or Gaussian) probes."""
    total = 0.0
    for _ in range(m):
        z = rng.rademacher(shape) if probe == "rademacher" else rng.normal(shape)
        total += float(np.sum(z * matvec(z)))
    return total / m


def hutchinson_trace(
    model: FloatModel, batch, layer: str, m: int, rng: Rng, probe: str = "rademacher"
) -> TraceEstimate:
    shape = model.params[layer].shape
    val = hutchinson_trace_matvec(
        lambda z: hessian_matvec(model, batch, layer, z), shape, m, rng, probe
    )
    return TraceEstimate(val, m, rng.seed)


# --------------------------------------------------------------------------
# omega scoring and Pareto allocation


def weight_perturbation(model: FloatModel, qparams: QuantParams, layer: str, bits: int) -> float:
    """||W_Q_deq - W||_2 for one layer at the given width, smoothing applied."""
    w = smoothed_weight(model, qparams, layer)
    exps = qparams.weight_exps[layer][bits].astype(np.float64)
    codes = clip_codes(round_half_up_array(w * np.exp2(-exps)[None, :]), bits, True)
    return float(np.linalg.norm(w - codes.astype(np.float64) * np.exp2(exps)[None, :]))


def layer_sizes_mb(model: FloatModel) -> dict[str, float]:
    return {
        n: model.params[n].size / 8.0 / 2.0**20 for n in weight_layer_names(model.config)
    }


def config_size_mb(model: FloatModel, bits) -> float:
    sizes = layer_sizes_mb(model)
    return sum(b * sizes[n] for n, b in zip(weight_layer_names(model.config), bits))


def omega(bits, traces: dict[str, float], perturbs: dict[str, dict[int, float]], names) -> float:
    """Total second-order perturbation: sum of trace_i * ||dW_i||_2."""
    return sum(traces[n] * perturbs[n][b] for n, b in zip(names, bits))


def estimate_traces(
    model: FloatModel, batch, cfg: SearchConfig
) -> dict[str, TraceEstimate]:
    rngs = Rng(cfg.seed).split(len(weight_layer_names(model.config)))
    return {
        name: hutchinson_trace(model, batch, name, cfg.trace_samples, rng, cfg.probe)
        for name, rng in zip(weight_layer_names(model.config), rngs)
    }


def pareto_allocate(
    traces: dict[str, float],
    model: FloatModel,
    qparams: QuantParams,
    budget_mb: float,
    k: int,
) -> list[BitConfig]:
    """k minimal-omega bit configs fitting the budget.

    Exhaustive for <= 20 layers; above that, greedy upgrades from all-4-bit
    by the best omega reduction per megabyte.
    """
    names = weight_layer_names(model.config)
    sizes = layer_sizes_mb(model)
    perturbs = {n: {b: weight_perturbation(model, qparams, n, b) for b in BIT_CHOICES} for n in names}
    min_size = sum(min(BIT_CHOICES) * sizes[n] for n in names)
    if budget_mb < min_size - 1e-12:
        raise InfeasibleBudget(
            f"budget {budget_mb:.4f} MB below all-{min(BIT_CHOICES)}-bit size {min_size:.4f} MB"
        )

    def mk(bits):
        bits = tuple(bits)
        return BitConfig(
            bits,
            sum(b * sizes[n] for n, b in zip(names, bits)),
            omega=omega(bits, traces, perturbs, names),
        )

    if len(names) <= 20:
        feasible = []
        for mask in range(2 ** len(names)):
            bits = tuple(BIT_CHOICES[(mask >> i) & 1] for i in range(len(names)))
            cand = mk(bits)
            if cand.model_size_mb <= budget_mb + 1e-12:
                feasible.append(cand)
        feasible.sort(key=lambda c: (c.omega, c.model_size_mb, c.bits))
        return feasible[:k]

    bits = [min(BIT_CHOICES)] * len(names)
    out = [mk(bits)]
    remaining = budget_mb - out[0].model_size_mb
    candidates = list(range(len(names)))
    while candidates:
        def gain(i):
            dsize = (8 - 4) * sizes[names[i]]
            domega = traces[names[i]] * (perturbs[names[i]][4] - perturbs[names[i]][8])
            return domega / dsize

        candidates.sort(key=gain, reverse=True)
        i = candidates[0]
        dsize = (8 - 4) * sizes[names[i]]
        if dsize > remaining + 1e-12 or gain(i) <= 0:
            break
        bits[i] = 8
        remaining -= dsize
        candidates.pop(0)
        out.append(mk(bits))
    out.sort(key=lambda c: (c.omega, c.model_size_mb, c.bits))
    return out[:k]


# --------------------------------------------------------------------------
# evolutionary refinement


def make_eval_fn(model: FloatModel, qparams: QuantParams, calib_x, calib_y):
    """Fake-quant calibration accuracy, memoized by bit vector."""
    names = weight_layer_names(model.config)
    cache: dict[tuple, float] = {}

    def eval_fn(bits: tuple) -> float:
        bits = tuple(bits)
        if bits not in cache:
            qm = build_quantized_model(model, qparams, dict(zip(names, bits)))
            logits, _ = fake_quant_forward(qm, calib_x)
            cache[bits] = float((logits.argmax(axis=-1) == calib_y).mean())
        return cache[bits]

    return eval_fn


def _rank_key(c: BitConfig):
    return (-c.accuracy, c.model_size_mb, c.bits)


def evo_search(
    init: list[BitConfig],
    eval_fn,
    cfg: SearchConfig,
    model: FloatModel | None = None,
    sizes: dict[str, float] | None = None,
    names: list[str] | None = None,
) -> tuple[BitConfig, list[dict]]:
    """Crossover/mutation refinement of the coarse seeds.

    Population is kept at cfg.population, ranked by (accuracy, smaller size,
    lexicographic bits); over-budget children are discarded. Deterministic
    per seed. Returns (best config, per-iteration history rows).
    """
    if model is not None:
        names = weight_layer_names(model.config)
        sizes = layer_sizes_mb(model)
    if sizes is None or names is None:
        raise ValueError("need either model or (sizes, names)")
    rng = Rng(cfg.seed)

    def size_of(bits):
        return sum(b * sizes[n] for n, b in zip(names, bits))

    threads = max(1, int(os.environ.get("POTVIT_THREADS", "1")))

    def evaluate(configs):
        if threads > 1 and len(configs) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                accs = list(pool.map(lambda c: eval_fn(c.bits), configs))
        else:
            accs = [eval_fn(c.bits) for c in configs]
        for c, a in zip(configs, accs):
            c.accuracy = a

    pop = []
    seen = set()
    for c in init:
        if c.bits not in seen and size_of(c.bits) <= cfg.budget_mb + 1e-12:
            seen.add(c.bits)
            pop.append(BitConfig(tuple(c.bits), size_of(c.bits), omega=c.omega))
    if not pop:
        raise InfeasibleBudget("no feasible configuration in the initial population")
    evaluate(pop)
    pop.sort(key=_rank_key)
    pop = pop[: cfg.population]
    history = []

    for it in range(cfg.iterations):
        children = []
        for _ in range(cfg.children):  # single-point splice of two parents
            a = pop[int(rng.integers(0, len(pop)))]
            b = pop[int(rng.integers(0, len(pop)))]
            cut = int(rng.integers(1, len(names))) if len(names) > 1 else 0
            children.append(a.bits[:cut] + b.bits[cut:])
        for _ in range(cfg.children):  # per-gene flips
            parent = pop[int(rng.integers(0, len(pop)))]
            bits = list(parent.bits)
            for g in range(len(bits)):
                if rng.random() < cfg.mutation_prob:
                    bits[g] = BIT_CHOICES[1] if bits[g] == BIT_CHOICES[0] else BIT_CHOICES[0]
            children.append(tuple(bits))
        fresh = []
        for bits in children:
            if bits in seen or size_of(bits) > cfg.budget_mb + 1e-12:
                continue
            seen.add(bits)
            fresh.append(BitConfig(bits, size_of(bits)))
        evaluate(fresh)
        pop = sorted(pop + fresh, key=_rank_key)[: cfg.population]
        history.append(
            {
                "iteration": it,
                "best_acc": pop[0].accuracy,
                "population_mean_acc": float(np.mean([c.accuracy for c in pop])),
            }
        )
    return pop[0], history


def search_bits(
    model: FloatModel,
    qparams: QuantParams,
    calib_x,
    calib_y,
    cfg: SearchConfig,
) -> tuple[BitConfig, list[dict]]:
    """Full coarse-to-fine pipeline: traces -> Pareto seeds -> evolution."""
    names = weight_layer_names(model.config)
    batch = (calib_x, calib_y)
    traces = {n: t.value for n, t in estimate_traces(model, batch, cfg).items()}
    seeds = pareto_allocate(traces, model, qparams, cfg.budget_mb, cfg.population)
    eval_fn = make_eval_fn(model, qparams, calib_x, calib_y)
    best, history = evo_search(seeds, eval_fn, cfg, model=model)
    if best.omega is None:
        perturbs = {
            n: {b: weight_perturbation(model, qparams, n, b) for b in BIT_CHOICES}
            for n in names
        }
        best.omega = omega(best.bits, traces, perturbs, names)
    return best, history


# --------------------------------------------------------------------------
# artifacts


def save_bitconfig(config: BitConfig, names, path) -> None:
    doc = {
        "layers": list(names),
        "bits": [int(b) for b in config.bits],
        "model_size_mb": config.model_size_mb,
        "omega": config.omega,
        "accuracy": config.accuracy,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_bitconfig(path) -> tuple[BitConfig, list[str]]:
    doc = json.loads(Path(path).read_text())
    return (
        BitConfig(
            tuple(doc["bits"]), doc["model_size_mb"], doc.get("omega"), doc.get("accuracy")
        ),
        doc["layers"],
    )


def save_search_log(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iteration", "best_acc", "population_mean_acc"])
        writer.writeheader()
        writer.writerows(history)
