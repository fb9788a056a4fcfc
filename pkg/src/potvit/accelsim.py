"""Cycle and energy model of a chunk-based transformer accelerator.

Chunks: a 32x64 precision-scalable MAC array (matmuls), a 32x64 shifter array
(attention-map application), and dedicated LayerNorm / softmax / requantize
modules. Rows stream through chunks under a row-stationary dataflow, so
chunks can be chained into row-granular pipelines: an inter-layer chain
(LN -> requantize -> first matmul) and an intra-layer attention chain
(QK^T -> softmax -> shift-MV). An analytic model gives cycle counts in closed
form; an independent event-driven simulator cross-checks it.
"""

from __future__ import annotations

import csv
import heapq
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MATMUL, SHIFT_MATMUL, LN, SOFTMAX, REQUANT = (
    "matmul",
    "shift-matmul",
    "ln",
    "softmax",
    "requant",
)
KINDS = (MATMUL, SHIFT_MATMUL, LN, SOFTMAX, REQUANT)
RESOURCE = {MATMUL: "psmac", SHIFT_MATMUL: "shifter", LN: "ln", SOFTMAX: "softmax", REQUANT: "requant"}

DEFAULT_UNIT_ENERGY = {
    # relative energy units; ratios matter (fp32 multiply >> int8 MAC > shift ~ add)
    "mac8": 1.0,
    "mac4": 0.5,
    "shift": 0.06,
    "add": 0.06,
    "divide": 2.0,
    "fp32_mul": 8.0,
    "sram_byte": 0.25,
    "dram_byte": 20.0,
}


class SimulatorError(RuntimeError):
    pass


@dataclass
class AcceleratorConfig:
    psmac_rows: int = 32
    psmac_cols: int = 64
    shifter_rows: int = 32
    shifter_cols: int = 64
    ln_parallelism: int = 64
    requant_parallelism: int = 32
    softmax_parallelism: int = 64
    frequency_mhz: float = 500.0
    qkv_buffer_kb: float = 111.0  # 3 x 37 KB
    input_buffer_kb: float = 74.0
    output_buffer_kb: float = 74.0
    weight_buffer_kb: float = 144.0
    dram_bandwidth_bytes_per_cycle: float = 16.0
    requant_unit: str = "shift"  # shift | fp32
    unit_energy: dict = field(default_factory=lambda: dict(DEFAULT_UNIT_ENERGY))

    def __post_init__(self):
        for name, v in asdict(self).items():
            if isinstance(v, (int, float)) and v <= 0:
                raise ValueError(f"{name} must be positive")
        if self.requant_unit not in ("shift", "fp32"):
            raise ValueError(f"unknown requant unit {self.requant_unit!r}")
        missing = set(DEFAULT_UNIT_ENERGY) - set(self.unit_energy)
        if missing:
            raise ValueError(f"missing unit energies: {sorted(missing)}")

    def total_buffer_kb(self) -> float:
        return (
            self.qkv_buffer_kb + self.input_buffer_kb + self.output_buffer_kb + self.weight_buffer_kb
        )


@dataclass
class Stage:
    name: str
    kind: str  # one of KINDS
    rows: int
    k: int  # inner dim for matmuls, row width for ln/softmax/requant
    cols: int = 1
    weight_bits: int = 8
    chain: str | None = None  # stages sharing a chain id pipeline row-by-row
    chain_kind: str | None = None  # inter | intra
    group: str = "other"  # attention | mlp | other, for ratio reporting

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown stage kind {self.kind!r}")
        if min(self.rows, self.k, self.cols) < 1:
            raise ValueError(f"stage {self.name} has non-positive dims")


@dataclass
class CostReport:
    total_cycles: int
    stage_cycles: dict
    inter: bool
    intra: bool
    latency_us: float = 0.0
    energy: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "total_cycles": self.total_cycles,
            "stage_cycles": self.stage_cycles,
            "pipeline": {"inter": self.inter, "intra": self.intra},
            "latency_us": self.latency_us,
            "energy": self.energy,
        }


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def stage_row_cycles(stage: Stage, cfg: AcceleratorConfig) -> int:
    """Cycles for one output row to pass through the stage's chunk.

    matmul folds the inner dim over the MAC rows and the output columns over
    the MAC columns; 4-bit weights run in two-op mode, doubling the effective
    lanes. LN/softmax are internally pipelined, so their per-row rate is one
    width-chunk pass. A matmul whose weights overflow the weight buffer is
    additionally bounded by its DRAM streaming rate.
    """
    if stage.kind == MATMUL:
        lanes = cfg.psmac_rows * (2 if stage.weight_bits == 4 else 1)
        compute = _ceil_div(stage.k, lanes) * _ceil_div(stage.cols, cfg.psmac_cols)
        wbytes = stage.k * stage.cols * stage.weight_bits / 8.0
        if wbytes > cfg.weight_buffer_kb * 1024:
            dram_rows = _ceil_div(
                int(np.ceil(wbytes / cfg.dram_bandwidth_bytes_per_cycle)), stage.rows
            )
            compute = max(compute, dram_rows)
        return compute
    if stage.kind == SHIFT_MATMUL:
        return _ceil_div(stage.k, cfg.shifter_rows) * _ceil_div(stage.cols, cfg.shifter_cols)
    if stage.kind == LN:
        return _ceil_div(stage.k, cfg.ln_parallelism)
    if stage.kind == SOFTMAX:
        return _ceil_div(stage.k, cfg.softmax_parallelism)
    return _ceil_div(stage.k, cfg.requant_parallelism)


def _groups(workload, inter: bool, intra: bool):
    """Split the stage list into pipeline chains and singletons, in order."""
    groups = []
    i = 0
    while i < len(workload):
        s = workload[i]
        enabled = (s.chain_kind == "inter" and inter) or (s.chain_kind == "intra" and intra)
        if s.chain is not None and enabled:
            j = i
            while j < len(workload) and workload[j].chain == s.chain:
                j += 1
            groups.append(workload[i:j])
            i = j
        else:
            groups.append([s])
            i += 1
    return groups


def simulate_sequential(workload: list[Stage], cfg: AcceleratorConfig) -> CostReport:
    stage_cycles = {s.name: s.rows * stage_row_cycles(s, cfg) for s in workload}
    total = int(sum(stage_cycles.values()))
    return _finish(CostReport(total, stage_cycles, inter=False, intra=False), cfg)


def simulate_pipelined(
    workload: list[Stage], cfg: AcceleratorConfig, inter: bool = True, intra: bool = True
) -> CostReport:
    """Chained stages overlap row-by-row: sum(t_j) fill + max(t_j)*(n-1)."""
    stage_cycles = {s.name: s.rows * stage_row_cycles(s, cfg) for s in workload}
    total = 0
    for group in _groups(workload, inter, intra):
        if len(group) == 1:
            total += group[0].rows * stage_row_cycles(group[0], cfg)
            continue
        times = [stage_row_cycles(s, cfg) for s in group]
        n = group[0].rows
        if any(s.rows != n for s in group):
            raise SimulatorError(f"chain {group[0].chain} has mismatched row counts")
        total += sum(times) + max(times) * (n - 1)
    return _finish(CostReport(int(total), stage_cycles, inter=inter, intra=intra), cfg)


def _finish(report: CostReport, cfg: AcceleratorConfig) -> CostReport:
    report.latency_us = report.total_cycles / cfg.frequency_mhz
    return report


# --------------------------------------------------------------------------
# energy


def stage_op_counts(stage: Stage, cfg: AcceleratorConfig) -> dict:
    """Arithmetic op and memory-traffic counts; independent of pipelining."""
    ops = {k: 0.0 for k in DEFAULT_UNIT_ENERGY}
    act_bytes = stage.rows * stage.k + stage.rows * stage.cols  # read row + write row
    if stage.kind == MATMUL:
        macs = stage.rows * stage.k * stage.cols
        ops["mac4" if stage.weight_bits == 4 else "mac8"] = macs
        wbytes = stage.k * stage.cols * stage.weight_bits / 8.0
        ops["dram_byte"] = wbytes  # weights fetched once per layer, then resident
        ops["sram_byte"] = act_bytes + wbytes
        # shift-based requantization of each output element
        key = "shift" if cfg.requant_unit == "shift" else "fp32_mul"
        ops[key] += stage.rows * stage.cols
    elif stage.kind == SHIFT_MATMUL:
        n = stage.rows * stage.k * stage.cols
        ops["shift"] = n
        ops["add"] = n
        ops["sram_byte"] = act_bytes
    elif stage.kind == LN:
        width = stage.k
        ops["add"] = 3.0 * stage.rows * width  # sums, centering, scale-add
        ops["divide"] = float(stage.rows)  # one reciprocal sqrt per row
        ops["shift"] = stage.rows * width
        ops["sram_byte"] = 2.0 * stage.rows * width
    elif stage.kind == SOFTMAX:
        width = stage.k
        ops["add"] = 2.0 * stage.rows * width
        ops["shift"] = 2.0 * stage.rows * width
        ops["divide"] = float(stage.rows * width)
        ops["sram_byte"] = 2.0 * stage.rows * width
    else:  # requant
        key = "shift" if cfg.requant_unit == "shift" else "fp32_mul"
        ops[key] = float(stage.rows * stage.k)
        ops["sram_byte"] = 2.0 * stage.rows * stage.k
    return ops


def energy(workload: list[Stage], cfg: AcceleratorConfig, report: CostReport) -> CostReport:
    breakdown = {k: 0.0 for k in DEFAULT_UNIT_ENERGY}
    for stage in workload:
        for k, n in stage_op_counts(stage, cfg).items():
            breakdown[k] += n * cfg.unit_energy[k]
    report.energy = {
        "by_unit": breakdown,
        "total": float(sum(breakdown.values())),
        "requant_unit": cfg.requant_unit,
    }
    return report


# --------------------------------------------------------------------------
# event-driven oracle


def event_driven_oracle(
    workload: list[Stage], cfg: AcceleratorConfig, inter: bool = False, intra: bool = False
) -> CostReport:
    """Discrete-event cross-check of the analytic model.

    Each chunk is a single-server resource; each (stage, row) task depends on
    the same row of the previous stage in its chain, and every group is
    barrier-separated from the previous one. A priority queue advances time;
    if no task can make progress the dependency graph is cyclic.
    """
    stage_cycles = {s.name: s.rows * stage_row_cycles(s, cfg) for s in workload}
    clock = 0
    for group in _groups(workload, inter, intra):
        times = [stage_row_cycles(s, cfg) for s in group]
        res_free = {RESOURCE[s.kind]: clock for s in group}
        done: dict[tuple, int] = {}
        pending = [(si, r) for si, s in enumerate(group) for r in range(s.rows)]
        heap = []
        for si, r in pending:
            if si == 0:
                heapq.heappush(heap, (clock, si, r))
        scheduled = set((0, r) for r in range(group[0].rows))
        finished = 0
        total_tasks = len(pending)
        while heap:
            ready_at, si, r = heapq.heappop(heap)
            res = RESOURCE[group[si].kind]
            start = max(ready_at, res_free[res])
            end = start + times[si]
            res_free[res] = end
            done[(si, r)] = end
            finished += 1
            nxt = (si + 1, r)
            if si + 1 < len(group) and nxt not in scheduled:
                scheduled.add(nxt)
                heapq.heappush(heap, (end, si + 1, r))
        if finished != total_tasks:
            raise SimulatorError("deadlock: unreachable tasks in dependency graph")
        clock = max(done.values()) if done else clock
    return _finish(
        CostReport(int(clock), stage_cycles, inter=inter, intra=intra), cfg
    )


# --------------------------------------------------------------------------
# workloads


def build_workload(
    tokens: int,
    dim: int,
    heads: int,
    mlp_dim: int,
    layers: int,
    weight_bits=None,
    block_names=None,
) -> list[Stage]:
    """Stage list for a transformer encoder under the chunk mapping.

    Per block: the inter-layer chain LN1 -> requant -> W_Q matmul, then W_K /
    W_V, the intra-layer chain QK^T -> softmax -> shifter-array MV (rows are
    head x token rows), the W_O projection, and the MLP with its own
    inter-layer chain on FC1. Matmul accumulator requantization is folded
    into the producing matmul stage's drain (and its energy is charged
    there); the standalone requant chunk models the LN-output path.
    """
    head_dim = dim // heads
    if weight_bits is None:
        weight_bits = {}

    def wb(layer):
        return weight_bits.get(layer, 8)

    stages = []
    for i in range(layers):
        pre = block_names[i] if block_names else f"block{i}"
        att = dict(group="attention")
        stages += [
            Stage(f"{pre}.ln1", LN, tokens, dim, chain=f"{pre}.att-in", chain_kind="inter", **att),
            Stage(
                f"{pre}.requant1", REQUANT, tokens, dim, chain=f"{pre}.att-in", chain_kind="inter", **att
            ),
            Stage(
                f"{pre}.wq",
                MATMUL,
                tokens,
                dim,
                dim,
                wb(f"{pre}.wq"),
                chain=f"{pre}.att-in",
                chain_kind="inter",
                **att,
            ),
            Stage(f"{pre}.wk", MATMUL, tokens, dim, dim, wb(f"{pre}.wk"), **att),
            Stage(f"{pre}.wv", MATMUL, tokens, dim, dim, wb(f"{pre}.wv"), **att),
            Stage(
                f"{pre}.qkt",
                MATMUL,
                heads * tokens,
                head_dim,
                tokens,
                8,
                chain=f"{pre}.att-core",
                chain_kind="intra",
                **att,
            ),
            Stage(
                f"{pre}.softmax",
                SOFTMAX,
                heads * tokens,
                tokens,
                chain=f"{pre}.att-core",
                chain_kind="intra",
                **att,
            ),
            Stage(
                f"{pre}.mv",
                SHIFT_MATMUL,
                heads * tokens,
                tokens,
                head_dim,
                chain=f"{pre}.att-core",
                chain_kind="intra",
                **att,
            ),
            Stage(f"{pre}.wo", MATMUL, tokens, dim, dim, wb(f"{pre}.wo"), **att),
        ]
        mlp = dict(group="mlp")
        stages += [
            Stage(f"{pre}.ln2", LN, tokens, dim, chain=f"{pre}.mlp-in", chain_kind="inter", **mlp),
            Stage(
                f"{pre}.requant2", REQUANT, tokens, dim, chain=f"{pre}.mlp-in", chain_kind="inter", **mlp
            ),
            Stage(
                f"{pre}.fc1",
                MATMUL,
                tokens,
                dim,
                mlp_dim,
                wb(f"{pre}.fc1"),
                chain=f"{pre}.mlp-in",
                chain_kind="inter",
                **mlp,
            ),
            Stage(f"{pre}.fc2", MATMUL, tokens, mlp_dim, dim, wb(f"{pre}.fc2"), **mlp),
        ]
    return stages


def workload_from_qmodel(qmodel) -> list[Stage]:
    c = qmodel.config
    return build_workload(c.tokens, c.dim, c.heads, c.mlp_dim, c.layers, qmodel.bits)


def deit_tiny_workload(weight_bits=None) -> list[Stage]:
    """DeiT-Tiny benchmark shape: N=197, d=192, 3 heads, MLP 768, 12 blocks."""
    return build_workload(197, 192, 3, 768, 12, weight_bits)


def speedup_ratios(workload: list[Stage], cfg: AcceleratorConfig) -> dict:
    """Sequential / fully-pipelined cycle ratios, per stage group and overall."""
    out = {}
    for group in ("attention", "mlp"):
        sub = [s for s in workload if s.group == group]
        if not sub:
            continue
        seq = simulate_sequential(sub, cfg).total_cycles
        pipe = simulate_pipelined(sub, cfg).total_cycles
        out[group] = seq / pipe
    seq = simulate_sequential(workload, cfg).total_cycles
    pipe = simulate_pipelined(workload, cfg).total_cycles
    out["overall"] = seq / pipe
    return out


# --------------------------------------------------------------------------
# serialization


def save_arch(cfg: AcceleratorConfig, path) -> None:
    Path(path).write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")


def load_arch(path) -> AcceleratorConfig:
    return AcceleratorConfig(**json.loads(Path(path).read_text()))


def save_report_json(report: CostReport, path, extra: dict | None = None) -> None:
    doc = report.to_json()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def save_report_csv(report: CostReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "cycles"])
        for name, cycles in report.stage_cycles.items():
            writer.writerow([name, cycles])
        writer.writerow(["total", report.total_cycles])
