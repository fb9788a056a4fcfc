"""Command-line pipeline: train -> calibrate -> quantize -> search-bits ->
eval -> simulate -> report.

Every artifact embeds the sha256 of the canonical run config so `report` can
refuse to aggregate results produced under different settings. Exit codes:
0 success, 2 config error, 3 oracle-check failure, 4 infeasible search.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import accelsim, mpsearch
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dataset import DatasetConfig, make_dataset
from .fakequant import fake_quant_forward, fakequant_accuracy, int_accuracy
from .intengine import build_quantized_model, int_forward, load_qmodel, save_qmodel
from .mpsearch import InfeasibleBudget, SearchConfig
from .quantizer import QuantConfig, calibrate, load_qparams, save_qparams
from .refmodel import ModelConfig, TrainingDiverged, accuracy, train, weight_layer_names

EXIT_OK, EXIT_CONFIG, EXIT_ORACLE, EXIT_INFEASIBLE = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class OracleError(RuntimeError):
    pass


def canonical_json(obj) -> str:
    """Deterministic serialization: sorted keys, floats at %.10g."""

    def norm(v):
        if isinstance(v, dict):
            return {k: norm(v[k]) for k in sorted(v)}
        if isinstance(v, (list, tuple)):
            return [norm(x) for x in v]
        if isinstance(v, float):
            return float(f"{v:.10g}")
        return v

    return json.dumps(norm(obj), sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


DEFAULT_TRAIN = {"epochs": 30, "lr": 0.05, "batch_size": 32, "momentum": 0.9}


def load_run_config(path, seed_override=None) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {p}: {e}") from e
    cfg = {
        "model": doc.get("model", {}),
        "dataset": doc.get("dataset", {}),
        "quant": doc.get("quant", {}),
        "search": doc.get("search", {}),
        "arch": doc.get("arch", {}),
        "train": {**DEFAULT_TRAIN, **doc.get("train", {})},
        "seed": doc.get("seed", 0),
    }
    if seed_override is not None:
        cfg["seed"] = seed_override
    try:
        cfg["_model"] = ModelConfig(**cfg["model"])
        cfg["_dataset"] = DatasetConfig(**cfg["dataset"])
        cfg["_quant"] = QuantConfig(**cfg["quant"])
        cfg["_search"] = SearchConfig(seed=cfg["seed"], **cfg["search"])
        cfg["_arch"] = accelsim.AcceleratorConfig(**cfg["arch"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad config: {e}") from e
    cfg["_hash"] = config_hash(
        {k: cfg[k] for k in ("model", "dataset", "quant", "search", "arch", "train", "seed")}
    )
    return cfg


def _write_json_with_hash(path, doc: dict, h: str) -> None:
    doc = dict(doc)
    doc["config_hash"] = h
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _embed_hash(path, h: str) -> None:
    doc = json.loads(Path(path).read_text())
    _write_json_with_hash(path, doc, h)


def _read_hash(path) -> str | None:
    p = Path(path)
    if not p.exists():
        return None
    return json.loads(p.read_text()).get("config_hash")


def _require(path, what):
    if not Path(path).exists():
        raise ConfigError(f"missing {what}: {path} (run the earlier pipeline step first)")
    return path


# --------------------------------------------------------------------------
# subcommands


def cmd_train(cfg, out: Path, args) -> int:
    ds = make_dataset(cfg["_dataset"])
    t = cfg["train"]
    model = train(
        cfg["_model"],
        ds,
        epochs=t["epochs"],
        lr=t["lr"],
        seed=cfg["seed"],
        batch_size=t["batch_size"],
        momentum=t["momentum"],
    )
    model.meta["config_hash"] = cfg["_hash"]
    save_checkpoint(model, out / "checkpoint")
    print(f"train: val_acc={model.meta['val_acc']:.4f} -> {out / 'checkpoint'}")
    return EXIT_OK


def cmd_calibrate(cfg, out: Path, args) -> int:
    model = load_checkpoint(_require(out / "checkpoint", "checkpoint"))
    ds = make_dataset(cfg["_dataset"])
    qparams = calibrate(model, ds.calibration(cfg["_quant"].calib_samples), cfg["_quant"])
    save_qparams(qparams, out / "qparams.json")
    _embed_hash(out / "qparams.json", cfg["_hash"])
    print(f"calibrate: {len(qparams.act)} activation specs -> {out / 'qparams.json'}")
    return EXIT_OK


def _load_bits(out: Path, model, qcfg) -> dict:
    names = weight_layer_names(model.config)
    bc_path = out / "bitconfig.json"
    if bc_path.exists():
        bc, layers = mpsearch.load_bitconfig(bc_path)
        return dict(zip(layers, bc.bits))
    return {n: qcfg.weight_bits for n in names}


def cmd_quantize(cfg, out: Path, args) -> int:
    model = load_checkpoint(_require(out / "checkpoint", "checkpoint"))
    qparams = load_qparams(_require(out / "qparams.json", "qparams"))
    bits = _load_bits(out, model, cfg["_quant"])
    qm = build_quantized_model(model, qparams, bits)
    save_qmodel(qm, out / "qmodel")
    _embed_hash(out / "qmodel" / "qmodel.json", cfg["_hash"])
    _embed_hash(out / "qmodel" / "bitconfig.json", cfg["_hash"])
    print(f"quantize: model_size={qm.model_size_mb():.4f} MB -> {out / 'qmodel'}")
    return EXIT_OK


def cmd_search_bits(cfg, out: Path, args) -> int:
    model = load_checkpoint(_require(out / "checkpoint", "checkpoint"))
    qparams = load_qparams(_require(out / "qparams.json", "qparams"))
    ds = make_dataset(cfg["_dataset"])
    scfg = cfg["_search"]
    if args.budget_mb is not None:
        scfg.budget_mb = args.budget_mb
    if scfg.budget_mb <= 0:
        raise ConfigError("search-bits requires --budget-mb or search.budget_mb in the config")
    calib_x = ds.calibration(cfg["_quant"].calib_samples)
    calib_y = ds.train[1][: cfg["_quant"].calib_samples]
    best, history = mpsearch.search_bits(model, qparams, calib_x, calib_y, scfg)
    names = weight_layer_names(model.config)
    mpsearch.save_bitconfig(best, names, out / "bitconfig.json")
    _embed_hash(out / "bitconfig.json", cfg["_hash"])
    mpsearch.save_search_log(history, out / "search_log.csv")
    print(
        f"search-bits: acc={best.accuracy:.4f} size={best.model_size_mb:.4f} MB "
        f"bits={list(best.bits)} -> {out / 'bitconfig.json'}"
    )
    return EXIT_OK


def cmd_eval(cfg, out: Path, args) -> int:
    ds = make_dataset(cfg["_dataset"])
    vx, vy = ds.val
    result = {"engine": args.engine}
    if args.engine == "float":
        model = load_checkpoint(_require(out / "checkpoint", "checkpoint"))
        result["accuracy"] = accuracy(model, vx, vy)
    else:
        qm = load_qmodel(_require(out / "qmodel", "qmodel"))
        fn = fakequant_accuracy if args.engine == "fakequant" else int_accuracy
        result["accuracy"] = fn(qm, vx, vy)
    if args.check:
        qm = load_qmodel(_require(out / "qmodel", "qmodel"))
        n = min(100, len(vx))
        _, ti = int_forward(qm, vx[:n])
        _, tf = fake_quant_forward(qm, vx[:n])
        bad = [k for k in ti if not np.array_equal(ti[k], tf[k])]
        result["oracle_points_checked"] = len(ti)
        result["oracle_mismatches"] = bad
        if bad:
            _write_json_with_hash(out / f"eval_{args.engine}.json", result, cfg["_hash"])
            raise OracleError(f"engine disagreement at points: {bad}")
    _write_json_with_hash(out / f"eval_{args.engine}.json", result, cfg["_hash"])
    print(f"eval[{args.engine}]: accuracy={result['accuracy']:.4f}")
    return EXIT_OK


def _parse_pipeline(value: str) -> tuple[bool, bool]:
    parts = [p for p in value.split(",") if p]
    valid = {"none", "inter", "intra"}
    if not parts or any(p not in valid for p in parts) or ("none" in parts and len(parts) > 1):
        raise ConfigError(f"bad --pipeline value {value!r} (use none|inter|intra|inter,intra)")
    return "inter" in parts, "intra" in parts


def cmd_simulate(cfg, out: Path, args) -> int:
    inter, intra = _parse_pipeline(args.pipeline)
    arch = cfg["_arch"]
    qm = load_qmodel(_require(out / "qmodel", "qmodel"))
    workload = accelsim.workload_from_qmodel(qm)
    if inter or intra:
        report = accelsim.simulate_pipelined(workload, arch, inter=inter, intra=intra)
    else:
        report = accelsim.simulate_sequential(workload, arch)
    oracle = accelsim.event_driven_oracle(workload, arch, inter=inter, intra=intra)
    if oracle.total_cycles != report.total_cycles:
        raise OracleError(
            f"event-driven oracle disagrees: {oracle.total_cycles} vs {report.total_cycles}"
        )
    accelsim.energy(workload, arch, report)
    accelsim.save_arch(arch, out / "arch.json")
    tag = args.pipeline.replace(",", "-")
    doc = report.to_json()
    doc["ratios"] = accelsim.speedup_ratios(workload, arch)
    _write_json_with_hash(out / f"sim_{tag}.json", doc, cfg["_hash"])
    accelsim.save_report_csv(report, out / f"sim_{tag}.csv")
    print(
        f"simulate[{args.pipeline}]: cycles={report.total_cycles} "
        f"latency={report.latency_us:.1f}us energy={report.energy['total']:.3e}"
    )
    return EXIT_OK


def cmd_report(cfg, out: Path, args) -> int:
    rows = {}
    hashes = {}
    for name in ("eval_float", "eval_fakequant", "eval_int"):
        p = out / f"{name}.json"
        if p.exists():
            doc = json.loads(p.read_text())
            rows[name] = doc.get("accuracy")
            hashes[name] = doc.get("config_hash")
    sims = {}
    for p in sorted(out.glob("sim_*.json")):
        doc = json.loads(p.read_text())
        sims[p.stem] = {
            "cycles": doc["total_cycles"],
            "energy": doc["energy"]["total"],
            "latency_us": doc["latency_us"],
        }
        hashes[p.stem] = doc.get("config_hash")
    if not rows and not sims:
        raise ConfigError(f"nothing to report in {out}")
    mismatched = {k: h for k, h in hashes.items() if h != cfg["_hash"]}
    if mismatched:
        raise ConfigError(
            "config hash mismatch (artifacts from a different run config): "
            + ", ".join(sorted(mismatched))
        )
    doc = {"accuracy": rows, "simulation": sims}
    if "sim_none" in sims:
        for k, v in sims.items():
            if k != "sim_none":
                doc.setdefault("speedup_vs_sequential", {})[k] = (
                    sims["sim_none"]["cycles"] / v["cycles"]
                )
    _write_json_with_hash(out / "report.json", doc, cfg["_hash"])
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for k, v in rows.items():
            writer.writerow([k, v])
        for k, v in sims.items():
            writer.writerow([f"{k}_cycles", v["cycles"]])
            writer.writerow([f"{k}_energy", v["energy"]])
    print(f"report: {json.dumps(doc['accuracy'])} -> {out / 'report.json'}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "quantize": cmd_quantize,
    "search-bits": cmd_search_bits,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="potvit",
        description="Power-of-two post-training quantization pipeline and accelerator simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", required=True, help="artifact directory")
        if name == "eval":
            p.add_argument("--engine", choices=("float", "fakequant", "int"), default="int")
            p.add_argument("--check", action="store_true", help="run the cross-engine oracle")
        if name == "simulate":
            p.add_argument("--pipeline", default="none", help="none|inter|intra|inter,intra")
        if name == "search-bits":
            p.add_argument("--budget-mb", type=float, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, seed_override=args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OracleError as e:
        print(f"oracle check failed: {e}", file=sys.stderr)
        return EXIT_ORACLE
    except InfeasibleBudget as e:
        print(f"infeasible search: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
