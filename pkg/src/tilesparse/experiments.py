"""End-to-end experiment runners and report emission.

Every runner takes an :class:`ExperimentConfig`, writes its reports under
``cfg.out_dir`` (atomically) and returns an :class:`ExperimentResult`.  Reports
are deterministic given the config, except the ``wall_seconds`` column.
"""
from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .attention import HeadTensors, count_flops
from .config import ExperimentConfig
from .estimator import checkpoint
from .estimator.model import EstimatorParams
from .estimator.predict import predict_mask
from .estimator.train import TrainConfig, build_supervision, final_loss, train
from .errors import ConfigError
from .fileutil import atomic_write_bytes, atomic_write_text
from .metrics import OutputErrorProbe, mask_confusion, tile_recall
from .oracle import random_topk_mask, row_normalize, target_scores_dense, topk_mask
from .rng import derive_seed
from .search import search_tiling
from .synth import (
    HeadPatternSpec,
    generate_calibration,
    generate_head,
    load_spec_file,
    standard_suite,
    structured_suite,
)
from .tensorio import read_tensor, write_tensor
from .tiling import TileLayout, build_layout

# evaluation samples live far away from calibration sample indices
EVAL_SAMPLE_BASE = 1 << 20
FAMILIES = ("oracle", "estimator", "random")


@dataclass
class ReportRow:
    experiment: str
    seed: int
    head_id: str
    kind: str
    sample: int
    config: str
    family: str
    sparsity: float
    k: int
    recall: float | None
    frob_err: float | None
    flops_ratio: float | None
    loss: float | None
    wall_seconds: float

    def __post_init__(self):
        for f in ("sparsity", "recall", "frob_err", "flops_ratio", "loss", "wall_seconds"):
            v = getattr(self, f)
            if v is not None and not np.isfinite(v):
                raise ValueError(f"report field {f} is not finite: {v}")


COLUMNS = [f.name for f in fields(ReportRow)]
CONFUSION_COLUMNS = ["head_id", "sparsity", "recall", "tp", "fp", "fn", "frob_err"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        get = r.get if isinstance(r, dict) else (lambda c, r=r: getattr(r, c))
        w.writerow([_fmt(get(c)) for c in columns])
    return buf.getvalue()


def read_report(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@dataclass
class ExperimentResult:
    rows: list[ReportRow] = field(default_factory=list)
    files: dict[str, str] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EvalInstance:
    seed: int
    head: int
    head_id: str
    kind: str
    sample: int
    tensors: HeadTensors


def suite_specs(cfg: ExperimentConfig, seed: int) -> list[HeadPatternSpec]:
    if cfg.heads_file:
        return load_spec_file(cfg.heads_file)
    make = standard_suite if cfg.suite == "standard" else structured_suite
    return make(seed, cfg.latent, cfg.d)


def _write(cfg: ExperimentConfig, res: ExperimentResult, name: str, text: str):
    path = os.path.join(cfg.out_dir, name)
    atomic_write_text(path, text)
    res.files[name] = path


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def eval_instances(cfg: ExperimentConfig):
    """Held-out heads: ``cfg.samples`` per suite head and seed, or the tensors saved by ``gen``."""
    if cfg.inputs:
        yield from load_generated(cfg.inputs)
        return
    for seed in cfg.seeds:
        for j, spec in enumerate(suite_specs(cfg, seed)):
            for i in range(cfg.samples):
                s = EVAL_SAMPLE_BASE + i
                yield EvalInstance(seed, j, f"h{j}", spec.kind, s, generate_head(spec, s))


# ---------------------------------------------------------------- gen


def run_gen(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult()
    entries = []
    for inst in eval_instances(cfg.__class__.from_dict({**cfg.to_dict(), "inputs": None})):
        stem = f"seed{inst.seed}_{inst.head_id}_s{inst.sample}"
        paths = {}
        for name in ("q", "k", "v"):
            rel = os.path.join("tensors", f"{stem}_{name}.vten")
            write_tensor(os.path.join(cfg.out_dir, rel), getattr(inst.tensors, name))
            paths[name] = rel
        entries.append({"seed": inst.seed, "head": inst.head, "head_id": inst.head_id,
                        "kind": inst.kind, "sample": inst.sample, **paths})
    manifest = {"shape": list(cfg.shape), "d": cfg.d, "entries": entries}
    _write(cfg, res, "manifest.json", _json(manifest))
    for seed in cfg.seeds:
        specs = suite_specs(cfg, seed)
        _write(cfg, res, f"heads_seed{seed}.json", _json([s.to_dict() for s in specs]))
    res.summary = {"tensors": len(entries)}
    return res


def load_generated(directory) -> list[EvalInstance]:
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise ConfigError(f"{directory} has no manifest.json (run 'gen' first)")
    with open(path) as f:
        manifest = json.load(f)
    out = []
    for e in manifest["entries"]:
        q, k, v = (read_tensor(os.path.join(directory, e[n])) for n in ("q", "k", "v"))
        out.append(EvalInstance(e["seed"], e["head"], e["head_id"], e["kind"], e["sample"], HeadTensors(q, k, v)))
    return out


# ---------------------------------------------------------------- oracle / eval


def _load_checkpoints(cfg: ExperimentConfig) -> dict[int, EstimatorParams]:
    """Estimator per seed: a single file serves every seed, a directory holds ``estimator_<mode>_seed<s>.veda``."""
    if not cfg.checkpoint:
        return {}
    if os.path.isdir(cfg.checkpoint):
        mode = cfg.pool_modes[0]
        return {s: checkpoint.load(os.path.join(cfg.checkpoint, f"estimator_{mode}_seed{s}.veda")) for s in cfg.seeds}
    params = checkpoint.load(cfg.checkpoint)
    return {s: params for s in cfg.seeds}


def evaluate_masks(inst: EvalInstance, layout: TileLayout, budgets, families, params=None, experiment="oracle"):
    """Report rows and confusion rows for each budget and mask family on one head."""
    h = inst.tensors
    target = row_normalize(target_scores_dense(h, layout))
    probe = OutputErrorProbe(h)
    rows, conf = [], []
    for sparsity, k in budgets:
        ref = topk_mask(target, k)
        flops = float(count_flops(h.n, h.d, layout.n_tiles, k).ratio)
        for fam in families:
            t0 = time.perf_counter()
            if fam == "oracle":
                mask = ref
            elif fam == "random":
                mask = random_topk_mask(layout.n_tiles, k, derive_seed(inst.seed, 0xA0, inst.head, inst.sample, k))
            elif fam == "estimator":
                if params is None:
                    continue
                mask = predict_mask(params, h, layout, k, head=inst.head)
            else:
                raise ConfigError(f"unknown mask family {fam!r}")
            err = probe.error(mask, layout)
            recall = tile_recall(mask, ref)
            wall = time.perf_counter() - t0
            rows.append(ReportRow(experiment, inst.seed, inst.head_id, inst.kind, inst.sample, str(layout.config),
                                  fam, float(sparsity), k, recall, err, flops, None, wall))
            cm = mask_confusion(mask, ref)
            tp, fp, fn = cm.totals
            conf.append({"head_id": f"seed{inst.seed}/{inst.head_id}/s{inst.sample}/{fam}", "sparsity": float(sparsity),
                         "recall": recall, "tp": tp, "fp": fp, "fn": fn, "frob_err": err})
    return rows, conf


def run_oracle_experiment(cfg: ExperimentConfig, families=FAMILIES, experiment="oracle") -> ExperimentResult:
    res = ExperimentResult()
    layout = build_layout(cfg.latent, cfg.layout_config)
    params = _load_checkpoints(cfg)
    conf = []
    for inst in eval_instances(cfg):
        r, c = evaluate_masks(inst, layout, cfg.budgets(), families, params.get(inst.seed), experiment)
        res.rows.extend(r)
        conf.extend(c)
    _write(cfg, res, f"{experiment}_report.csv", rows_to_csv(res.rows, COLUMNS))
    _write(cfg, res, f"{experiment}_confusion.csv", rows_to_csv(conf, CONFUSION_COLUMNS))
    return res


def run_eval_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    if not cfg.checkpoint:
        raise ConfigError("eval needs a 'checkpoint'")
    return run_oracle_experiment(cfg, families=("estimator",), experiment="eval")


# ---------------------------------------------------------------- distill


def calibration_stream(specs, layout: TileLayout, count: int):
    """``(tensors, layout, head)`` for ``count`` calibration samples of every spec."""
    for j, spec in enumerate(specs):
        for i in range(count):
            yield generate_head(spec, i), layout, j


def run_distill_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult()
    est = cfg.estimator
    layout = build_layout(cfg.latent, cfg.layout_config)
    curves = []
    final = {m: {} for m in cfg.pool_modes}
    n_cal = max(cfg.samples, est.steps * (est.batch_size or 0)) if est.batch_size else cfg.samples
    for seed in cfg.seeds:
        specs = suite_specs(cfg, seed)
        records = build_supervision(calibration_stream(specs, layout, n_cal), est.query_fraction, seed)
        for mode in cfg.pool_modes:
            tc = TrainConfig(mode=mode, steps=est.steps, lr=est.lr, d_hidden=est.d_hidden, d_latent=est.d_latent,
                             query_fraction=est.query_fraction, batch_size=est.batch_size, seed=seed)
            t0 = time.perf_counter()
            params, hist = train(records, tc)
            wall = time.perf_counter() - t0
            name = f"estimator_{mode}_seed{seed}.veda"
            path = os.path.join(cfg.out_dir, name)
            atomic_write_bytes(path, checkpoint.dumps(params))
            res.files[name] = path
            curves.extend({"seed": seed, "mode": mode, "step": s, "loss": float(l)} for s, l in enumerate(hist))
            loss = final_loss(hist, est.loss_window)
            final[mode][seed] = loss
            res.rows.append(ReportRow("distill", seed, "all", "suite", -1, str(layout.config), f"estimator:{mode}",
                                      0.0, layout.n_tiles, None, None, None, loss, wall))
            for j, spec in enumerate(specs):
                for i in range(cfg.samples):
                    s = EVAL_SAMPLE_BASE + i
                    inst = EvalInstance(seed, j, f"h{j}", spec.kind, s, generate_head(spec, s))
                    rows, _ = evaluate_masks(inst, layout, cfg.budgets(), ("estimator",), params, "distill")
                    for r in rows:
                        r.family = f"estimator:{mode}"
                        r.loss = loss
                    res.rows.extend(rows)
    _write(cfg, res, "distill_report.csv", rows_to_csv(res.rows, COLUMNS))
    _write(cfg, res, "loss_curves.csv", rows_to_csv(curves, ["seed", "mode", "step", "loss"]))
    means = {m: float(np.mean(list(v.values()))) for m, v in final.items()}
    res.summary = {
        "final_loss": {m: {str(s): v for s, v in final[m].items()} for m in final},
        "mean_final_loss": means,
        "ordering": sorted(means, key=means.get),
    }
    _write(cfg, res, "distill_summary.json", _json(res.summary))
    return res


# ---------------------------------------------------------------- search


def run_search_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult()
    results = []
    for seed in cfg.seeds:
        specs = suite_specs(cfg, seed)
        cal = generate_calibration(specs, cfg.samples)
        kinds = {f"h{j}": s.kind for j, s in enumerate(specs)}
        for sparsity, k in cfg.budgets():
            for head_id, r in search_tiling(cal, cfg.b, k).items():
                entry = r.to_json()
                entry.update(seed=seed, kind=kinds[head_id], sparsity=float(sparsity), k=k)
                results.append(entry)
                for c, v in r.error_table.items():
                    res.rows.append(ReportRow("search", seed, head_id, kinds[head_id], -1, str(c),
                                              "oracle", float(sparsity), k, None, float(np.sqrt(v)), None, None, 0.0))
    res.summary = {"b": cfg.b, "shape": list(cfg.shape), "results": results}
    _write(cfg, res, "search.json", _json(res.summary))
    _write(cfg, res, "search_report.csv", rows_to_csv(res.rows, COLUMNS))
    return res


SEARCH_SCHEMA = {
    "b": int,
    "shape": list,
    "results": [{"seed": int, "head_id": str, "kind": str, "sparsity": float, "k": int,
                 "best": {"pt": int, "ph": int, "pw": int},
                 "ties": [{"pt": int, "ph": int, "pw": int}],
                 "errors": [{"config": {"pt": int, "ph": int, "pw": int}, "value": float}]}],
}


def validate_schema(obj, schema=SEARCH_SCHEMA, path="$"):
    """Minimal structural check of ``obj`` against a nested type template."""
    if isinstance(schema, dict):
        if not isinstance(obj, dict):
            raise ValueError(f"{path}: expected object")
        missing = set(schema) - set(obj)
        if missing:
            raise ValueError(f"{path}: missing keys {sorted(missing)}")
        for key, sub in schema.items():
            validate_schema(obj[key], sub, f"{path}.{key}")
    elif isinstance(schema, list):
        if not isinstance(obj, list):
            raise ValueError(f"{path}: expected array")
        for i, item in enumerate(obj):
            validate_schema(item, schema[0], f"{path}[{i}]")
    elif schema is float:
        if not isinstance(obj, (int, float)) or isinstance(obj, bool):
            raise ValueError(f"{path}: expected number")
    elif not isinstance(obj, schema) or isinstance(obj, bool):
        raise ValueError(f"{path}: expected {schema.__name__}")


RUNNERS = {
    "gen": run_gen,
    "oracle": run_oracle_experiment,
    "distill": run_distill_experiment,
    "search": run_search_experiment,
    "eval": run_eval_experiment,
}


def run(cfg: ExperimentConfig) -> ExperimentResult:
    res = RUNNERS[cfg.experiment](cfg)
    _write(cfg, res, f"{cfg.experiment}_config.json", cfg.to_json())
    return res
