"""Experiment orchestration: run configs, JSONL results, summary tables,
and parameter sweeps.

One results row per sample, streamed to <out>/results.jsonl in a fixed
order, with the config hash embedded; rerunning an identical config
reproduces the file byte-for-byte apart from the wall-time field, and an
8-worker run produces exactly the serial bytes (the canonical comparison
drops timing, see canonical_results_bytes).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import multiprocessing as mp
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import file_sha256, load_model
from .datasets import load_split
from .engine import (
    METHODS,
    AdaptConfig,
    AdaptOutcome,
    derive_sample_seed,
    offline_ablation,
    run_method,
)
from .losses import LossFlags
from .model import FrozenModel, ModelConfig, PromptState

SCHEMA_VERSION = 1
TIMING_FIELDS = ("wall_time_s",)

DEFAULT_LAMBDA_GRID = [0.5, 1.0, 2.0]
DEFAULT_RHO_GRID = [0.01, 0.05, 0.1, 0.3, 0.5, 0.9]
DEFAULT_VIEW_GRID = [8, 16, 32, 64]

SWEEP_KINDS = ("lambda", "rho", "views", "inner-loss", "outer-loss")


@dataclass
class RunConfig:
    checkpoint: str
    datasets: list[str] = field(default_factory=list)
    method: str = "metatpt"
    out: str = "runs/out"
    workers: int = 1
    seed: int = 0
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    lambda_grid: list[float] = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    rho_grid: list[float] = field(default_factory=lambda: list(DEFAULT_RHO_GRID))
    view_grid: list[int] = field(default_factory=lambda: list(DEFAULT_VIEW_GRID))

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.adapt.seed != self.seed:
            self.adapt = replace(self.adapt, seed=self.seed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["adapt"] = self.adapt.to_dict()
        return d

    def config_hash(self) -> str:
        """Hash of everything that affects results content (out dir and
        worker count deliberately excluded)."""
        d = self.to_dict()
        d.pop("out")
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_bool(v: str) -> bool:
    if v.lower() not in _BOOL_WORDS:
        raise ValueError(f"expected a boolean, got {v!r}")
    return _BOOL_WORDS[v.lower()]


def _parse_floats(v: str) -> list[float]:
    return [float(t) for t in v.split(",") if t.strip()]


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse the `key = value` run-config file (keys documented in
    docs/formats.md), apply CLI overrides, and validate referenced files."""
    text = Path(path).read_text()
    kv: dict[str, str] = {}
    datasets: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "dataset":
            datasets.append(value)
        else:
            kv[key] = value

    adapt_kwargs: dict = {}
    flag_kwargs: dict = {}
    top: dict = {}
    grids: dict = {}
    adapt_fields = {f.name: f for f in dataclasses.fields(AdaptConfig)}
    flag_fields = {f.name: f for f in dataclasses.fields(LossFlags)}
    # seed comes from the top-level key; flags from loss.*; the sampler
    # ranges stay at their fixed defaults
    not_file_keys = ("flags", "seed", "gamma_range", "scale_range", "ratio_range")
    for key, value in kv.items():
        if key.startswith("adapt."):
            name = key[len("adapt.") :]
            if name not in adapt_fields or name in not_file_keys:
                raise ValueError(f"unknown config key {key!r}")
            adapt_kwargs[name] = _coerce(value, adapt_fields[name].type)
        elif key.startswith("loss."):
            name = key[len("loss.") :]
            if name not in flag_fields:
                raise ValueError(f"unknown config key {key!r}")
            flag_kwargs[name] = _coerce(value, flag_fields[name].type)
        elif key == "sweep.lambda":
            grids["lambda_grid"] = _parse_floats(value)
        elif key == "sweep.rho":
            grids["rho_grid"] = _parse_floats(value)
        elif key == "sweep.views":
            grids["view_grid"] = [int(t) for t in value.split(",") if t.strip()]
        elif key in ("checkpoint", "method", "out"):
            top[key] = value
        elif key == "seed":
            top["seed"] = int(value)
        elif key == "workers":
            top["workers"] = int(value)
        else:
            raise ValueError(f"unknown config key {key!r}")

    overrides = overrides or {}
    for k in ("checkpoint", "method", "out", "seed", "workers"):
        if overrides.get(k) is not None:
            top[k] = overrides[k]
    if overrides.get("datasets"):
        datasets = list(overrides["datasets"])
    if "checkpoint" not in top:
        raise ValueError("config is missing 'checkpoint'")
    if not datasets:
        raise ValueError("config needs at least one 'dataset' line")

    flags = LossFlags(**flag_kwargs)
    adapt = AdaptConfig(flags=flags, seed=int(top.get("seed", 0)), **adapt_kwargs)
    cfg = RunConfig(
        checkpoint=top["checkpoint"],
        datasets=datasets,
        method=top.get("method", "metatpt"),
        out=top.get("out", "runs/out"),
        workers=int(top.get("workers", 1)),
        seed=int(top.get("seed", 0)),
        adapt=adapt,
        **grids,
    )
    missing = [p for p in [cfg.checkpoint, *cfg.datasets] if not Path(p).exists()]
    if missing:
        raise FileNotFoundError(f"config references missing files: {missing}")
    return cfg


def _coerce(value: str, ftype) -> object:
    ftype = str(ftype)
    if "bool" in ftype:
        return _parse_bool(value)
    if "int" in ftype:
        return int(value)
    if "float" in ftype:
        return float(value)
    return value


def outcome_row(
    outcome: AdaptOutcome, index: int, domain: str, true_label: int, cfg_hash: str
) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "index": index,
        "domain": domain,
        "method": outcome.method,
        "true_label": int(true_label),
        "zero_shot_label": outcome.zero_shot_label,
        "adapted_label": outcome.adapted_label,
        "zero_shot_correct": bool(outcome.zero_shot_label == true_label),
        "adapted_correct": bool(outcome.adapted_label == true_label),
        "inner_losses": [float(v) for v in outcome.inner_losses],
        "outer_losses": [float(v) for v in outcome.outer_losses],
        "inner_loss_final": outcome.inner_loss_final,
        "entropy_before": outcome.entropy_before,
        "entropy_after": outcome.entropy_after,
        "selected_entropy_before": outcome.selected_entropy_before,
        "selected_entropy_after": outcome.selected_entropy_after,
        "counters": outcome.counters,
        "degenerate": outcome.degenerate,
        "degenerate_step": outcome.degenerate_step,
        "seed": outcome.seed,
        "config_hash": cfg_hash,
        "wall_time_s": outcome.wall_time_s,
    }


_CTX: dict | None = None


def _init_worker(payload: dict) -> None:
    global _CTX
    frozen = FrozenModel(ModelConfig(**payload["model_cfg"]), payload["weights"])
    _CTX = {
        "frozen": frozen,
        "theta0": PromptState(payload["theta_txt"], payload["theta_vis"]),
        "adapt": payload["adapt"],
        "method": payload["method"],
        "images": payload["images"],
    }


def _run_task(task: tuple[int, int]) -> tuple[int, int, AdaptOutcome]:
    domain_i, index = task
    ctx = _CTX
    x = ctx["images"][domain_i][index]
    seed = derive_sample_seed(ctx["adapt"].seed, index)
    outcome = run_method(ctx["method"], x, ctx["theta0"], ctx["frozen"], ctx["adapt"], seed)
    return domain_i, index, outcome


def run_experiment(cfg: RunConfig) -> Path:
    """Run one method over the configured datasets; write results + manifest."""
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    frozen, theta0, ckpt_meta = load_model(cfg.checkpoint)
    splits = [load_split(p) for p in cfg.datasets]
    cfg_hash = cfg.config_hash()

    rows: list[dict] = []
    if cfg.method == "offline":
        for split in splits:
            seeds = [derive_sample_seed(cfg.seed, i) for i in range(len(split.images))]
            outcomes = offline_ablation(split.images, theta0, frozen, cfg.adapt, seeds)
            for i, outcome in enumerate(outcomes):
                rows.append(outcome_row(outcome, i, split.domain, int(split.labels[i]), cfg_hash))
    else:
        payload = {
            "model_cfg": frozen.cfg.to_dict(),
            "weights": frozen.named_tensors(),
            "theta_txt": theta0.theta_txt,
            "theta_vis": theta0.theta_vis,
            "adapt": cfg.adapt,
            "method": cfg.method,
            "images": [split.images for split in splits],
        }
        tasks = [(di, i) for di, split in enumerate(splits) for i in range(len(split.images))]
        results: dict[tuple[int, int], AdaptOutcome] = {}
        if cfg.workers > 1:
            with mp.Pool(cfg.workers, initializer=_init_worker, initargs=(payload,)) as pool:
                for domain_i, index, outcome in pool.imap_unordered(_run_task, tasks, chunksize=4):
                    results[(domain_i, index)] = outcome
        else:
            _init_worker(payload)
            for task in tasks:
                domain_i, index, outcome = _run_task(task)
                results[(domain_i, index)] = outcome
        for di, split in enumerate(splits):
            for i in range(len(split.images)):
                outcome = results[(di, i)]
                rows.append(outcome_row(outcome, i, split.domain, int(split.labels[i]), cfg_hash))

    results_path = out_dir / "results.jsonl"
    with open(results_path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")

    manifest = {
        "schema": SCHEMA_VERSION,
        "package_version": __version__,
        "config": cfg.to_dict(),
        "config_hash": cfg_hash,
        "checkpoint_sha256": file_sha256(cfg.checkpoint),
        "checkpoint_meta": {
            k: ckpt_meta.get(k) for k in ("seed", "config_hash", "holdout_accuracy")
        },
        "domains": {split.domain: int(len(split.images)) for split in splits},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return results_path


def canonical_results_bytes(path) -> bytes:
    """results.jsonl with the timing fields dropped: the determinism canon."""
    lines = []
    for line in Path(path).read_text().splitlines():
        row = json.loads(line)
        for k in TIMING_FIELDS:
            row.pop(k, None)
        lines.append(json.dumps(row, sort_keys=True, separators=(",", ":")))
    return ("\n".join(lines) + "\n").encode()


def read_rows(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        row = json.loads(line)
        if row.get("schema") != SCHEMA_VERSION:
            raise ValueError(
                f"{path}: schema version {row.get('schema')} != {SCHEMA_VERSION}"
            )
        rows.append(row)
    return rows


_METHOD_ORDER = {m: i for i, m in enumerate(METHODS)}


def summarize(paths, csv_path=None) -> tuple[str, str]:
    """Accuracy per (method, domain) with a trailing per-method average and
    deltas against the zero_shot rows when present.

    Returns (text table, CSV text); both are bit-stable given the inputs.
    """
    rows = []
    for p in paths:
        rows.extend(read_rows(p))
    if not rows:
        raise ValueError("no result rows to summarize")

    domains: list[str] = []
    methods: list[str] = []
    bucket: dict[tuple[str, str], list[bool]] = {}
    for row in rows:
        d, m = row["domain"], row["method"]
        if d not in domains:
            domains.append(d)
        if m not in methods:
            methods.append(m)
        bucket.setdefault((m, d), []).append(bool(row["adapted_correct"]))
    methods.sort(key=lambda m: (_METHOD_ORDER.get(m, len(_METHOD_ORDER)), m))

    acc: dict[tuple[str, str], float] = {}
    avg: dict[str, float] = {}
    for m in methods:
        vals = []
        for d in domains:
            if (m, d) in bucket:
                a = 100.0 * float(np.mean(bucket[(m, d)]))
                acc[(m, d)] = a
                vals.append(a)
        avg[m] = float(np.mean(vals)) if vals else float("nan")

    has_zero = "zero_shot" in methods

    def fmt(v: float | None) -> str:
        return "" if v is None else f"{v:.2f}"

    header = ["method"] + domains + ["average"]
    if has_zero:
        header += [f"{d}_delta" for d in domains] + ["average_delta"]
    csv_lines = [",".join(header)]
    for m in methods:
        cells = [m] + [fmt(acc.get((m, d))) for d in domains] + [fmt(avg[m])]
        if has_zero:
            for d in domains:
                both = (m, d) in acc and ("zero_shot", d) in acc
                cells.append(fmt(acc[(m, d)] - acc[("zero_shot", d)]) if both else "")
            cells.append(fmt(avg[m] - avg["zero_shot"]))
        csv_lines.append(",".join(cells))
    csv_text = "\n".join(csv_lines) + "\n"

    width = max(12, max(len(m) for m in methods) + 2)
    cols = domains + ["average"]
    text_lines = ["".join([f"{'method':<{width}}"] + [f"{c:>12}" for c in cols])]
    for m in methods:
        cells = [f"{m:<{width}}"]
        for d in domains:
            cells.append(f"{fmt(acc.get((m, d))):>12}")
        cells.append(f"{fmt(avg[m]):>12}")
        text_lines.append("".join(cells))
    if has_zero:
        text_lines.append("")
        text_lines.append("delta vs zero_shot (accuracy points):")
        for m in methods:
            if m == "zero_shot":
                continue
            cells = [f"{m:<{width}}"]
            for d in domains:
                both = (m, d) in acc and ("zero_shot", d) in acc
                cells.append(f"{fmt(acc[(m, d)] - acc[('zero_shot', d)]) if both else '':>12}")
            cells.append(f"{fmt(avg[m] - avg['zero_shot']):>12}")
            text_lines.append("".join(cells))
    text = "\n".join(text_lines) + "\n"

    if csv_path is not None:
        Path(csv_path).write_text(csv_text)
    return text, csv_text


def _accuracy_by_domain(results_path) -> dict[str, float]:
    per: dict[str, list[bool]] = {}
    for row in read_rows(results_path):
        per.setdefault(row["domain"], []).append(bool(row["adapted_correct"]))
    return {d: 100.0 * float(np.mean(v)) for d, v in per.items()}


def sweep(cfg: RunConfig, kind: str, out_dir=None) -> Path:
    """Run one experiment per grid point (shared data and seeds); emit a
    long-form CSV (grid point columns, domain, accuracy)."""
    if kind not in SWEEP_KINDS:
        raise ValueError(f"sweep kind must be one of {SWEEP_KINDS}, got {kind!r}")
    out_root = Path(out_dir if out_dir is not None else cfg.out)
    out_root.mkdir(parents=True, exist_ok=True)

    if kind == "lambda":
        points = [
            ({"lambda_k": lk, "lambda_v": lv}, f"lk{lk}_lv{lv}", [("lambda_k", lk), ("lambda_v", lv)])
            for lk in cfg.lambda_grid
            for lv in cfg.lambda_grid
        ]
    elif kind == "rho":
        points = [({"rho": r}, f"rho{r}", [("rho", r)]) for r in cfg.rho_grid]
    elif kind == "views":
        points = [({"n_views": n}, f"views{n}", [("n_views", n)]) for n in cfg.view_grid]
    elif kind == "inner-loss":
        points = [
            (
                {"flags": replace(cfg.adapt.flags, inner_entropy=h, inner_dis=d)},
                f"inH{int(h)}_inD{int(d)}",
                [("inner_entropy", int(h)), ("inner_dis", int(d))],
            )
            for h, d in ((False, False), (True, False), (False, True), (True, True))
        ]
    else:  # outer-loss
        points = [
            (
                {"flags": replace(cfg.adapt.flags, outer_ce=c, outer_dis=d)},
                f"outCE{int(c)}_outD{int(d)}",
                [("outer_ce", int(c)), ("outer_dis", int(d))],
            )
            for c, d in ((False, False), (True, False), (False, True), (True, True))
        ]

    param_names = [name for name, _ in points[0][2]]
    lines = [",".join(param_names + ["domain", "accuracy"])]
    for adapt_over, label, named in points:
        sub = replace(cfg, adapt=replace(cfg.adapt, **adapt_over), out=str(out_root / label))
        results = run_experiment(sub)
        for domain, accuracy in _accuracy_by_domain(results).items():
            values = [str(v) for _, v in named]
            lines.append(",".join(values + [domain, f"{accuracy:.2f}"]))
    csv_path = out_root / f"sweep_{kind}.csv"
    csv_path.write_text("\n".join(lines) + "\n")
    return csv_path
