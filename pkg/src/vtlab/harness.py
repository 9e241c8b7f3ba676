"""Resumable experiment matrix over models x label fractions x ablations."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import data as vd
from .errors import ConfigError, ReportError
from .models import ModelConfig, build_model
from .presets import get_preset
from .training import TrainConfig, train, evaluate, pretrain_and_inflate

ABLATIONS = ("baseline", "no_shift", "no_relpos", "pretrain")


def apply_ablation(config: ModelConfig, ablation: str) -> ModelConfig:
    if ablation in ("baseline", "pretrain"):
        return config
    if ablation == "no_shift":
        return replace(config, use_shifted_window=False)
    if ablation == "no_relpos":
        return replace(config, use_relpos_bias=False)
    raise ConfigError(f"unknown ablation {ablation!r}; known: {', '.join(ABLATIONS)}")


@dataclass(frozen=True)
class Cell:
    """One experiment-matrix entry: a model trained on one labeled subset."""

    preset: str
    fraction: float
    ablation: str
    seed: int

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}")


@dataclass
class MatrixConfig:
    presets: tuple
    fractions: tuple
    ablations: tuple = ("baseline",)
    seeds: tuple = (0, 1, 2)
    task: str = "spatial"
    train_size: int = 1000
    test_size: int = 300
    data_seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=40, batch_size=10, lr=5e-4))

    def cells(self):
        return [Cell(p, f, a, s) for p in self.presets for f in self.fractions
                for a in self.ablations for s in self.seeds]


def cell_hash(cell: Cell, matrix: MatrixConfig, dataset_hash: str) -> str:
    config = apply_ablation(get_preset(cell.preset).config, cell.ablation)
    payload = json.dumps({
        "config": config.to_dict(),
        "fraction": cell.fraction,
        "ablation": cell.ablation,
        "seed": cell.seed,
        "train": asdict(matrix.train),
        "dataset": dataset_hash,
    }, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _gen(task: str, n: int, seed: int) -> vd.VideoDataset:
    if task == "spatial":
        return vd.gen_spatial_task(n, seed=seed)
    if task == "temporal":
        return vd.gen_temporal_task(n, seed=seed)
    raise ConfigError(f"unknown task {task!r}")


def run_cell(cell: Cell, matrix: MatrixConfig, pool: vd.VideoDataset,
             test: vd.VideoDataset) -> dict:
    base = get_preset(cell.preset).config
    if base.num_classes != pool.num_classes:
        base = replace(base, num_classes=pool.num_classes)
    config = apply_ablation(base, cell.ablation)
    idx = vd.sample_split(pool.labels, cell.fraction, seed=cell.seed)
    tcfg = replace(matrix.train, seed=cell.seed)
    if cell.ablation == "pretrain":
        model = pretrain_and_inflate(config, seed=cell.seed)
    else:
        model = build_model(config, seed=cell.seed)
    train(model, pool, idx, tcfg)
    metrics = evaluate(model, test, topk=(1, 5),
                       batch_size=matrix.train.eval_batch_size)
    from .models import count_params, count_flops
    return {
        "top1": metrics["top1"], "top5": metrics["top5"],
        "n_train": int(len(idx)),
        "params": count_params(config).total,
        "macs": count_flops(config).total_macs,
    }


def run_matrix(matrix: MatrixConfig, ledger_path, threads: int | None = None) -> list:
    """Run every cell, appending one JSON line per finished cell.

    Cells whose hash already appears in the ledger are skipped, so an
    interrupted run resumes where it stopped. Failures are recorded and do
    not abort the rest of the matrix.
    """
    pool = _gen(matrix.task, matrix.train_size, matrix.data_seed)
    test = _gen(matrix.task, matrix.test_size, matrix.data_seed + 1)
    ds_hash = pool.data_hash() + test.data_hash()

    done = {}
    if os.path.exists(ledger_path):
        for rec in read_ledger(ledger_path):
            done[rec["hash"]] = rec

    todo = []
    records = []
    for cell in matrix.cells():
        h = cell_hash(cell, matrix, ds_hash)
        if h in done:
            records.append(done[h])
        else:
            todo.append((cell, h))

    threads = threads or int(os.environ.get("VTLAB_THREADS", "1"))

    def work(item):
        cell, h = item
        rec = {"hash": h, "dataset": ds_hash[:16], **asdict(cell), "status": "ok"}
        try:
            rec.update(run_cell(cell, matrix, pool, test))
        except Exception as e:
            rec["status"] = "failed"
            rec["error"] = f"{type(e).__name__}: {e}"
            rec["traceback"] = traceback.format_exc(limit=5)
        return rec

    if threads > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            new = list(ex.map(work, todo))
    else:
        new = [work(item) for item in todo]

    with open(ledger_path, "a") as f:
        for rec in new:
            f.write(json.dumps(rec) + "\n")
    return records + new


def read_ledger(path) -> list:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


# ---------------------------------------------------------------------------
# reporting


def summarize(records: list) -> dict:
    """Group records by (preset, fraction, ablation); mean/std over seeds."""
    ok = [r for r in records if r.get("status") == "ok"]
    groups = {}
    for r in ok:
        groups.setdefault((r["preset"], r["fraction"], r["ablation"]), []).append(r)
    summary = []
    for (preset, frac, abl), rs in sorted(groups.items()):
        t1 = np.array([r["top1"] for r in rs])
        t5 = np.array([r["top5"] for r in rs])
        summary.append({
            "preset": preset, "fraction": frac, "ablation": abl,
            "seeds": len(rs),
            "top1_mean": float(t1.mean()), "top1_std": float(t1.std()),
            "top5_mean": float(t5.mean()), "top5_std": float(t5.std()),
            "params": rs[0]["params"], "macs": rs[0]["macs"],
        })
    failed = [r for r in records if r.get("status") != "ok"]
    return {"groups": summary, "n_ok": len(ok), "n_failed": len(failed),
            "failed": [{k: r[k] for k in ("preset", "fraction", "ablation", "seed", "error")}
                       for r in failed]}


def write_report(records: list, out_dir) -> dict:
    """CSV of per-run rows, JSON summary, and an accuracy-vs-fraction figure."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    ok = [r for r in records if r.get("status") == "ok"]
    if not ok:
        raise ReportError("no successful runs to report")
    datasets = {r.get("dataset") for r in ok}
    if len(datasets) > 1:
        raise ReportError(f"records span {len(datasets)} different datasets; "
                          "refusing to aggregate mixed results")

    csv_path = os.path.join(out_dir, "runs.csv")
    cols = ["preset", "fraction", "ablation", "seed", "top1", "top5",
            "n_train", "params", "macs"]
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in sorted(ok, key=lambda r: (r["preset"], r["fraction"], r["ablation"], r["seed"])):
            w.writerow({c: r[c] for c in cols})

    summary = summarize(records)
    json_path = os.path.join(out_dir, "summary.json")
    with open(json_path, "w") as f:
        json.dump(summary, f, indent=2)

    fig_path = os.path.join(out_dir, "accuracy_vs_fraction.png")
    fig, ax = plt.subplots(figsize=(7, 5))
    series = {}
    for g in summary["groups"]:
        series.setdefault((g["preset"], g["ablation"]), []).append(g)
    for (preset, abl), gs in sorted(series.items()):
        gs = sorted(gs, key=lambda g: g["fraction"])
        x = [g["fraction"] * 100 for g in gs]
        y = [g["top1_mean"] * 100 for g in gs]
        err = [g["top1_std"] * 100 for g in gs]
        label = preset if abl == "baseline" else f"{preset} ({abl})"
        ax.errorbar(x, y, yerr=err, marker="o", capsize=3, label=label)
    ax.set_xlabel("labeled fraction (%)")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.set_xscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)
    return {"csv": csv_path, "summary": json_path, "figure": fig_path}
