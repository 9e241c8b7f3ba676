"""Shared experiment protocol for the acceptance suite.

The matrices below define every training cell the acceptance tests consume.
Results accumulate in results/acceptance.jsonl at the repository root; the
harness resumes finished cells by hash, so re-running the suite only trains
cells that are missing.
"""

import os

from vtlab.harness import MatrixConfig, run_matrix
from vtlab.training import TrainConfig

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
LEDGER = os.path.join(REPO_ROOT, "results", "acceptance.jsonl")

SEEDS = (0, 1, 2)

# low-label spatial cells: transfer and shift ablations at 1% labels
SPATIAL_1PCT = MatrixConfig(
    presets=("toy_vst",), fractions=(0.01,),
    ablations=("baseline", "no_shift", "pretrain"), seeds=SEEDS,
    task="spatial", train_size=1000, test_size=400, data_seed=0,
    train=TrainConfig(epochs=60, batch_size=10, lr=5e-4))

# 5% spatial cells: shift ablation sanity bound plus the LLGG comparison
SPATIAL_5PCT = MatrixConfig(
    presets=("toy_vst",), fractions=(0.05,),
    ablations=("baseline", "no_shift"), seeds=SEEDS,
    task="spatial", train_size=1000, test_size=400, data_seed=0,
    train=TrainConfig(epochs=40, batch_size=10, lr=5e-4))

SPATIAL_5PCT_LLGG = MatrixConfig(
    presets=("toy_vst_llgg",), fractions=(0.05,),
    ablations=("baseline",), seeds=SEEDS,
    task="spatial", train_size=1000, test_size=400, data_seed=0,
    train=TrainConfig(epochs=40, batch_size=10, lr=5e-4))

# temporal cells: local-then-global vs joint global attention at 10% labels.
# the temporal task needs ~100 labeled clips and a long schedule before either
# model rises above chance, so this matrix dominates the fresh-run budget
TEMPORAL_10PCT = MatrixConfig(
    presets=("toy_uniformer", "toy_vivit_st"), fractions=(0.10,),
    ablations=("baseline",), seeds=SEEDS,
    task="temporal", train_size=1000, test_size=300, data_seed=0,
    train=TrainConfig(epochs=60, batch_size=10, lr=5e-4))

ALL_MATRICES = (SPATIAL_1PCT, SPATIAL_5PCT, SPATIAL_5PCT_LLGG, TEMPORAL_10PCT)


def run_all():
    os.makedirs(os.path.dirname(LEDGER), exist_ok=True)
    records = []
    for matrix in ALL_MATRICES:
        records.extend(run_matrix(matrix, LEDGER))
    return records


def mean_top1(records, preset, fraction, ablation):
    vals = [r["top1"] for r in records
            if r.get("status") == "ok" and r["preset"] == preset
            and r["fraction"] == fraction and r["ablation"] == ablation]
    assert vals, f"no successful cells for {preset}/{fraction}/{ablation}"
    return sum(vals) / len(vals)
