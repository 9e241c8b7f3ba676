"""Command-line interface.

Exit codes: 0 success, 1 operational failure (bad data, failed run),
2 usage/configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from . import data as vd
from .errors import VtlabError, ConfigError
from .harness import MatrixConfig, run_matrix, read_ledger, summarize, write_report
from .models import build_model, count_params, count_flops
from .presets import presets, get_preset
from .training import TrainConfig, train, evaluate, save_checkpoint, load_checkpoint


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output path")


def cmd_gen_data(args):
    gen = {"spatial": vd.gen_spatial_task, "temporal": vd.gen_temporal_task,
           "image": vd.gen_image_task}[args.task]
    ds = gen(args.n, seed=args.seed)
    out = args.out or f"{args.task}_{args.n}_{args.seed}.vtlb"
    vd.write_dataset(out, ds)
    print(f"wrote {out}: {ds.videos.shape} {args.task}, {ds.num_classes} classes, "
          f"hash {ds.data_hash()[:16]}")
    return 0


def cmd_params(args):
    info = get_preset(args.preset)
    rep = count_params(info.config)
    if args.json:
        print(json.dumps(rep.to_dict(), indent=2))
    else:
        print(rep.text_table())
    if info.target_params_m:
        target = info.target_params_m * 1e6
        err = rep.total / target - 1
        print(f"reference: {info.target_params_m:.1f}M, relative error {err:+.2%}")
    return 0


def cmd_flops(args):
    info = get_preset(args.preset)
    shape = tuple(int(x) for x in args.input.split("x")) if args.input else None
    rep = count_flops(info.config, input_shape=shape)
    if args.json:
        print(json.dumps(rep.to_dict(), indent=2))
    else:
        print(rep.text_table())
    if info.target_gflops and shape is None:
        gm = rep.total_macs / 1e9 * info.eval_views
        err = gm / info.target_gflops - 1
        print(f"reference: {info.target_gflops:.1f}G at {info.eval_views} view(s), "
              f"relative error {err:+.2%}")
    return 0


def cmd_train(args):
    ds = vd.read_dataset(args.data)
    base = get_preset(args.preset).config
    if base.num_classes != ds.num_classes:
        base = replace(base, num_classes=ds.num_classes)
    model = build_model(base, seed=args.seed)
    idx = None
    if args.fraction < 1.0:
        idx = vd.sample_split(ds.labels, args.fraction, seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      seed=args.seed)
    hist = train(model, ds, idx, cfg,
                 log=lambda s, e, l, r: print(f"step {s} epoch {e} loss {l:.4f} lr {r:.2e}")
                 if s % args.log_every == 0 else None)
    print(f"trained {args.preset} for {hist['steps']} steps; final loss "
          f"{hist['losses'][-1]:.4f}")
    if args.eval_data:
        te = vd.read_dataset(args.eval_data)
        print("eval:", evaluate(model, te, topk=(1, 5)))
    if args.out:
        save_checkpoint(args.out, model)
        print(f"checkpoint written to {args.out}")
    return 0


def cmd_ablate(args):
    matrix = MatrixConfig(
        presets=tuple(args.presets), fractions=tuple(args.fractions),
        ablations=tuple(args.ablations), seeds=tuple(range(args.seeds)),
        task=args.task, train_size=args.train_size, test_size=args.test_size,
        train=TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr))
    records = run_matrix(matrix, args.ledger, threads=args.threads)
    s = summarize(records)
    print(json.dumps(s, indent=2))
    return 0 if s["n_failed"] == 0 else 1


def cmd_compare(args):
    records = read_ledger(args.ledger)
    s = summarize(records)
    print(f"{'preset':<16}{'frac':>6}{'ablation':>12}{'seeds':>6}"
          f"{'top1':>14}{'top5':>14}")
    for g in s["groups"]:
        print(f"{g['preset']:<16}{g['fraction']:>6.2f}{g['ablation']:>12}"
              f"{g['seeds']:>6}{g['top1_mean']*100:>8.1f}±{g['top1_std']*100:<5.1f}"
              f"{g['top5_mean']*100:>8.1f}±{g['top5_std']*100:<5.1f}")
    if s["n_failed"]:
        print(f"{s['n_failed']} failed cells:")
        for f in s["failed"]:
            print("  ", f)
    return 0 if s["n_failed"] == 0 else 1


def cmd_report(args):
    records = read_ledger(args.ledger)
    paths = write_report(records, args.out or "report")
    for k, v in paths.items():
        print(f"{k}: {v}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="vtlab",
                                description="video-transformer attention laboratory")
    p.add_argument("--config", default=None,
                   help="JSON file of defaults merged into the subcommand args")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--task", choices=("spatial", "temporal", "image"), required=True)
    g.add_argument("--n", type=int, default=1000)
    _add_common(g)
    g.set_defaults(fn=cmd_gen_data)

    for name, fn in (("params", cmd_params), ("flops", cmd_flops)):
        q = sub.add_parser(name, help=f"analytic {name} for a preset")
        q.add_argument("--preset", required=True, choices=sorted(presets()))
        q.add_argument("--json", action="store_true")
        if name == "flops":
            q.add_argument("--input", default=None, help="TxHxW override, e.g. 8x32x32")
        q.set_defaults(fn=fn)

    t = sub.add_parser("train", help="train one preset on a dataset file")
    t.add_argument("--preset", required=True, choices=sorted(presets()))
    t.add_argument("--data", required=True)
    t.add_argument("--eval-data", default=None)
    t.add_argument("--fraction", type=float, default=1.0)
    t.add_argument("--epochs", type=int, default=40)
    t.add_argument("--batch-size", type=int, default=10)
    t.add_argument("--lr", type=float, default=5e-4)
    t.add_argument("--log-every", type=int, default=10)
    _add_common(t)
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("ablate", help="run (and resume) an experiment matrix")
    a.add_argument("--presets", nargs="+", required=True)
    a.add_argument("--fractions", nargs="+", type=float, required=True)
    a.add_argument("--ablations", nargs="+", default=["baseline"])
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--task", choices=("spatial", "temporal"), default="spatial")
    a.add_argument("--train-size", type=int, default=1000)
    a.add_argument("--test-size", type=int, default=300)
    a.add_argument("--epochs", type=int, default=40)
    a.add_argument("--batch-size", type=int, default=10)
    a.add_argument("--lr", type=float, default=5e-4)
    a.add_argument("--ledger", required=True, help="JSONL ledger path (appended)")
    a.add_argument("--threads", type=int, default=None)
    a.set_defaults(fn=cmd_ablate)

    c = sub.add_parser("compare", help="tabulate a ledger")
    c.add_argument("--ledger", required=True)
    c.set_defaults(fn=cmd_compare)

    r = sub.add_parser("report", help="render CSV, JSON summary and figures")
    r.add_argument("--ledger", required=True)
    r.add_argument("--out", default="report")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            with open(args.config) as f:
                for k, v in json.load(f).items():
                    if hasattr(args, k):
                        setattr(args, k, v)
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except VtlabError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
