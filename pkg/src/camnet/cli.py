"""Command line: ``camnet {gen-data,train,sample,eval,bench-hs,ablate}``.

Exit codes: 0 success, 2 user or config error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .config import ABLATION_LADDER, ABLATIONS, RunConfig, apply_ablations, load_config
from .errors import ConfigError, ContractError, TrainingError
from .generator import CamNet, load_checkpoint
from .imle import PairedData, effective_cascade, prepare_data, test_sample, train
from .metrics import faithfulness_weighted_variance, fid, hs_efficiency_benchmark, mode_coverage
from .plotting import image_grid, plot_ablation, plot_fwv, plot_hs_bench, plot_training
from .tasks import ShapesDataset, ShapesSpec, as_tensor, gen_shapes, load_dataset, make_pair, save_dataset

log = logging.getLogger("camnet")

GRID_ROWS = 4
GRID_SAMPLES = 4


class UsageError(Exception):
    """Bad invocation or missing inputs; maps to exit code 2."""


# -- helpers ----------------------------------------------------------------

def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.8g}" if isinstance(v, float) else v for v in row])
    return path


def _load_split(cfg: RunConfig, split: str) -> ShapesDataset:
    try:
        return load_dataset(cfg.paths.dataset, split)
    except FileNotFoundError as exc:
        raise UsageError(f"{exc}; run `camnet gen-data` first") from None


def _paired(cfg: RunConfig, net_cfg, ds: ShapesDataset, limit: int | None = None) -> PairedData:
    n = len(ds) if limit is None else min(limit, len(ds))
    if n == 0:
        raise UsageError("dataset split is empty")
    inputs, targets = make_pair(cfg.task, ds.images[:n])
    return prepare_data(as_tensor(inputs), as_tensor(targets), net_cfg)


def _sample_grid(net: CamNet, data: PairedData, path: Path, seed: int, round_: int = 0) -> Path:
    rows = min(GRID_ROWS, len(data))
    inp, tgt, items = data.batch(list(range(rows)))
    samples = test_sample(net, inp, GRID_SAMPLES, seed, items, round_)
    raw = inp.levels[-1]
    grid = [[raw[i], *[s[i] for s in samples], tgt.levels[-1][i]] for i in range(rows)]
    return image_grid(grid, path)


def _load_net(path: str) -> tuple[CamNet, dict]:
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} does not exist")
    net, header = load_checkpoint(path)
    net.eval()
    return net, header


def _out_dir(cfg: RunConfig, args) -> Path:
    out = Path(args.out or cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    return out


# -- commands ---------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    root = Path(args.out or cfg.paths.dataset)
    spec = ShapesSpec(image_size=cfg.data.image_size, size=cfg.data.size, seed=cfg.data.seed)
    save_dataset(gen_shapes(spec), root, "train")
    held = dataclasses.replace(spec, size=cfg.data.heldout)
    # held-out items continue the index sequence, so they never repeat a training item
    save_dataset(gen_shapes(held, start=cfg.data.size), root, "test")
    cfg.write(root)
    print(f"wrote {cfg.data.size} training and {cfg.data.heldout} held-out images to {root}")
    return 0


def run_training(cfg: RunConfig, out: Path) -> dict:
    """Train per ``cfg`` into ``out``; returns a summary of the run."""
    net_cfg = effective_cascade(cfg.cascade, cfg.train)
    data = _paired(cfg, net_cfg, _load_split(cfg, "train"))
    try:
        preview = _paired(cfg, net_cfg, _load_split(cfg, "test"), GRID_ROWS)
    except UsageError:
        preview = data

    def on_round(net, epoch):
        _sample_grid(net, preview, out / f"grid_epoch{epoch + 1:04d}.png", cfg.train.seed)

    result = train(data, cfg.cascade, cfg.train, out, on_round)
    if result.log:
        plot_training(result.log, out / "train_curves.png")
    return {"initial_loss": result.initial_loss, "final_loss": result.final_loss, "net": result.net}


def cmd_train(cfg: RunConfig, args) -> int:
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.ablate:
        cfg = apply_ablations(cfg, [f for f in args.ablate.split(",") if f])
    out = _out_dir(cfg, args)
    summary = run_training(cfg, out)
    if summary["initial_loss"] is not None:
        print(f"objective {summary['initial_loss']:.4f} -> {summary['final_loss']:.4f}")
    print(f"checkpoint written to {out / 'ckpt_final.camn'}")
    return 0


def cmd_sample(cfg: RunConfig, args) -> int:
    net, _ = _load_net(args.checkpoint)
    out = _out_dir(cfg, args)
    data = _paired(cfg, net.cfg, _load_split(cfg, "test"), args.inputs)
    inp, tgt, items = data.batch(list(range(len(data))))
    samples = test_sample(net, inp, args.count, cfg.train.seed, items)
    rows = [[inp.levels[-1][i], *[s[i] for s in samples], tgt.levels[-1][i]] for i in range(len(data))]
    image_grid(rows, out / "samples.png")
    print(f"wrote {len(data)} x {args.count} samples to {out / 'samples.png'}")
    return 0


def evaluate(net: CamNet, cfg: RunConfig, ds: ShapesDataset, label: str) -> dict:
    """Draw samples for held-out inputs; FID of the pooled samples, mean FWV per bandwidth, palette coverage."""
    data = _paired(cfg, net.cfg, ds, cfg.metrics.eval_inputs)
    fcfg = cfg.metrics.fwv()
    inp, tgt, items = data.batch(list(range(len(data))))
    samples = torch.stack(test_sample(net, inp, fcfg.samples_per_input, cfg.train.seed, items), dim=1)
    targets = tgt.levels[-1]
    fwv = {s: 0.0 for s in fcfg.sigma_list}
    coverage = []
    for i in range(len(data)):
        for s, v in faithfulness_weighted_variance(samples[i], targets[i], fcfg, cfg.train.distance_backend).items():
            fwv[s] += v / len(data)
        if cfg.task.kind == "colourization":
            coverage.append(mode_coverage(samples[i], ds.palette_for(i), ds.masks[i]))
    pooled = samples.reshape(-1, *samples.shape[2:])
    return {
        "label": label,
        "fid": fid(pooled, targets),
        "reference_fid": fid(targets, targets),
        "fwv": fwv,
        "coverage": float(np.mean(coverage)) if coverage else None,
        "data": data,
    }


def cmd_eval(cfg: RunConfig, args) -> int:
    net, _ = _load_net(args.checkpoint)
    out = _out_dir(cfg, args)
    res = evaluate(net, cfg, _load_split(cfg, "test"), args.label)
    kind = cfg.task.kind
    _write_csv(out / "fid.csv", ["task", "config", "fid"],
               [[kind, res["label"], res["fid"]], [kind, "reference", res["reference_fid"]]])
    _write_csv(out / "fwv.csv", ["task", "sigma", "fwv"], [[kind, s, v] for s, v in res["fwv"].items()])
    if res["coverage"] is not None:
        _write_csv(out / "coverage.csv", ["task", "config", "mean_coverage"], [[kind, res["label"], res["coverage"]]])
    _sample_grid(net, res["data"], out / "eval_grid.png", cfg.train.seed)
    plot_fwv(res["fwv"], out / "fwv.png", kind)
    print(f"FID {res['fid']:.4f} (reference {res['reference_fid']:.2e})")
    return 0


def _parse_m(specs: Sequence[str] | None, cfg: RunConfig, K: int) -> list[list[int]]:
    if specs:
        try:
            ms = [[int(v) for v in s.split(",")] for s in specs]
        except ValueError:
            raise UsageError(f"--m expects comma-separated integers, got {specs}") from None
    else:
        ms = cfg.metrics.bench_m
        if any(len(m) != K for m in ms):
            ms = [[m] * K for m in (1, 2, 4)]
    for m in ms:
        if len(m) != K or min(m) < 1:
            raise UsageError(f"sample counts {m} must be {K} positive integers for this checkpoint")
    return ms


def cmd_bench_hs(cfg: RunConfig, args) -> int:
    net, _ = _load_net(args.checkpoint)
    out = _out_dir(cfg, args)
    data = _paired(cfg, net.cfg, _load_split(cfg, "test"), cfg.metrics.bench_inputs)
    inp, tgt, items = data.batch(list(range(len(data))))
    results = []
    for m in _parse_m(args.m, cfg, net.cfg.K):
        results.append(hs_efficiency_benchmark(net, inp, tgt, m, cfg.metrics.bench_trials, cfg.train.seed, items,
                                               cfg.metrics.cap_factor, cfg.train.distance_backend))
    name = lambda r: "x".join(map(str, r.m_per_stage))  # noqa: E731
    _write_csv(out / "hs_bench.csv",
               ["m_per_stage", "mean_ratio", "stderr", "censored_count", "mean_exact_ratio"],
               [[name(r), r.mean_ratio, r.stderr, r.censored_count, r.mean_exact_ratio] for r in results])
    _write_csv(out / "hs_curve.csv", ["m_per_stage", "vanilla_budget", "fraction_matched"],
               [[name(r), g, f] for r in results for g, f in r.curve()])
    plot_hs_bench(results, out / "hs_bench.png")
    for r in results:
        print(f"m={name(r)}: vanilla/HS ratio {r.mean_ratio:.3f} +- {r.stderr:.3f} ({r.censored_count} censored)")
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    out = _out_dir(cfg, args)
    held = _load_split(cfg, "test")
    rows = []
    for name, flags in ABLATION_LADDER:
        sub = apply_ablations(cfg, flags)
        run_dir = out / name
        sub.write(run_dir)
        summary = run_training(sub, run_dir)
        rows.append((name, evaluate(summary["net"], sub, held, name)["fid"]))
        print(f"{name}: proxy FID {rows[-1][1]:.4f}")
    _write_csv(out / "ablation.csv", ["task", "config", "fid"], [[cfg.task.kind, n, v] for n, v in rows])
    plot_ablation(rows, out / "ablation.png")
    return 0


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="camnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults apply to missing fields)")
    common.add_argument("--data", help="dataset directory, overrides paths.dataset")
    common.add_argument("--out", help="output directory, overrides paths.out")
    common.add_argument("--threads", type=int, default=1, help="cap on CPU worker threads")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="render the shapes dataset")
    t = sub.add_parser("train", parents=[common], help="train a cascade with cIMLE")
    t.add_argument("--epochs", type=int)
    t.add_argument("--ablate", default="", help=f"comma-separated subset of {','.join(ABLATIONS)}")
    s = sub.add_parser("sample", parents=[common], help="draw samples for held-out inputs")
    s.add_argument("checkpoint")
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--inputs", type=int, default=8)
    e = sub.add_parser("eval", parents=[common], help="FID and FWV on held-out inputs")
    e.add_argument("checkpoint")
    e.add_argument("--label", default="full", help="config name in fid.csv")
    b = sub.add_parser("bench-hs", parents=[common], help="vanilla vs hierarchical sample efficiency")
    b.add_argument("checkpoint")
    b.add_argument("--m", action="append", help="per-module sample counts, e.g. 4,4,4,4; repeatable")
    a = sub.add_parser("ablate", parents=[common], help="train and evaluate the cumulative ablation ladder")
    a.add_argument("--epochs", type=int)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "bench-hs": cmd_bench_hs,
    "ablate": cmd_ablate,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    torch.set_num_threads(args.threads)
    try:
        cfg = load_config(args.config)
        if args.data:
            cfg.paths.dataset = args.data
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
