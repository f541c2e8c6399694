"""Command-line entry point.

Exit codes: 0 success, 1 invalid input (bad flags, config or files),
2 runtime failure (divergence, failed check).
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, regions
from . import tensor as T
from .config import GRADCHECK, RunConfig, from_meta, load_run_config
from .data import generate_dataset, load_dataset
from .errors import ContractError, DimensionError, DragError, FormatError
from .gradcheck import STEP, TOLERANCE, pipeline_errors
from .kmeans import kmeans_cluster
from .model import DRAG, MODES
from . import training as tr

SWEEP_NS = (4, 6, 8, 10, 12)
TIE_POINTS = 0.5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p, *, data=False, checkpoint=False):
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--regions", type=int, help="number of regions N")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    if data:
        p.add_argument("--data", help="dataset directory")
    if checkpoint:
        p.add_argument("--checkpoint", help="checkpoint file")


def build_parser():
    parser = _Parser(prog="drag", description="Region-graph privacy detector on synthetic co-occurrence data.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    _common(p)

    p = sub.add_parser("train", help="run the staged schedule")
    _common(p, data=True, checkpoint=True)

    p = sub.add_parser("eval", help="score a checkpoint")
    _common(p, data=True, checkpoint=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = sub.add_parser("grad-check", help="finite-difference check of the full pipeline")
    _common(p)

    p = sub.add_parser("cluster", help="peak signatures and K-means channel groups")
    _common(p, data=True, checkpoint=True)

    p = sub.add_parser("export-regions", help="write region maps for chosen images")
    _common(p, data=True, checkpoint=True)
    p.add_argument("--images", default="0,1,2,3", help="comma-separated test-split indices")

    p = sub.add_parser("ablate", help="compare the four ablation modes")
    _common(p, data=True)
    p.add_argument("--seeds", default="7,8,9", help="comma-separated training seeds")

    p = sub.add_parser("sweep-n", help="test accuracy against the number of regions")
    _common(p, data=True)
    p.add_argument("--ns", default=",".join(map(str, SWEEP_NS)))
    return parser


def _int_list(text, what):
    try:
        vals = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"{what}: expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise UsageError(f"{what}: empty list")
    return vals


def resolve_config(args, base=None) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    cfg = base or RunConfig()
    if args.config:
        cfg = load_run_config(args.config, cfg)
    pairs = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        pairs[key] = value
    for flag, key in (("seed", "seed"), ("regions", "n_regions"), ("mode", "mode"), ("out", "out"),
                      ("data", "data"), ("checkpoint", "checkpoint")):
        value = getattr(args, flag, None)
        if value is not None:
            pairs[key] = value
    return cfg.with_overrides(pairs, "flags")


def _need(value, flag):
    if not value:
        raise UsageError(f"{flag} is required")
    return value


def _out_dir(cfg, default):
    out = Path(cfg.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _splits(ds):
    return {name: ds.split(name) for name in ("train", "val", "test")}


def _pairs(split):
    return split.images, split.labels


def _check_shape(cfg, ds):
    side = ds.images.shape[-1]
    if side != cfg.image_side:
        raise FormatError(f"dataset images are {side}px but the model expects image_side={cfg.image_side}")


def checkpoint_meta(cfg: RunConfig, result: tr.TrainResult | None) -> dict:
    mc = cfg.model_config()
    meta = {
        "N": mc.n_regions,
        "C": mc.channels,
        "H": mc.side,
        "W": mc.side,
        "d_k": mc.d_k,
        "seed": cfg.seed,
        "stage": result.stage_reached if result else "",
    }
    if result is not None and result.best_at:
        meta["best_stage"], meta["best_epoch"] = result.best_at
        meta["best_val_accuracy"] = repr(result.best_val)
    if result is not None and result.cr is not None:
        meta["cr"] = ";".join("".join(str(int(v)) for v in row) for row in result.cr)
    meta.update({f"cfg.{line.split('=', 1)[0]}": line.split("=", 1)[1] for line in cfg.to_lines()})
    return meta


def load_model(path, mode=None):
    params, meta = tr.load_checkpoint(path)
    cfg = from_meta(meta)
    model = DRAG(cfg.model_config(), seed=cfg.seed, mode=mode or cfg.mode)
    model.load_state_dict(params)
    return model, cfg, meta


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(args):
    cfg = resolve_config(args)
    out = Path(_need(cfg.out, "--out"))
    t0 = time.perf_counter()
    ds = generate_dataset(cfg.dataset_config(), out)
    pos = int(ds.labels.sum())
    print(f"wrote {len(ds)} images to {out} ({pos} private, {len(ds) - pos} public) in {time.perf_counter() - t0:.1f}s")
    return 0


def cmd_train(args):
    cfg = resolve_config(args)
    ds = load_dataset(_need(cfg.data, "--data"))
    _check_shape(cfg, ds)
    out = _out_dir(cfg, "run")
    sp = _splits(ds)
    model = DRAG(cfg.model_config(), seed=cfg.seed, mode=cfg.mode)

    def progress(row):
        terms = " ".join(f"{k[5:]}={row[k]:.4g}" for k in tr.LOG_HEADER[2:6] if row[k] is not None)
        print(f"[{row['stage']:>12} {row['epoch']:>2}] {terms} val_acc={row['val_accuracy']:.4f}", flush=True)

    t0 = time.perf_counter()
    result = tr.run_schedule(cfg.schedule(), model, _pairs(sp["train"]), _pairs(sp["val"]), cfg.seed, cfg.mode,
                             log_path=out / "train_log.csv", progress=progress)
    elapsed = time.perf_counter() - t0
    tr.restore_best(model, result)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / "checkpoint.bin"
    tr.save_checkpoint(model.params, checkpoint_meta(cfg, result), ckpt)
    (out / "runconfig.txt").write_text("\n".join(cfg.to_lines()) + "\n")
    report = tr.evaluate(model, *_pairs(sp["test"]), mode=cfg.mode)
    _write_rows(out / "metrics.csv", ("split", "mode") + report.COLUMNS, [["test", cfg.mode] + [_fmt(v) for v in report.row()]])
    if result.cgl is not None:
        c = result.cgl
        print(f"CGL pretraining: loss {c.loss_before:.4g} -> {c.loss_after:.4g} "
              f"({100 * c.reduction:.1f}% lower), agreement with K-means {100 * c.agreement:.2f}%")
    if result.best_at:
        print(f"best validation accuracy {result.best_val:.4f} at {result.best_at[0]} epoch {result.best_at[1]}")
    print(report.table(f"DRAG ({cfg.mode})"))
    print(f"trained in {elapsed:.1f}s; checkpoint {ckpt}")
    return 0


def cmd_eval(args):
    cfg0 = resolve_config(args)
    model, cfg, _ = load_model(_need(cfg0.checkpoint, "--checkpoint"), args.mode)
    ds = load_dataset(_need(cfg0.data, "--data"))
    _check_shape(cfg, ds)
    split = ds.split(args.split)
    report = tr.evaluate(model, split.images, split.labels, mode=model.mode)
    print(report.table(f"DRAG ({model.mode})"))
    if cfg0.out:
        out = _out_dir(cfg0, ".")
        _write_rows(out / "metrics.csv", ("split", "mode") + report.COLUMNS,
                    [[args.split, model.mode] + [_fmt(v) for v in report.row()]])
    return 0


def cmd_grad_check(args):
    cfg = resolve_config(args, GRADCHECK)
    mc = cfg.model_config()
    print(f"B={cfg.gradcheck_batch} N={mc.n_regions} C={mc.channels} H=W={mc.side} mode={cfg.mode} eps={STEP:g}")
    errs, seconds = pipeline_errors(cfg)
    width = max(len(k) for k in errs)
    for name, err in errs.items():
        print(f"{name:<{width}}  {err:.3e}")
    worst = max(errs.values())
    verdict = "PASS" if worst < TOLERANCE else "FAIL"
    print(f"max relative error {worst:.3e} ({verdict}, tolerance {TOLERANCE:g}) in {seconds:.1f}s")
    return 0 if worst < TOLERANCE else 2


def _model_for(cfg, seed_only=False):
    if cfg.checkpoint and not seed_only:
        model, ckcfg, _ = load_model(cfg.checkpoint)
        return model, ckcfg
    return DRAG(cfg.model_config(), seed=cfg.seed), cfg


def cmd_cluster(args):
    cfg = resolve_config(args)
    model, mcfg = _model_for(cfg)
    ds = load_dataset(_need(cfg.data, "--data"))
    _check_shape(mcfg, ds)
    out = _out_dir(cfg, "cluster")
    train = ds.split("train")
    sig = tr.train_signatures(model, train.images)
    km = kmeans_cluster(sig, model.config.n_regions, seed=cfg.seed)
    side = model.config.side
    regions.write_signatures(out / "signatures.txt", sig, side, side)
    regions.write_assignment(out / "assignment.txt", km.assignment())
    sizes = km.assignment().sum(axis=1).astype(int)
    print(f"{sig.shape[0]} channels, Ω={sig.shape[1] // 2} images, N={model.config.n_regions}")
    print(f"WCSS {km.wcss:.6g} after {km.n_iter} Lloyd iterations; group sizes {' '.join(map(str, sizes))}")
    print(f"wrote {out / 'signatures.txt'} and {out / 'assignment.txt'}")
    return 0


def write_correlation(path, A):
    Path(path).write_text("\n".join(" ".join(f"{v:.9g}" for v in row) for row in np.asarray(A)) + "\n")


def cmd_export_regions(args):
    cfg = resolve_config(args)
    model, mcfg = _model_for(cfg)
    ds = load_dataset(_need(cfg.data, "--data"))
    _check_shape(mcfg, ds)
    test = ds.split("test")
    picks = _int_list(args.images, "--images")
    bad = [i for i in picks if not 0 <= i < len(test)]
    if bad:
        raise UsageError(f"--images: indices {bad} outside the test split (size {len(test)})")
    out = _out_dir(cfg, "regions")
    with T.no_grad():
        o = model.forward(test.images[picks])
    A = None if o.A is None else o.A.data
    for k, i in enumerate(picks):
        image_id = Path(test.filenames[i]).stem
        paths = regions.export_region_maps(o.F_w.data[k], image_id, out)
        if A is not None:
            write_correlation(out / f"correlation_{image_id}.txt", A[k])
        label = "private" if test.labels[i] else "public"
        print(f"{image_id}: {len(paths)} region maps, label={label}, p_private={o.probs.data[k, 1]:.4f}")
    return 0


def ordering_checks(means: dict):
    """The expected ablation ordering, each as ``(relation, holds, tie)`` in points."""
    out = []
    for a, b in (("full", "fixed_correlation"), ("fixed_correlation", "no_gcn"), ("full", "frozen_cgl")):
        gap = 100 * (means[a] - means[b])
        out.append((f"{a} >= {b}", gap >= 0 or abs(gap) <= TIE_POINTS, abs(gap) <= TIE_POINTS, gap))
    return out


def run_ablation(cfg: RunConfig, ds, seeds, progress=None):
    """``{mode: [MetricsReport per seed]}`` on the test split."""
    sp = _splits(ds)
    reports = {m: [] for m in MODES}
    for seed in seeds:
        trained = tr.train_modes(cfg.schedule(), cfg.model_config(), _pairs(sp["train"]), _pairs(sp["val"]),
                                 seed, MODES, progress=progress)
        for mode, (model, _) in trained.items():
            reports[mode].append(tr.evaluate(model, *_pairs(sp["test"]), mode=mode))
    return reports


def ablation_table(reports, seeds):
    header = ["mode", "accuracy", "accuracy_std", "private_f1", "public_f1"] + [f"acc_seed{s}" for s in seeds]
    rows = []
    for mode in MODES:
        acc = [r.accuracy for r in reports[mode]]
        rows.append([mode, np.mean(acc), np.std(acc), np.mean([r.private_f1 for r in reports[mode]]),
                     np.mean([r.public_f1 for r in reports[mode]])] + acc)
    return header, rows


def cmd_ablate(args):
    cfg = resolve_config(args)
    seeds = _int_list(args.seeds, "--seeds")
    ds = load_dataset(_need(cfg.data, "--data"))
    _check_shape(cfg, ds)
    out = _out_dir(cfg, "ablation")
    t0 = time.perf_counter()
    reports = run_ablation(cfg, ds, seeds)
    header, rows = ablation_table(reports, seeds)
    _write_rows(out / "ablation.csv", header, [[r[0]] + [_fmt(float(v)) for v in r[1:]] for r in rows])
    print(f"{'mode':<20}{'accuracy':>10}{'± std':>8}{'private F-1':>13}{'public F-1':>12}")
    for r in rows:
        print(f"{r[0]:<20}{100 * r[1]:>9.2f}%{100 * r[2]:>7.2f}{r[3]:>13.3f}{r[4]:>12.3f}")
    print(f"{'majority class':<20}{100 * (1.0 - ds.split('test').labels.mean()):>9.2f}%")
    means = {r[0]: r[1] for r in rows}
    for rel, holds, tie, gap in ordering_checks(means):
        note = " (tie)" if tie else ""
        print(f"{rel:<36}{'yes' if holds else 'no':>4}  gap {gap:+.2f} points{note}")
    print(f"seeds {','.join(map(str, seeds))}; {time.perf_counter() - t0:.0f}s; wrote {out / 'ablation.csv'}")
    return 0


def cmd_sweep_n(args):
    cfg = resolve_config(args)
    ns = _int_list(args.ns, "--ns")
    ds = load_dataset(_need(cfg.data, "--data"))
    _check_shape(cfg, ds)
    out = _out_dir(cfg, "sweep")
    sp = _splits(ds)
    rows = []
    for n in ns:
        run = cfg.with_overrides({"n_regions": n})
        model = DRAG(run.model_config(), seed=run.seed, mode=run.mode)
        res = tr.run_schedule(run.schedule(), model, _pairs(sp["train"]), _pairs(sp["val"]), run.seed, run.mode)
        tr.restore_best(model, res)
        rep = tr.evaluate(model, *_pairs(sp["test"]), mode=run.mode)
        rows.append([n] + [_fmt(v) for v in rep.row()])
        print(f"N={n:<3} accuracy {100 * rep.accuracy:6.2f}%  private F-1 {rep.private_f1:.3f}  public F-1 {rep.public_f1:.3f}",
              flush=True)
    _write_rows(out / "sweep_n.csv", ("N",) + tr.MetricsReport.COLUMNS, rows)
    print(f"wrote {out / 'sweep_n.csv'}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "cluster": cmd_cluster,
    "export-regions": cmd_export_regions,
    "ablate": cmd_ablate,
    "sweep-n": cmd_sweep_n,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except (FormatError, ContractError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DragError as e:
        print(f"failed: {e}", file=sys.stderr)
        return 2
    except (RuntimeError, FloatingPointError, OSError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
