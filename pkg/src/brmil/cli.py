"""``brmil`` command line: scan, select, train, infer, ablate, sweeps, theory, bench.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure (including bound violations reported by ``theory``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import fields, replace

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from . import config as config_mod
from .config import ConfigError
from .numcore import NumericalError, RngState
from .selector import VARIANTS, SelectorConfig, select
from .seqscan import SequenceError, read_bags, read_fasta, scan, write_bags

log = logging.getLogger("brmil")

SCHEMA = "brmil"
SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHEAP_SCHEMA = "brmil.cheap"
POOL_EDGES = (0, 1, 16, 64, 256, 1024, 4096)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- output helpers -----------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{float(v):.12g}"
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def csv_text(kind: str, rows: list, fieldnames=None) -> str:
    buf = io.StringIO()
    buf.write(f"# {SCHEMA}.{kind} v{SCHEMA_VERSION}\n")
    if fieldnames is None:
        fieldnames = []
        for r in rows:
            fieldnames += [k for k in r if k not in fieldnames]
    w = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n", restval="")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()


def write_csv(path, kind: str, rows: list, fieldnames=None) -> None:
    text = csv_text(kind, rows, fieldnames)
    with open(path, "w") as fh:
        fh.write(text)


def read_csv(path) -> tuple:
    """(schema line, rows) for files written by ``write_csv``."""
    with open(path) as fh:
        head = fh.readline().rstrip("\n")
        return head, list(csv.DictReader(fh))


def pool_histogram(sizes) -> list:
    sizes = np.asarray(sizes, dtype=np.int64)
    rows = []
    for lo, hi in zip(POOL_EDGES, POOL_EDGES[1:] + (None,)):
        if hi is None:
            cnt = int((sizes >= lo).sum())
            label = f">={lo}"
        else:
            cnt = int(((sizes >= lo) & (sizes < hi)).sum())
            label = f"{lo}" if hi == lo + 1 else f"{lo}-{hi - 1}"
        rows.append((label, cnt))
    return rows


def _print_histogram(sizes) -> None:
    print(f"pairs: {len(sizes)}")
    if len(sizes):
        s = np.asarray(sizes)
        print(f"pool size: min {s.min()} median {np.median(s):g} max {s.max()} total {s.sum()}")
    width = max([c for _, c in pool_histogram(sizes)] + [1])
    for label, cnt in pool_histogram(sizes):
        print(f"  {label:>10} {cnt:>7} {'#' * int(round(40 * cnt / width))}")


# -- loading --------------------------------------------------------------------------

def _bags(path) -> list:
    if path is None:
        raise UsageError("--bags is required")
    try:
        return read_bags(path)
    except OSError as exc:
        raise DataError(f"cannot read bags {path}: {exc.strerror}") from None
    except (ValueError, KeyError) as exc:
        raise DataError(str(exc)) from None


def _ckpt(path):
    try:
        return ckpt.load(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except (ckpt.CheckpointError, ValueError, KeyError) as exc:
        raise DataError(f"checkpoint {path}: {exc}") from None


def _model(path, cfg):
    from .training import BRMIL

    _, meta = _ckpt(path)
    if meta.get("kind") != "brmil":
        raise DataError(f"{path}: expected a stage-3 pipeline checkpoint, got kind {meta.get('kind')!r}")
    return BRMIL.load(path, cfg.selector)


def _encoder(path, prefix: str):
    from .training import load_encoder

    tensors, meta = _ckpt(path)
    if prefix not in meta:
        raise DataError(f"{path}: no {prefix} encoder in checkpoint (kind {meta.get('kind')!r})")
    return load_encoder(path, prefix)


def _student(path):
    """Student encoder from a stage-2 or stage-3 checkpoint."""
    return _encoder(path, "student")[0]


def read_cheap(path) -> dict:
    """{pair_id: (h, z)} from a cheap-signals sidecar."""
    out = {}
    try:
        with open(path) as fh:
            head = json.loads(fh.readline() or "{}")
            if head.get("schema") != CHEAP_SCHEMA or head.get("version") != SCHEMA_VERSION:
                raise DataError(f"{path}: not a cheap-signals file")
            for lineno, line in enumerate(fh, 2):
                if not line.strip():
                    continue
                rec = json.loads(line)
                z = np.array(rec["z"], dtype=np.float64)
                h = np.array(rec["h"], dtype=np.float64).reshape(len(z), -1) if len(z) else np.zeros((0, 1))
                out[rec["pair_id"]] = (h, z)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: {exc}") from None
    return out


def write_cheap(path, bags, student) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"schema": CHEAP_SCHEMA, "version": SCHEMA_VERSION}) + "\n")
        for bag in bags:
            if bag.n:
                h, z = student.encode(bag.x, bag.u)
            else:
                h, z = np.zeros((0, student.d)), np.zeros(0)
            rec = {"pair_id": bag.pair_id, "z": [float(v) for v in z],
                   "h": [float(v) for v in np.ravel(h)]}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def _ints(text: str, name: str) -> tuple:
    try:
        vals = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise UsageError(f"{name}: expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise UsageError(f"{name}: values must be positive integers")
    return vals


def _instances(bags, cfg, decoys: float, max_items):
    """Candidate-level training items; bags without instance labels use the bag label."""
    from .synth import instance_set

    if not any(b.inst_label is not None for b in bags if b.n):
        bags = [b if b.n == 0 or b.label is None else
                replace(b, inst_label=np.full(b.n, int(b.label), dtype=np.int64)) for b in bags]
        log.warning("no instance labels in bag file; using bag labels for every candidate")
    if not any(b.n and b.inst_label is not None for b in bags):
        raise DataError("no labelled candidates to train on")
    g = RngState(cfg.seed).child("instances").generator()
    return instance_set(bags, g, decoys, max_items)


# -- subcommands ------------------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    from .synth import gen_synthetic

    spec = cfg.synth
    if args.n_pairs is not None:
        spec = replace(spec, n_pairs=args.n_pairs)
    if args.redundancy is not None:
        spec = replace(spec, redundancy=args.redundancy)
    bags = gen_synthetic(spec)
    write_bags(args.out, bags)
    _print_histogram([b.n for b in bags])
    return EXIT_OK


def _pairs(args, mirnas, utrs) -> list:
    if args.pairs is None:
        return [(m, u, None) for m in mirnas for u in utrs]
    out = []
    try:
        with open(args.pairs) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) not in (2, 3):
                    raise DataError(f"{args.pairs}:{lineno}: expected 'mirna_id utr_id [label]'")
                if parts[0] not in mirnas or parts[1] not in utrs:
                    raise DataError(f"{args.pairs}:{lineno}: unknown sequence id in {line!r}")
                label = None
                if len(parts) == 3:
                    if parts[2] not in ("0", "1"):
                        raise DataError(f"{args.pairs}:{lineno}: label must be 0 or 1")
                    label = int(parts[2])
                out.append((parts[0], parts[1], label))
    except OSError as exc:
        raise DataError(f"cannot read {args.pairs}: {exc.strerror}") from None
    return out


def cmd_scan(args, cfg) -> int:
    try:
        mir = dict(read_fasta(args.mirna))
        utr = dict(read_fasta(args.utr))
    except SequenceError as exc:
        raise DataError(str(exc)) from None
    except OSError as exc:
        raise DataError(f"cannot read FASTA: {exc.strerror} ({exc.filename})") from None
    if not mir or not utr:
        log.warning("empty FASTA input (%d miRNA, %d UTR records); writing an empty bag file",
                    len(mir), len(utr))
    bags = []
    for m, u, label in _pairs(args, mir, utr):
        try:
            bags.append(scan(mir[m], utr[u], args.threshold, pair_id=f"{m}|{u}", label=label))
        except SequenceError as exc:
            raise DataError(f"pair {m}|{u}: {exc}") from None
    write_bags(args.out, bags)
    _print_histogram([b.n for b in bags])
    return EXIT_OK


def cmd_select(args, cfg) -> int:
    if (args.checkpoint is None) == (args.cheap is None):
        raise UsageError("select needs exactly one of --checkpoint or --cheap")
    bags = _bags(args.bags)
    if args.checkpoint is not None:
        student = _student(args.checkpoint)
        if args.emit_cheap:
            write_cheap(args.emit_cheap, bags, student)
        cheap = {b.pair_id: student.encode(b.x, b.u) for b in bags if b.n}
    else:
        cheap = read_cheap(args.cheap)
    rows = []
    for bag in bags:
        if bag.n == 0:
            rows.append({"pair_id": bag.pair_id, "n": 0, "K": 0, "K1": 0, "K2": 0, "size": 0,
                         "fill_count": 0, "dedup_removed": 0, "S": ""})
            continue
        if bag.pair_id not in cheap:
            raise DataError(f"no cheap signals for pair {bag.pair_id!r}")
        h, z = cheap[bag.pair_id]
        if len(z) != bag.n:
            raise DataError(f"pair {bag.pair_id!r}: {len(z)} cheap scores for {bag.n} candidates")
        res = select(cfg.selector, z, h, bag.p)
        rows.append({"pair_id": bag.pair_id, "n": bag.n, "K": res.K, "K1": res.K1, "K2": res.K2,
                     "size": len(res.S), "fill_count": res.stats.get("fill_count", 0),
                     "dedup_removed": res.stats.get("dedup_removed", 0),
                     "S": " ".join(str(int(i)) for i in res.S)})
    write_csv(args.out, "select", rows)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    from .training import BRMIL, run_stage1, run_stage2, run_stage3, save_encoder

    bags = _bags(args.bags)
    if args.stage == 1:
        x, u, y = _instances(bags, cfg, args.decoys, args.max_items)
        teacher, res = run_stage1(cfg.stage1, x, u, y, cfg.teacher, cfg.loss)
        save_encoder(args.out, teacher, "teacher", meta={"stage": 1, "seed": cfg.seed})
    elif args.stage == 2:
        if args.teacher is None:
            raise UsageError("train --stage 2 needs --teacher")
        teacher = _encoder(args.teacher, "teacher")[0]
        x, u, y = _instances(bags, cfg, args.decoys, args.max_items)
        student, proj, res = run_stage2(cfg.stage2, teacher, x, u, y, cfg.student, cfg.distill, cfg.loss)
        save_encoder(args.out, student, "student", ckpt.prefixed("proj", proj.state()),
                     meta={"stage": 2, "seed": cfg.seed})
    else:
        if args.teacher is None or args.student is None:
            raise UsageError("train --stage 3 needs --teacher and --student")
        teacher = _encoder(args.teacher, "teacher")[0]
        student, tensors, _ = _encoder(args.student, "student")
        proj = None
        if any(k.startswith("proj.") for k in tensors):
            from .encoders import Projection

            ps = ckpt.unprefixed("proj", tensors)
            proj = Projection(*ps["w"].shape)
            proj.load_state(ps)
        model = BRMIL.build(teacher, student, cfg.selector, cfg.aggregator, seed=cfg.seed, proj=proj)
        val = _bags(args.val_bags) if args.val_bags else None
        res = run_stage3(cfg.stage3, model, bags, val, cfg.loss)
        model.save(args.out, {"stage": 3, "seed": cfg.seed, "budget_records": len(model.audit.records),
                              "budget_violations": model.audit.violations})
    rows = res.log
    if args.log:
        write_csv(args.log, f"train.stage{args.stage}", rows)
    if rows:
        last = rows[res.best_epoch] if 0 <= res.best_epoch < len(rows) else rows[-1]
        print(f"stage {args.stage}: best epoch {res.best_epoch} val pr_auc {last['pr_auc']:.4f}")
    return EXIT_OK


def cmd_infer(args, cfg) -> int:
    model = _model(args.checkpoint, cfg)
    bags = _bags(args.bags)
    rows = model.infer(bags)
    empty = [r["pair_id"] for r in rows if r["empty"]]
    if empty:
        log.warning("%d empty bag(s) predicted as 0.5: %s", len(empty), ", ".join(empty[:5]))
    write_csv(args.out, "infer", rows, ["pair_id", "n", "K", "S", "z_pair", "y_hat", "empty"])
    return EXIT_OK


def _models(args, cfg, n_seeds: int) -> tuple:
    paths = args.checkpoint or []
    if not paths:
        raise UsageError("at least one --checkpoint is required")
    if len(paths) not in (1, n_seeds):
        raise UsageError(f"give one shared checkpoint or one per seed ({n_seeds}), got {len(paths)}")
    models = [_model(p, cfg) for p in paths]
    shared = len(models) == 1 and n_seeds > 1
    return models * n_seeds if shared else models, shared


def cmd_ablate(args, cfg) -> int:
    from .experiments import ablation_table
    from .synth import gen_synthetic

    seeds = _ints(args.seeds, "--seeds")
    Ks = _ints(args.Ks, "--Ks")
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    bad = [v for v in variants if v not in VARIANTS]
    if bad or not variants:
        raise UsageError(f"--variants: unknown {bad}; choose from {', '.join(VARIANTS)}")
    models, shared = _models(args, cfg, len(seeds))
    if args.bags:
        bag_sets = [_bags(args.bags)] * len(seeds)
    else:
        spec = replace(cfg.synth, n_pairs=args.n_pairs, redundancy=args.redundancy)
        bag_sets = [gen_synthetic(replace(spec, seed=s * 1000 + 3)) for s in seeds]
    rows = ablation_table(models, bag_sets, Ks, variants, shared=shared)
    write_csv(args.out, "ablate", rows)
    for r in rows:
        print(f"{r['variant']} K={r['K']:<4} pr_auc {r['pr_auc_mean']:.4f}+-{r['pr_auc_std']:.4f} "
              f"coverage {r['coverage_mean']:.4f}+-{r['coverage_std']:.4f}")
    if shared:
        print("note: one checkpoint shared across all seeds and configurations")
    return EXIT_OK


def cmd_sweep_k(args, cfg) -> int:
    from .theory import sweep_k

    Ks = _ints(args.Ks, "--Ks")
    bags = _bags(args.bags)
    labels = np.array([b.label for b in bags])
    if any(b.label is None for b in bags):
        raise DataError("sweep-k needs labelled bags")
    runs = []
    for p in args.checkpoint or []:
        model = _model(p, cfg)
        model.selector = replace(model.selector, kmax=max(Ks))
        runs.append((model, [model.prepare(b) for b in bags], labels))
    if not runs:
        raise UsageError("at least one --checkpoint is required")
    res = sweep_k(runs, Ks, "truncate")
    write_csv(args.out, "sweep_k", res.rows)
    return EXIT_OK


def cmd_sweep_n(args, cfg) -> int:
    from .theory import sweep_n

    caps = _ints(args.caps, "--caps")
    bags = _bags(args.bags)
    if any(b.label is None for b in bags):
        raise DataError("sweep-n needs labelled bags")
    runs = [(_model(p, cfg), bags) for p in args.checkpoint or []]
    if not runs:
        raise UsageError("at least one --checkpoint is required")
    res = sweep_n(runs, caps, args.k_star)
    write_csv(args.out, "sweep_n", res.rows)
    return EXIT_OK


def cmd_theory(args, cfg) -> int:
    from .theory import EXHAUSTIVE_MAX, bound_check, fuzz_bound, influence_weights

    rows = []
    if args.fuzz:
        for i, (count, K, rep) in enumerate(fuzz_bound(args.fuzz, cfg.seed, args.max_tokens)):
            rows.append({"case": i, "count": count, "K": K, **vars(rep)})
    else:
        if args.checkpoint is None:
            raise UsageError("theory needs --checkpoint and --bags, or --fuzz N")
        if not 1 <= args.max_tokens <= EXHAUSTIVE_MAX:
            raise UsageError(f"--max-tokens must lie in [1, {EXHAUSTIVE_MAX}] for exhaustive mode")
        model = _model(args.checkpoint, cfg)
        Ks = _ints(args.Ks, "--Ks")
        for bag in _bags(args.bags)[:args.limit]:
            if bag.n == 0:
                continue
            prep = model.prepare(bag)
            tok = prep.tokens[:args.max_tokens]
            prof = influence_weights(model.agg, tok, mode="exhaustive")
            for K in Ks:
                if K > len(tok):
                    continue
                rep = bound_check(model.agg, tok, np.arange(K), profile=prof)
                rows.append({"case": bag.pair_id, "count": len(tok), "K": K, **vars(rep)})
    write_csv(args.out, "theory", rows)
    bad = sum(not r["ok"] for r in rows)
    print(f"bound checks: {len(rows)}, violations: {bad}")
    return EXIT_NUMERIC if bad else EXIT_OK


def cmd_bench(args, cfg) -> int:
    from .bench import (bench_model, emit_report, fit_quadratic, kernel_benchmark, profile_pipeline,
                        selector_complexity_probe, threads_from_env, workload_counts)
    from .synth import gen_synthetic

    bcfg = cfg.bench
    threads = args.threads if args.threads is not None else threads_from_env(bcfg.threads)
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    bcfg = replace(bcfg, threads=threads)
    if args.bags:
        bags = _bags(args.bags)
    else:
        bags = gen_synthetic(replace(cfg.synth, n_pairs=args.n_pairs, pool_median=1024.0,
                                     pool_sigma=0.2, seed=cfg.seed))
    model = _model(args.checkpoint, cfg) if args.checkpoint else bench_model(cfg.seed, selector=cfg.selector)
    try:
        timings = profile_pipeline(bcfg, bags, model)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    _, summary = emit_report(timings, args.out)
    print(summary)
    br = [t for t in timings if t.pipeline == "brmil"]
    if len(br) >= 2:
        fit = fit_quadratic([t.K for t in br], [t.mean("aggregation") for t in br])
        print(f"brmil aggregation ~ a + b K^2: R^2 = {fit['r2']:.4f}")
    if args.counts:
        write_csv(args.counts, "bench_counts", workload_counts(timings))
    if args.probe:
        write_csv(args.probe, "selector_probe", selector_complexity_probe(seed=cfg.seed))
    if args.kernels:
        write_csv(args.kernels, "kernels", kernel_benchmark(seed=cfg.seed))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "scan": cmd_scan, "select": cmd_select, "train": cmd_train,
    "infer": cmd_infer, "ablate": cmd_ablate, "sweep-k": cmd_sweep_k, "sweep-n": cmd_sweep_n,
    "theory": cmd_theory, "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="seed for every stochastic component")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="brmil", description="Budgeted relational multi-instance learning.")
    p.add_argument("--version", action="version", version=f"brmil {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic bag file")
    s.add_argument("--out", required=True)
    s.add_argument("--n-pairs", type=int)
    s.add_argument("--redundancy", type=int)

    s = sub.add_parser("scan", parents=[common], help="scan FASTA pairs into a bag file")
    s.add_argument("--mirna", required=True, help="miRNA FASTA")
    s.add_argument("--utr", required=True, help="3'UTR FASTA")
    s.add_argument("--pairs", help="whitespace table: mirna_id utr_id [label]; default all combinations")
    s.add_argument("--threshold", type=float, default=6.0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("select", parents=[common], help="run the selector on each bag")
    s.add_argument("--bags", required=True)
    s.add_argument("--checkpoint", help="stage-2 or stage-3 checkpoint (student)")
    s.add_argument("--cheap", help="cheap-signals sidecar instead of a checkpoint")
    s.add_argument("--emit-cheap", help="also write the cheap-signals sidecar")
    s.add_argument("--out", required=True)
    for f in fields(SelectorConfig):
        s.add_argument(f"--{f.name.replace('_', '-')}", dest=f"selector_{f.name}",
                       help=f"selector.{f.name} (default {f.default})")

    s = sub.add_parser("train", parents=[common], help="train one stage")
    s.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    s.add_argument("--bags", required=True)
    s.add_argument("--val-bags")
    s.add_argument("--teacher", help="stage-1 checkpoint (stages 2 and 3)")
    s.add_argument("--student", help="stage-2 checkpoint (stage 3)")
    s.add_argument("--decoys", type=float, default=2.0, help="decoys per signal candidate (stages 1-2)")
    s.add_argument("--max-items", type=int)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="CSV metric log")

    s = sub.add_parser("infer", parents=[common], help="budgeted inference")
    s.add_argument("--bags", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("ablate", parents=[common], help="selector variants x budgets")
    s.add_argument("--bags", help="bag file; default synthetic redundant pools per seed")
    s.add_argument("--checkpoint", action="append", help="one shared, or one per seed")
    s.add_argument("--variants", default=",".join(VARIANTS))
    s.add_argument("--Ks", default="32,64")
    s.add_argument("--seeds", default="2020,2025,2026")
    s.add_argument("--n-pairs", type=int, default=200)
    s.add_argument("--redundancy", type=int, default=40)
    s.add_argument("--out", required=True)

    s = sub.add_parser("sweep-k", parents=[common], help="truncation sweep over K")
    s.add_argument("--bags", required=True)
    s.add_argument("--checkpoint", action="append")
    s.add_argument("--Ks", default="8,16,32,64,128,256,512")
    s.add_argument("--out", required=True)

    s = sub.add_parser("sweep-n", parents=[common], help="visible-pool sweep at fixed K")
    s.add_argument("--bags", required=True)
    s.add_argument("--checkpoint", action="append")
    s.add_argument("--caps", default="64,128,256,512,1024,2048")
    s.add_argument("--k-star", type=int, default=64)
    s.add_argument("--out", required=True)

    s = sub.add_parser("theory", parents=[common], help="influence weights and bound checks")
    s.add_argument("--checkpoint")
    s.add_argument("--bags")
    s.add_argument("--fuzz", type=int, default=0, help="random small-aggregator cases instead of bags")
    s.add_argument("--Ks", default="1,2,4,8")
    s.add_argument("--max-tokens", type=int, default=10)
    s.add_argument("--limit", type=int, default=20, help="bags to check")
    s.add_argument("--out", required=True)

    s = sub.add_parser("bench", parents=[common], help="stage timings per pipeline and K")
    s.add_argument("--bags")
    s.add_argument("--checkpoint")
    s.add_argument("--n-pairs", type=int, default=8)
    s.add_argument("--threads", type=int)
    s.add_argument("--out", required=True, help="timing report CSV")
    s.add_argument("--counts", help="workload counts CSV (deterministic)")
    s.add_argument("--probe", help="selector complexity CSV")
    s.add_argument("--kernels", help="compiled vs fallback kernel CSV")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors exit 1, --help/--version exit 0
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        flags = [f"selector.{k[9:]}={v}" for k, v in sorted(vars(args).items())
                 if k.startswith("selector_") and v is not None]
        cfg = config_mod.load(args.config, list(args.set) + flags)
        cfg = config_mod.with_seed(cfg, args.seed if args.seed is not None else cfg.seed)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"brmil {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"brmil {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, SequenceError, ckpt.CheckpointError) as exc:
        print(f"brmil {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"brmil {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
