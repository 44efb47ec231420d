"""Desk-scale end-to-end runs on the planted cooperative task.

One ``run_seed`` call generates train/test splits, runs the three stages,
trains a K=64 pipeline and a K=512 pipeline for truncation sweeps, and
evaluates the max-pooling baseline. The K=512 aggregator starts from the
K=64 weights and is fine-tuned at K=512 with the teacher frozen, which keeps
a 1-CPU run to a few minutes per seed.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .aggregator import AggConfig, Aggregator
from .encoders import EncoderConfig
from .metrics import metrics
from .numcore import RngState, _sigmoid_np
from .selector import VARIANTS, SelectorConfig, signal_cluster_coverage
from .synth import SynthSpec, gen_synthetic, instance_set
from .training import (BRMIL, BudgetAudit, StageConfig, evaluate, maxpool_predict, run_stage1,
                       run_stage2, run_stage3)

log = logging.getLogger(__name__)

SEEDS = (2020, 2025, 2026)


@dataclass(frozen=True)
class DeskConfig:
    n_train: int = 1600
    n_test: int = 400
    synth: SynthSpec = SynthSpec()
    teacher: EncoderConfig = EncoderConfig("teacher", d=32, conv1=16, conv2=16, hidden=32)
    student: EncoderConfig = EncoderConfig("student", d=16, conv1=8)
    agg: AggConfig = AggConfig(d_tok=35, width=32, heads=4, depth=2, ff=64)
    instances: int = 6000
    decoys_per_signal: float = 2.0
    stage1: StageConfig = StageConfig(stage=1, epochs=6, batch_size=32, lr=0.1, warmup_epochs=0)
    stage2: StageConfig = StageConfig(stage=2, epochs=4, batch_size=32, lr=0.1, warmup_epochs=0)
    stage3: StageConfig = StageConfig(stage=3, epochs=12, warmup_epochs=10, batch_size=32, lr=0.05)
    kmax: int = 64
    kmax_sweep: int = 512
    stage3_sweep: StageConfig = StageConfig(stage=3, epochs=2, warmup_epochs=2, batch_size=32,
                                            lr=0.02, freeze=True)
    ablation_pairs: int = 200
    ablation_redundancy: int = 40


@dataclass
class SeedRun:
    seed: int
    test: list
    model: BRMIL
    preps: list
    model_sweep: BRMIL
    preps_sweep: list
    brmil: dict
    maxpool: dict
    logs: dict = field(default_factory=dict)
    audits: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    @property
    def labels(self) -> np.ndarray:
        return np.array([b.label for b in self.test])


def splits(cfg: DeskConfig, seed: int) -> tuple:
    train = gen_synthetic(replace(cfg.synth, n_pairs=cfg.n_train, seed=seed * 1000 + 1))
    test = gen_synthetic(replace(cfg.synth, n_pairs=cfg.n_test, seed=seed * 1000 + 2))
    return train, test


def run_seed(seed: int, cfg: DeskConfig = DeskConfig()) -> SeedRun:
    t0 = time.perf_counter()
    timings = {}
    train, test = splits(cfg, seed)
    g = RngState(seed).child("instances").generator()
    x, u, y = instance_set(train, g, cfg.decoys_per_signal, cfg.instances)
    teacher, r1 = run_stage1(replace(cfg.stage1, seed=seed), x, u, y, cfg.teacher)
    student, proj, r2 = run_stage2(replace(cfg.stage2, seed=seed), teacher, x, u, y, cfg.student)
    timings["stages12"] = time.perf_counter() - t0

    t = time.perf_counter()
    model = BRMIL.build(teacher, student, SelectorConfig(kmax=cfg.kmax), cfg.agg, seed=seed, proj=proj)
    preps = [model.prepare(b) for b in train]
    r3 = run_stage3(replace(cfg.stage3, seed=seed), model, train, preps=preps)
    test_preps = [model.prepare(b) for b in test]
    brmil = evaluate(model, test, test_preps)
    timings["stage3"] = time.perf_counter() - t

    t = time.perf_counter()
    agg = Aggregator(model.agg.cfg)
    agg.load_state(model.agg.state())
    sweep = BRMIL(model.teacher, model.student, agg, SelectorConfig(kmax=cfg.kmax_sweep), proj)
    sweep_train = [sweep.prepare(b) for b in train]
    r3s = run_stage3(replace(cfg.stage3_sweep, seed=seed), sweep, train, preps=sweep_train)
    sweep_test = [sweep.prepare(b) for b in test]
    timings["stage3_sweep"] = time.perf_counter() - t

    mp = maxpool_predict(model.teacher, test)
    maxpool = {"y_hat": mp, **metrics(mp, [b.label for b in test])}
    timings["total"] = time.perf_counter() - t0
    log.info("seed %d: brmil pr_auc %.3f maxpool %.3f (%.0fs)", seed, brmil["pr_auc"],
             maxpool["pr_auc"], timings["total"])
    return SeedRun(seed, test, model, test_preps, sweep, sweep_test, brmil, maxpool,
                   {"stage1": r1.log, "stage2": r2.log, "stage3": r3.log, "stage3_sweep": r3s.log,
                    "teacher_unchanged_sweep": r3s.extra["teacher_unchanged"]},
                   [model.audit, sweep.audit], timings)


def merged_audit(runs) -> BudgetAudit:
    out = BudgetAudit()
    for r in runs:
        for a in r.audits:
            out.records.extend(a.records)
            out.violations += a.violations
    return out


def ablation_table(models: list, bag_sets: list, Ks=(32, 64), variants=VARIANTS,
                   shared: bool = False) -> list:
    """PR-AUC and signal-cluster coverage per (variant, K), mean and std over runs.

    ``models[i]`` is evaluated on ``bag_sets[i]``. Coverage is NaN when the
    bags carry no instance labels or clusters.
    """
    rows = []
    for variant in variants:
        for K in Ks:
            pr, cov = [], []
            for model, bags in zip(models, bag_sets):
                sel = replace(model.selector, kmax=K, variant=variant)
                preps = [model.prepare(b, sel) for b in bags]
                z = model.predict_prepared(preps)
                yhat = np.where([p.n == 0 for p in preps], 0.5, _sigmoid_np(z))
                pr.append(metrics(yhat, [b.label for b in bags])["pr_auc"])
                cs = [signal_cluster_coverage(p.S, b.inst_label, b.cluster)
                      for p, b in zip(preps, bags)
                      if b.n and b.inst_label is not None and b.cluster is not None]
                cov.append(float(np.mean(cs)) if cs else float("nan"))
            rows.append({"variant": variant, "K": K,
                         "pr_auc_mean": float(np.mean(pr)), "pr_auc_std": _std(pr),
                         "coverage_mean": float(np.mean(cov)), "coverage_std": _std(cov),
                         "seeds": len(models), "shared_checkpoint": int(shared)})
    return rows


def _std(v) -> float:
    return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0


def ablation_pools(cfg: DeskConfig, seed: int) -> list:
    return gen_synthetic(replace(cfg.synth, n_pairs=cfg.ablation_pairs,
                                 redundancy=cfg.ablation_redundancy, seed=seed * 1000 + 3))


def ablation(runs, cfg: DeskConfig = DeskConfig(), Ks=(32, 64), variants=VARIANTS) -> list:
    """Selector ablation on redundant pools, one pool set per seed.

    Uses each seed's K=64 stage-3 checkpoint for every configuration, so rows
    are flagged as sharing a checkpoint.
    """
    return ablation_table([r.model for r in runs], [ablation_pools(cfg, r.seed) for r in runs],
                          Ks, variants, shared=True)
