"""Three-stage training and the budgeted bag-level pipeline.

Stage 1 fits the expensive teacher on candidate labels. Stage 2 distills a
cheap student from the frozen teacher. Stage 3 runs the budgeted forward
(cheap scan of every candidate, subset selection, expensive encoding of the
selected subset only, aggregation) and trains the aggregator, first with the
teacher frozen and then jointly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import checkpoint as ckpt
from . import numcore as nc
from .aggregator import AggConfig, Aggregator, pad_stack, tokenize
from .encoders import STUDENT_DEFAULT, TEACHER_DEFAULT, Encoder, EncoderConfig, Projection
from .losses import DistillConfig, LossConfig, bce_smoothed, distill_loss, focal_mix, kd_bernoulli
from .metrics import metrics
from .numcore import RngState, Tensor
from .selector import SelectorConfig, select, visible_pool_cap
from .seqscan import Bag

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class BudgetViolation(AssertionError):
    pass


@dataclass(frozen=True)
class StageConfig:
    stage: int = 3
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    clip: float = 5.0
    warmup_epochs: int = 5
    freeze: bool = False
    val_frac: float = 0.1
    pair_loss: str = "focal"  # focal | bce
    seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError("stage must be 1, 2 or 3")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("stage: epochs >= 0, batch_size >= 1, lr > 0")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("stage.warmup_epochs must lie in [0, epochs]")
        if not 0 <= self.momentum < 1 or not 0 < self.val_frac < 1:
            raise ValueError("stage: momentum in [0, 1), val_frac in (0, 1)")
        if self.pair_loss not in ("focal", "bce"):
            raise ValueError("stage.pair_loss must be focal or bce")


# -- optimization --------------------------------------------------------------

class SGD:
    """Gradient descent with heavy-ball momentum and optional global-norm clipping."""

    def __init__(self, params, lr: float, momentum: float = 0.9, clip: float | None = None):
        self.params = list(params)
        self.lr, self.momentum, self.clip = lr, momentum, clip
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if not math.isfinite(norm):
            raise nc.NumericalError("non-finite gradient norm")
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        for p, g, v in zip(self.params, grads, self.velocity):
            v *= self.momentum
            v += scale * g
            p.data -= self.lr * v
        return norm


def split_indices(n: int, val_frac: float, rng: np.random.Generator) -> tuple:
    perm = rng.permutation(n)
    nval = max(1, int(round(val_frac * n))) if n > 1 else 0
    return np.sort(perm[nval:]), np.sort(perm[:nval])


def _check_loss(loss: Tensor, where: str) -> float:
    v = loss.item()
    if not math.isfinite(v):
        raise nc.NumericalError(f"{where}: non-finite loss {v}")
    return v


def _row(epoch: int, split: str, loss: float, m: dict) -> dict:
    return {"epoch": epoch, "split": split, "loss": loss,
            **{k: m[k] for k in ("pr_auc", "f1_05", "acc", "prec", "rec", "spec", "npv", "f1_best")}}


# -- stage 1 and 2 ----------------------------------------------------------------

@dataclass
class StageResult:
    state: dict
    log: list
    best_epoch: int
    extra: dict = field(default_factory=dict)


def run_stage1(cfg: StageConfig, x, u, y, teacher_cfg: EncoderConfig = TEACHER_DEFAULT,
               loss_cfg: LossConfig = LossConfig()) -> tuple:
    """Fit the teacher on candidate-level labels. Returns (encoder, StageResult)."""
    rs = RngState(cfg.seed)
    teacher = Encoder(teacher_cfg, rs)
    y = np.asarray(y)
    g = rs.child("stage1").generator()
    tr, va = split_indices(len(y), cfg.val_frac, g)
    opt = SGD(teacher.params.values(), cfg.lr, cfg.momentum, cfg.clip)
    rows, best = [], (-1.0, -1, teacher.state())
    for ep in range(cfg.epochs):
        order = tr[g.permutation(len(tr))]
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            opt.zero_grad()
            _, z = teacher.forward(x[b], u[b])
            loss = focal_mix(z, y[b], loss_cfg)
            losses.append(_check_loss(loss, "stage 1"))
            loss.backward()
            opt.step()
        _, zv = teacher.encode(x[va], u[va])
        m = metrics(nc._sigmoid_np(zv), y[va])
        rows.append(_row(ep, "val", float(np.mean(losses)), m))
        if m["pr_auc"] > best[0]:
            best = (m["pr_auc"], ep, teacher.state())
    if cfg.epochs:
        teacher.load_state(best[2])
    return teacher, StageResult(teacher.state(), rows, best[1])


def run_stage2(cfg: StageConfig, teacher: Encoder, x, u, y,
               student_cfg: EncoderConfig = STUDENT_DEFAULT,
               distill_cfg: DistillConfig = DistillConfig(),
               loss_cfg: LossConfig = LossConfig()) -> tuple:
    """Distill the student from the frozen teacher. Returns (student, projection, StageResult)."""
    if teacher is None:
        raise TrainingError("stage 2 needs a stage-1 teacher")
    rs = RngState(cfg.seed)
    student = Encoder(student_cfg, rs)
    proj = Projection(student_cfg.d, teacher.d, rs)
    y = np.asarray(y)
    ht, zt = teacher.encode(x, u)
    g = rs.child("stage2").generator()
    tr, va = split_indices(len(y), cfg.val_frac, g)
    params = list(student.params.values()) + list(proj.params.values())
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.clip)
    steps_per_epoch = max(1, math.ceil(len(tr) / cfg.batch_size))
    total = max(1, cfg.epochs * steps_per_epoch - 1)
    rows, best, step = [], (-1.0, -1, None), 0
    for ep in range(cfg.epochs + 1):
        if ep:
            order = tr[g.permutation(len(tr))]
            losses = []
            for s in range(0, len(order), cfg.batch_size):
                b = order[s:s + cfg.batch_size]
                opt.zero_grad()
                hs, zs = student.forward(x[b], u[b])
                parts = distill_loss(hs, zs, ht[b], zt[b], y[b], step / total, proj,
                                     distill_cfg, loss_cfg)
                losses.append(_check_loss(parts.total, "stage 2"))
                parts.total.backward()
                opt.step()
                step += 1
            train_loss = float(np.mean(losses))
        else:
            train_loss = math.nan
        hv, zv = student.encode(x[va], u[va])
        with nc.no_grad():
            kd = kd_bernoulli(zv, zt[va], distill_cfg.temperature).item()
        m = metrics(nc._sigmoid_np(zv), y[va])
        rows.append({**_row(ep, "val", train_loss, m), "kd": kd})
        if ep and m["pr_auc"] > best[0]:
            best = (m["pr_auc"], ep, (student.state(), proj.state()))
    if best[2] is not None:
        student.load_state(best[2][0])
        proj.load_state(best[2][1])
    state = {**ckpt.prefixed("student", student.state()), **ckpt.prefixed("proj", proj.state())}
    return student, proj, StageResult(state, rows, best[1])


# -- budgeted pipeline --------------------------------------------------------------

@dataclass
class BudgetAudit:
    records: list = field(default_factory=list)
    violations: int = 0

    def record(self, pair_id: str, n: int, kmax: int, size: int, calls: int) -> None:
        ok = calls == size and size <= min(kmax, n)
        self.records.append((pair_id, n, size, calls))
        if not ok:
            self.violations += 1
            raise BudgetViolation(
                f"{pair_id}: expensive encoder called {calls} times for |S|={size} (n={n}, kmax={kmax})")


@dataclass
class Prepared:
    """One bag after cheap scan and selection, with cached teacher tokens."""

    pair_id: str
    label: int | None
    n: int
    S: np.ndarray
    tokens: np.ndarray | None = None  # [|S|, d_tok], teacher frozen
    z_cheap: np.ndarray | None = None
    h_cheap: np.ndarray | None = None


class BRMIL:
    """Teacher, student, projection, and aggregator plus the selection policy."""

    def __init__(self, teacher: Encoder, student: Encoder, agg: Aggregator,
                 selector: SelectorConfig = SelectorConfig(), proj: Projection | None = None):
        self.teacher, self.student, self.agg, self.selector = teacher, student, agg, selector
        self.proj = proj
        self.audit = BudgetAudit()

    @classmethod
    def build(cls, teacher: Encoder, student: Encoder, selector: SelectorConfig = SelectorConfig(),
              agg_cfg: AggConfig | None = None, seed: int = 0, proj=None) -> "BRMIL":
        agg_cfg = agg_cfg or AggConfig(d_tok=teacher.d + 3)
        if agg_cfg.d_tok != teacher.d + 3:
            agg_cfg = replace(agg_cfg, d_tok=teacher.d + 3)
        return cls(teacher, student, Aggregator(agg_cfg, RngState(seed)), selector, proj)

    # cheap scan -> select -> expensive encode on S -> tokens
    def cheap_scan(self, bag: Bag) -> tuple:
        return self.student.encode(bag.x, bag.u)

    def select(self, bag: Bag, cheap=None, selector: SelectorConfig | None = None):
        h, z = cheap if cheap is not None else self.cheap_scan(bag)
        return select(selector or self.selector, z, h, bag.p)

    def expensive_tokens(self, bag: Bag, S: np.ndarray, grad: bool = False, kmax: int | None = None):
        """Teacher-encode exactly the selected candidates; audited."""
        before = self.teacher.calls
        if grad:
            h, z = self.teacher.forward(bag.x[S], bag.u[S])
        else:
            h, z = self.teacher.encode(bag.x[S], bag.u[S])
        self.audit.record(bag.pair_id, bag.n, kmax or self.selector.kmax, len(S), self.teacher.calls - before)
        return tokenize(h, z, bag.s_esa[S], bag.p[S])

    def prepare(self, bag: Bag, selector: SelectorConfig | None = None, tokens: bool = True,
                keep_cheap: bool = False, cheap=None, n_cap: int | None = None) -> Prepared:
        """Cheap scan, selection, and (optionally) teacher tokens for one bag.

        ``n_cap`` restricts the selector to the n_cap highest-scoring
        candidates; returned indices always refer to the full bag.
        """
        if bag.n == 0:
            return Prepared(bag.pair_id, bag.label, 0, np.zeros(0, dtype=np.int64))
        cheap = cheap if cheap is not None else self.cheap_scan(bag)
        if n_cap is not None and n_cap < bag.n:
            h, z = cheap
            zc, hc, pc, keep = visible_pool_cap(z, h, bag.p, n_cap)
            res = select(selector or self.selector, zc, hc, pc)
            S = keep[res.S]
        else:
            S = self.select(bag, cheap, selector).S
        prep = Prepared(bag.pair_id, bag.label, bag.n, S)
        if tokens:
            prep.tokens = self.expensive_tokens(bag, S, kmax=(selector or self.selector).kmax).data
        if keep_cheap:
            prep.h_cheap, prep.z_cheap = cheap
        return prep

    def predict_prepared(self, preps: list, K: int | None = None, batch: int = 32) -> np.ndarray:
        """Pair logits for prepared bags; K keeps the first K selected tokens. Empty bags -> 0."""
        out = np.zeros(len(preps))
        live = [i for i, p in enumerate(preps) if p.n > 0]
        live.sort(key=lambda i: len(preps[i].S))
        for s in range(0, len(live), batch):
            idx = live[s:s + batch]
            toks = [preps[i].tokens if K is None else preps[i].tokens[:K] for i in idx]
            L = max(len(t) for t in toks)
            arr = np.zeros((len(idx), L, toks[0].shape[1]))
            mask = np.zeros((len(idx), L), dtype=bool)
            for j, t in enumerate(toks):
                arr[j, :len(t)] = t
                mask[j, :len(t)] = True
            with nc.no_grad():
                out[idx] = self.agg.forward(arr, mask).data
        return out

    def infer(self, bags: list) -> list:
        """Per bag: n, K, |S|, z_pair, Y_hat, empty flag (empty bags give 0.5)."""
        rows = []
        for bag in bags:
            prep = self.prepare(bag)
            if prep.n == 0:
                rows.append({"pair_id": bag.pair_id, "n": 0, "K": 0, "S": 0,
                             "z_pair": 0.0, "y_hat": 0.5, "empty": 1})
                continue
            z = float(self.predict_prepared([prep])[0])
            rows.append({"pair_id": bag.pair_id, "n": bag.n, "K": min(self.selector.kmax, bag.n),
                         "S": len(prep.S), "z_pair": z,
                         "y_hat": float(nc._sigmoid_np(np.array([z]))[0]), "empty": 0})
        return rows

    # -- persistence -------------------------------------------------------------
    def state(self) -> dict:
        st = {**ckpt.prefixed("teacher", self.teacher.state()),
              **ckpt.prefixed("student", self.student.state()),
              **ckpt.prefixed("agg", self.agg.state())}
        if self.proj is not None:
            st.update(ckpt.prefixed("proj", self.proj.state()))
        return st

    def meta(self) -> dict:
        return {"kind": "brmil", "teacher": self.teacher.config_dict(),
                "student": self.student.config_dict(), "aggregator": self.agg.config_dict(),
                "selector": asdict(self.selector)}

    def save(self, path, extra: dict | None = None) -> None:
        ckpt.save(path, self.state(), {**self.meta(), **(extra or {})})

    @classmethod
    def load(cls, path, selector: SelectorConfig | None = None) -> "BRMIL":
        tensors, meta = ckpt.load(path)
        if meta.get("kind") != "brmil":
            raise ckpt.CheckpointError(f"{path}: not a full pipeline checkpoint")
        teacher = Encoder(EncoderConfig(**meta["teacher"]))
        teacher.load_state(ckpt.unprefixed("teacher", tensors))
        student = Encoder(EncoderConfig(**meta["student"]))
        student.load_state(ckpt.unprefixed("student", tensors))
        agg = Aggregator(AggConfig(**meta["aggregator"]))
        agg.load_state(ckpt.unprefixed("agg", tensors))
        proj = None
        if any(k.startswith("proj.") for k in tensors):
            ps = ckpt.unprefixed("proj", tensors)
            proj = Projection(*ps["w"].shape)
            proj.load_state(ps)
        return cls(teacher, student, agg, selector or SelectorConfig(**meta["selector"]), proj)


def save_encoder(path, enc: Encoder, prefix: str, extra_state: dict | None = None, meta=None) -> None:
    st = ckpt.prefixed(prefix, enc.state())
    st.update(extra_state or {})
    ckpt.save(path, st, {"kind": prefix, prefix: enc.config_dict(), **(meta or {})})


def load_encoder(path, prefix: str) -> tuple:
    tensors, meta = ckpt.load(path)
    if prefix not in meta:
        raise ckpt.CheckpointError(f"{path}: no {prefix} encoder in checkpoint")
    enc = Encoder(EncoderConfig(**meta[prefix]))
    enc.load_state(ckpt.unprefixed(prefix, tensors))
    return enc, tensors, meta


# -- stage 3 --------------------------------------------------------------------------

def _pair_loss(cfg: StageConfig, loss_cfg: LossConfig):
    return focal_mix if cfg.pair_loss == "focal" else bce_smoothed


def _batches(order_sizes: list, batch: int, g: np.random.Generator) -> list:
    """Bucket items of similar size together, then shuffle the batch order."""
    idx = sorted(range(len(order_sizes)), key=lambda i: (order_sizes[i], i))
    chunks = [idx[s:s + batch] for s in range(0, len(idx), batch)]
    return [chunks[i] for i in g.permutation(len(chunks))]


def run_stage3(cfg: StageConfig, model: BRMIL, bags: list, val_bags: list | None = None,
               loss_cfg: LossConfig = LossConfig(), preps: list | None = None,
               val_preps: list | None = None) -> StageResult:
    """Warmup (teacher frozen, aggregator only) then joint fine-tuning.

    ``preps``/``val_preps`` may carry cached selections and teacher tokens
    from ``model.prepare``; they are rebuilt after any teacher update.
    """
    if model.teacher is None or model.student is None:
        raise TrainingError("stage 3 needs stage-1 and stage-2 checkpoints")
    g = RngState(cfg.seed).child("stage3").generator()
    if val_bags is None:
        tr, va = split_indices(len(bags), cfg.val_frac, g)
        val_bags = [bags[i] for i in va]
        bags = [bags[i] for i in tr]
        if preps is not None:
            preps, val_preps = [preps[i] for i in tr], [preps[i] for i in va]
    bags = [b for b in bags if b.n > 0 and b.label is not None]
    by_id = {b.pair_id: b for b in bags}
    preps = [p for p in (preps or [model.prepare(b) for b in bags]) if p.pair_id in by_id]
    val_preps = val_preps or [model.prepare(b) for b in val_bags]
    yv = np.array([b.label for b in val_bags])
    lossf = _pair_loss(cfg, loss_cfg)
    teacher_before = model.teacher.state()
    agg_opt = SGD(model.agg.params.values(), cfg.lr, cfg.momentum, cfg.clip)
    joint_opt = None
    rows, best = [], (-1.0, -1, None)
    sizes = [len(p.S) for p in preps]
    for ep in range(cfg.epochs):
        joint = ep >= cfg.warmup_epochs and not cfg.freeze
        if joint and joint_opt is None:
            params = list(model.agg.params.values()) + list(model.teacher.params.values())
            joint_opt = SGD(params, cfg.lr, cfg.momentum, cfg.clip)
            joint_opt.velocity[:len(agg_opt.velocity)] = agg_opt.velocity
        opt = joint_opt if joint else agg_opt
        losses = []
        for chunk in _batches(sizes, cfg.batch_size, g):
            opt.zero_grad()
            y = np.array([preps[i].label for i in chunk], dtype=np.float64)
            if joint:
                toks = [model.expensive_tokens(by_id[preps[i].pair_id], preps[i].S, grad=True)
                        for i in chunk]
                tokens, mask = pad_stack(toks)
            else:
                L = max(sizes[i] for i in chunk)
                tokens = np.zeros((len(chunk), L, preps[chunk[0]].tokens.shape[1]))
                mask = np.zeros((len(chunk), L), dtype=bool)
                for j, i in enumerate(chunk):
                    tokens[j, :sizes[i]] = preps[i].tokens
                    mask[j, :sizes[i]] = True
            z = model.agg.forward(tokens, mask)
            loss = lossf(z, y, loss_cfg)
            losses.append(_check_loss(loss, "stage 3"))
            loss.backward()
            opt.step()
        if joint:
            # teacher moved: refresh cached tokens for both splits
            preps = [model.prepare(by_id[p.pair_id]) for p in preps]
            val_preps = [model.prepare(b) for b in val_bags]
        zv = model.predict_prepared(val_preps)
        m = metrics(nc._sigmoid_np(zv), yv)
        rows.append({**_row(ep, "val", float(np.mean(losses)), m), "joint": int(joint)})
        if m["pr_auc"] > best[0] or best[2] is None:
            best = (m["pr_auc"], ep, (model.agg.state(), model.teacher.state()))
        log.info("stage3 epoch %d loss %.4f val pr_auc %.4f", ep, rows[-1]["loss"], m["pr_auc"])
    if best[2] is not None:
        model.agg.load_state(best[2][0])
        model.teacher.load_state(best[2][1])
    extra = {"teacher_unchanged": all(np.array_equal(teacher_before[k], v)
                                      for k, v in model.teacher.state().items())}
    return StageResult(model.state(), rows, best[1], extra)


# -- baselines and evaluation ----------------------------------------------------------

def maxpool_predict(teacher: Encoder, bags: list) -> np.ndarray:
    """Expensive encoder over every candidate, pair score = sigmoid(max logit)."""
    out = np.full(len(bags), 0.5)
    for i, bag in enumerate(bags):
        if bag.n:
            _, z = teacher.encode(bag.x, bag.u)
            out[i] = nc._sigmoid_np(np.array([z.max()]))[0]
    return out


def evaluate(model: BRMIL, bags: list, preps: list | None = None, K: int | None = None) -> dict:
    preps = preps or [model.prepare(b) for b in bags]
    z = model.predict_prepared(preps, K)
    yhat = np.where([p.n == 0 for p in preps], 0.5, nc._sigmoid_np(z))
    return {"y_hat": yhat, **metrics(yhat, [b.label for b in bags])}
