import numpy as np
import pytest

from brmil import numcore as nc
from brmil.aggregator import AggConfig, pad_stack
from brmil.encoders import Encoder, EncoderConfig
from brmil.losses import focal_mix
from brmil.selector import SelectorConfig
from brmil.synth import SynthSpec, gen_synthetic, instance_set
from brmil.training import (BRMIL, SGD, BudgetAudit, BudgetViolation, StageConfig, TrainingError, evaluate,
                            maxpool_predict, run_stage1, run_stage2, run_stage3)

TEACHER = EncoderConfig("teacher", d=8, conv1=4, conv2=4, hidden=8)
STUDENT = EncoderConfig("student", d=4, conv1=4)
AGG = AggConfig(d_tok=11, width=8, heads=2, depth=1, ff=16)


@pytest.fixture(scope="module")
def bags():
    return gen_synthetic(SynthSpec(n_pairs=40, pool_median=24, pool_sigma=0.3, seed=5))


@pytest.fixture(scope="module")
def items(bags):
    return instance_set(bags, np.random.default_rng(0), 2.0)


def tiny_model(kmax=8, seed=0):
    return BRMIL.build(Encoder(TEACHER, seed), Encoder(STUDENT, seed), SelectorConfig(kmax=kmax), AGG, seed=seed)


def test_stage1_logs_are_deterministic(items):
    cfg = StageConfig(stage=1, epochs=2, warmup_epochs=0, seed=3)
    _, a = run_stage1(cfg, *items, teacher_cfg=TEACHER)
    _, b = run_stage1(cfg, *items, teacher_cfg=TEACHER)
    assert a.log == b.log and len(a.log) == 2
    assert all(np.array_equal(a.state[k], b.state[k]) for k in a.state)


def test_stage2_needs_teacher(items):
    with pytest.raises(TrainingError):
        run_stage2(StageConfig(stage=2, warmup_epochs=0), None, *items)


def test_stage2_kd_drops_by_half(items):
    teacher, _ = run_stage1(StageConfig(stage=1, epochs=4, warmup_epochs=0, lr=0.1), *items, teacher_cfg=TEACHER)
    _, _, res = run_stage2(StageConfig(stage=2, epochs=8, warmup_epochs=0, lr=0.1), teacher, *items,
                           student_cfg=STUDENT)
    kd = [r["kd"] for r in res.log]
    assert min(kd[1:]) <= 0.5 * kd[0]
    assert any(k.startswith("proj.") for k in res.state)


def test_stage3_frozen_teacher_bit_identical(bags):
    model = tiny_model()
    before = {k: v.copy() for k, v in model.teacher.state().items()}
    res = run_stage3(StageConfig(epochs=2, warmup_epochs=2, seed=1), model, bags)
    assert res.extra["teacher_unchanged"]
    assert all(before[k].tobytes() == v.tobytes() for k, v in model.teacher.state().items())
    frozen = tiny_model()
    res = run_stage3(StageConfig(epochs=2, warmup_epochs=0, freeze=True), frozen, bags)
    assert res.extra["teacher_unchanged"]


def test_joint_phase_reaches_teacher(bags):
    model = tiny_model()
    live = [b for b in bags if b.n][:4]
    toks = [model.expensive_tokens(b, model.prepare(b, tokens=False).S, grad=True) for b in live]
    tokens, mask = pad_stack(toks)
    loss = focal_mix(model.agg.forward(tokens, mask), np.array([b.label for b in live]))
    loss.backward()
    norms = [float(np.linalg.norm(p.grad)) for p in model.teacher.params.values() if p.grad is not None]
    assert norms and max(norms) > 0


def test_joint_stage3_moves_teacher(bags):
    model = tiny_model()
    res = run_stage3(StageConfig(epochs=2, warmup_epochs=1, seed=2), model, bags)
    assert [r["joint"] for r in res.log] == [0, 1]


def test_overfit_small_set():
    # sanity run: a teacher that separates motif windows, then 32 pairs memorized by the aggregator
    bags = gen_synthetic(SynthSpec(n_pairs=200, pool_median=8, pool_sigma=0.3, rule="single", k=1, m_types=2,
                                   seed=5))
    x, u, y = instance_set(bags, np.random.default_rng(0), 2.0)
    teacher, _ = run_stage1(StageConfig(stage=1, epochs=30, warmup_epochs=0, lr=0.1), x, u, y, teacher_cfg=TEACHER)
    model = BRMIL.build(teacher, Encoder(STUDENT, 1), SelectorConfig(kmax=16), AGG, seed=1)
    train = bags[:32]
    res = run_stage3(StageConfig(epochs=200, warmup_epochs=200, lr=0.05, batch_size=32, seed=0), model, train,
                     val_bags=train)
    assert min(r["loss"] for r in res.log) < 0.05


def test_budget_audit_counts_teacher_calls(bags):
    model = tiny_model(kmax=8)
    for bag in bags:
        before = model.teacher.calls
        prep = model.prepare(bag)
        assert model.teacher.calls - before == len(prep.S) <= min(8, bag.n)
    assert model.audit.violations == 0 and len(model.audit.records) == sum(1 for b in bags if b.n)
    audit = BudgetAudit()
    with pytest.raises(BudgetViolation):
        audit.record("p", n=100, kmax=8, size=8, calls=9)


def test_infer_empty_bag(bags):
    model = tiny_model()
    empty = bags[0].subset([])
    rows = model.infer([empty, bags[1]])
    assert rows[0]["y_hat"] == 0.5 and rows[0]["empty"] == 1
    assert rows[1]["S"] == min(8, bags[1].n) and rows[1]["empty"] == 0


def test_prepare_with_cap_returns_full_indices(bags):
    model = tiny_model(kmax=4)
    bag = max(bags, key=lambda b: b.n)
    prep = model.prepare(bag, n_cap=6, tokens=False)
    h, z = model.cheap_scan(bag)
    top6 = set(np.argsort(-z, kind="stable")[:6].tolist())
    assert set(prep.S.tolist()) <= top6 and len(prep.S) == 4


def test_evaluate_and_maxpool(bags):
    model = tiny_model()
    out = evaluate(model, bags)
    assert len(out["y_hat"]) == len(bags) and 0 <= out["pr_auc"] <= 1
    mp = maxpool_predict(model.teacher, bags)
    assert mp.shape == (len(bags),) and np.all((mp > 0) & (mp < 1))


def test_checkpoint_round_trip(bags, tmp_path):
    model = tiny_model()
    path = tmp_path / "m.npz"
    model.save(path)
    again = BRMIL.load(path)
    a = [r["z_pair"] for r in model.infer(bags[:5])]
    b = [r["z_pair"] for r in again.infer(bags[:5])]
    assert a == b


def test_sgd_clipping():
    p = nc.parameter(np.zeros(2), "p")
    p.grad = np.array([30.0, 40.0])
    opt = SGD([p], lr=1.0, momentum=0.0, clip=5.0)
    assert opt.step() == pytest.approx(50.0)
    np.testing.assert_allclose(p.data, [-3.0, -4.0])


def test_stage_config_validation():
    with pytest.raises(ValueError):
        StageConfig(epochs=2, warmup_epochs=3)
    with pytest.raises(ValueError):
        StageConfig(stage=4)
