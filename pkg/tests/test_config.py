import pytest

from brmil.config import ConfigError, build, dump, load, parse_lines, with_seed


def test_defaults():
    cfg = load()
    assert cfg.selector.kmax == 64 and cfg.teacher.d == 384 and cfg.student.d == 64
    assert cfg.stage3.warmup_epochs == 5 and cfg.seed == 0


def test_file_and_overrides(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nselector.kmax = 32   # trailing\n\nbench.Ks = 8, 16\nseed=7\nselector.variant=S1\n")
    cfg = load(f, ["selector.kmax=16", "loss.gamma = 0"])
    assert cfg.selector.kmax == 16 and cfg.selector.variant == "S1"
    assert cfg.bench.Ks == (8, 16) and cfg.seed == 7 and cfg.loss.gamma == 0.0


def test_bool_and_paths():
    cfg = build([("stage3.freeze", "yes", ""), ("paths.bags", "a.bags", "")])
    assert cfg.stage3.freeze is True and cfg.paths == {"bags": "a.bags"}


@pytest.mark.parametrize("line,msg", [
    ("selector.kmax = abc", "selector.kmax: expected int, got 'abc'"),
    ("nothing here", "expected 'key = value'"),
    ("kmax = 3", "unknown key 'kmax'"),
    ("bogus.kmax = 3", "unknown section 'bogus'"),
    ("selector.nope = 3", "unknown key 'selector.nope'"),
    ("stage1.stage = 2", "unknown key 'stage1.stage'"),
    ("selector.rho = 2", "selector.rho must lie in [0, 1]"),
    ("stage3.warmup_epochs = 50", "stage3: "),
])
def test_errors_name_the_key_and_line(tmp_path, line, msg):
    f = tmp_path / "bad.cfg"
    f.write_text("seed = 1\n" + line + "\n")
    with pytest.raises(ConfigError) as exc:
        load(f)
    assert msg in str(exc.value)
    if "expected" in msg or "unknown" in msg:
        assert "bad.cfg:2" in str(exc.value)


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read config"):
        load("/nonexistent/x.cfg")


def test_bad_override():
    with pytest.raises(ConfigError, match="expected key=value"):
        load(None, ["selector.kmax"])


def test_dump_round_trip():
    cfg = load(None, ["selector.kmax=12", "bench.Ks=4,8", "seed=3"])
    again = build(parse_lines(dump(cfg).splitlines()))
    assert again.items() == cfg.items()


def test_with_seed_threads_stochastic_sections():
    cfg = with_seed(load(), 2025)
    assert cfg.seed == 2025
    assert {cfg.stage1.seed, cfg.stage2.seed, cfg.stage3.seed, cfg.bench.seed, cfg.synth.seed} == {2025}
    assert cfg.selector.simhash_seed == 0
