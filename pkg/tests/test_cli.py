import csv
import json

import pytest

from countprompt import cli, meta
from countprompt.prompt import DOMAINS

SMALL = {"bench.classes": ["apples", "birds"], "bench.repetitions": 1, "optim.iterations": 3,
         "methods": ["baseline", "count-only", "quota"], "workers": 1, "bench.unseen": False}


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps({**SMALL, "fixtures.dir": str(root / "fx"),
                               "output.dir": str(root / "out")}))
    assert cli.main(["fixtures", "--config", str(cfg)]) == 0
    assert cli.main(["calibrate", "--config", str(cfg)]) == 0
    return root, ["--config", str(cfg)]


def test_fixtures_checksums_repeat(env, capsys):
    root, args = env
    first = (root / "fx" / "vocab.npz").read_bytes()
    assert cli.main(["fixtures", *args]) == 0
    assert (root / "fx" / "vocab.npz").read_bytes() == first


def test_fixtures_clash_and_force(env, tmp_path, capsys):
    root, args = env
    fx = tmp_path / "a" / "b"
    assert cli.main(["fixtures", "--fixtures-dir", str(fx)]) == 0
    assert fx.is_dir()
    assert cli.main(["fixtures", "--fixtures-dir", str(fx), "--seed", "1"]) == 2
    assert "force" in capsys.readouterr().err
    assert cli.main(["fixtures", "--fixtures-dir", str(fx), "--seed", "1", "--force"]) == 0


def test_calibrate_prints_domain_table(env, capsys):
    _, args = env
    assert cli.main(["calibrate", *args]) == 0
    out = capsys.readouterr().out
    assert all(d in out for d in DOMAINS) and "held-out" in out


def test_corrupt_fixture_exit_2(env, tmp_path, capsys):
    root, _ = env
    fx = tmp_path / "fx"
    fx.mkdir()
    for f in (root / "fx").iterdir():
        (fx / f.name).write_bytes(f.read_bytes())
    (fx / "calibration.npz").write_bytes(b"garbage")
    assert cli.main(["eval", "--fold", "photo", "--method", "baseline", "--fixtures-dir", str(fx),
                     "--output-dir", str(tmp_path / "o")]) == 2


def test_unknown_config_key_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"optim.learning_rate": 0.1}))
    assert cli.main(["calibrate", "--config", str(p)]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_baseline_eval_without_checkpoint(env, capsys):
    root, args = env
    assert cli.main(["eval", *args, "--fold", "sketch", "--method", "baseline"]) == 0
    for ext in ("csv", "json", "svg"):
        assert (root / "out" / f"eval-baseline-sketch.{ext}").exists()


def test_eval_without_training_exit_2(env, capsys):
    _, args = env
    assert cli.main(["eval", *args, "--fold", "cartoon", "--method", "count-only"]) == 2


def test_train_eval_rerun_identical(env, capsys):
    root, args = env
    out = root / "out"
    blobs = []
    for _ in range(2):
        assert cli.main(["train", *args, "--fold", "painting"]) == 0
        assert cli.main(["eval", *args, "--fold", "painting", "--dump-images"]) == 0
        blobs.append((out / "eval-quota-painting.csv").read_bytes())
    assert blobs[0] == blobs[1]
    assert (out / "checkpoints" / "quota-painting.json").exists()
    assert len(list((out / "logs").glob("quota-painting.csv"))) == 1
    assert len(list((out / "images" / "quota-painting").glob("*.pgm"))) == 25
    rows = list(csv.DictReader(blobs[0].decode().splitlines()))
    assert len(rows) == 50 and {r["global_seed"] for r in rows} == {"0"}


def test_ablate_summaries(env, capsys):
    root, args = env
    assert cli.main(["ablate", *args]) == 0
    out = root / "out"
    for m in SMALL["methods"]:
        for d in DOMAINS:
            rec = json.loads((out / f"summary-{m}-{d}.json").read_text())
            assert rec["provenance"]["global_seed"] == 0
    assert (out / "ablation.svg").exists()
    with open(out / "per-quantity.csv") as fh:
        assert len(list(csv.reader(fh))) == 26


def test_numeric_failure_exit_3(env, monkeypatch, capsys):
    _, args = env

    def boom(*a, **kw):
        raise meta.NonFiniteLoss("5 consecutive non-finite iterations", {})

    monkeypatch.setattr(meta, "train", boom)
    assert cli.main(["train", *args, "--fold", "photo"]) == 3


def test_check_exit_codes(env, monkeypatch, capsys):
    _, args = env
    from countprompt import acceptance

    def fake(ok):
        return lambda ctx: [acceptance.CriterionResult(1, "x", ok, "", 0.0)]

    monkeypatch.setattr(acceptance, "run_all", fake(True))
    assert cli.main(["check", *args]) == 0
    monkeypatch.setattr(acceptance, "run_all", fake(False))
    assert cli.main(["check", *args]) == 4


def test_baseline_has_nothing_to_train(env, capsys):
    _, args = env
    assert cli.main(["train", *args, "--fold", "photo", "--method", "baseline"]) == 2
