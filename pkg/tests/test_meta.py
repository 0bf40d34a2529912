import numpy as np
import pytest

from countprompt import acceptance
from countprompt import autodiff as ad
from countprompt import meta
from countprompt.meta import DomainSplit, OptimConfig, Task
from countprompt.prompt import DOMAINS, PromptSpec, init_tokens

FOLD = ("painting", "cartoon", "sketch")


@pytest.fixture(scope="module")
def trained(pipe):
    return meta.train(pipe, FOLD, OptimConfig())


def test_counting_loss_examples():
    assert meta.counting_loss(4.0, 4) <= 1e-6
    assert meta.counting_loss(7.0, 4) == pytest.approx(3.0, abs=1e-9)
    t = ad.Tape()
    c = t.leaf(7.0)
    assert ad.backward(meta.counting_loss_graph(c, 4))[c] > 0
    c2 = t.leaf(1.0)
    assert ad.backward(meta.counting_loss_graph(c2, 4))[c2] < 0


def test_semantic_loss_examples():
    assert meta.semantic_loss(1.0) == 0.0
    assert meta.semantic_loss(0.0) == 1.0
    assert meta.semantic_loss(0.3, "literal") == 0.3


def test_total_loss():
    assert meta.total_loss([2, 3, 1], [0.1, 0.2, 0.1], 5) == pytest.approx(8.0)
    assert meta.total_loss([2, 3, 1], [0.1, 0.2, 0.1], 0) == 6
    assert meta.total_loss([2], [0.5], 5) == 4.5
    with pytest.raises(ValueError):
        meta.total_loss([], [], 5)


def test_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(inner_lr=0)
    with pytest.raises(ValueError):
        OptimConfig(inner_steps=-1)
    with pytest.raises(ValueError):
        OptimConfig(iterations=0)
    with pytest.raises(ValueError):
        OptimConfig(mode="third-order")
    OptimConfig(inner_steps=0)


def test_domain_split_validation():
    DomainSplit(("photo", "painting"), "cartoon", "sketch")
    with pytest.raises(ValueError):
        DomainSplit(("photo", "cartoon"), "cartoon", "sketch")
    with pytest.raises(ValueError):
        DomainSplit(("photo", "painting"), "cartoon", "photo")


def _quadratic(t, v):
    return ad.sum(v["x"] * v["x"])


def test_inner_adapt_zero_steps_is_identity():
    phi = np.array([0.3, -1.0])
    assert np.array_equal(meta.inner_adapt(_quadratic, ("x",), phi, 0.01, 0, 10.0).final, phi)


def test_inner_adapt_analytic_step():
    traj = meta.inner_adapt(_quadratic, ("x",), np.array([1.0]), 0.01, 1, 10.0)
    assert traj.final[0] == pytest.approx(0.98, abs=1e-15)


def test_inner_adapt_descends_on_quadratic():
    a = np.array([[3.0, 0.5], [0.5, 1.0]])

    def obj(t, v):
        return ad.dot(v["x"], t.const(a) @ v["x"])

    traj = meta.inner_adapt(obj, ("x",), np.array([1.0, -2.0]), 0.1, 10, 1e9)
    losses = traj.losses + [meta.value_and_grad(obj, ("x",), traj.final)[0]]
    assert np.all(np.diff(losses) < 0)


def test_semantic_probe_descends():
    rng = np.random.default_rng(0)
    target = rng.standard_normal(8)
    off = rng.standard_normal(8)
    off -= (off @ target) / (target @ target) * target

    def obj(t, v):
        return 1.0 - ad.cosine(t.const(target + off) + v["x"], t.const(target))

    traj = meta.inner_adapt(obj, ("x",), np.zeros(8), 0.5, 5, 10.0)
    assert np.all(np.diff(traj.losses) < 0)


def test_inner_descent_statistic(pipe):
    cfg = OptimConfig()
    rng = np.random.default_rng(2024)
    tokens = init_tokens(0)
    wins = 0
    for _ in range(100):
        tasks = [meta.sample_task(rng, d) for d in FOLD[:2]]
        obj = meta.summed_objective(tasks, pipe, cfg)
        traj = meta.inner_adapt(obj, tokens.names(), tokens.flat(), cfg.inner_lr, cfg.inner_steps, cfg.clip)
        wins += meta.value_and_grad(obj, tokens.names(), traj.final)[0] <= traj.losses[0]
    assert wins >= 90


def test_first_and_second_order_equal_at_zero_steps(pipe):
    rng = np.random.default_rng(5)
    inner = meta.summed_objective([meta.sample_task(rng, "photo")], pipe, OptimConfig())
    outer = meta.summed_objective([meta.sample_task(rng, "cartoon")], pipe, OptimConfig())
    t = init_tokens(1)
    a = meta.hypergradient(inner, outer, t.names(), t.flat(), 0.01, 0, 10.0, "first-order")[1]
    b = meta.hypergradient(inner, outer, t.names(), t.flat(), 0.01, 0, 10.0, "second-order")[1]
    assert np.array_equal(a, b)


def test_quadratic_hypergradient():
    hg, fd = acceptance.quadratic_probe(0.1, 0.0, 1)
    assert hg == pytest.approx(-1.6, abs=1e-12)
    assert abs(hg - fd) < 1e-6


def test_clip_jvp_matches_fd():
    rng = np.random.default_rng(0)
    g = 20 * rng.standard_normal(5)
    v = rng.standard_normal(5)
    h = 1e-6
    fd = (meta.clip_grad(g + h * v, 10.0) - meta.clip_grad(g - h * v, 10.0)) / (2 * h)
    np.testing.assert_allclose(meta.clip_jvp(g, 10.0, v), fd, atol=1e-8)


def test_pipeline_hypergradient_fd(pipe):
    assert acceptance.pipeline_hypergradient_error(pipe, OptimConfig()) < 1e-3


def test_outer_photo_after_three_domain_adaptation(pipe):
    cfg = OptimConfig()
    rng = np.random.default_rng(7)
    inner = meta.summed_objective([meta.sample_task(rng, d) for d in FOLD], pipe, cfg)
    outer = meta.summed_objective([meta.sample_task(rng, "photo")], pipe, cfg)
    t = init_tokens(3)
    loss, hg, _ = meta.hypergradient(inner, outer, t.names(), t.flat(), cfg.inner_lr, 2, cfg.clip,
                                     "second-order")

    def f(x):
        return meta.value_and_grad(outer, t.names(),
                                   meta.inner_adapt(inner, t.names(), x, cfg.inner_lr, 2, cfg.clip).final)[0]

    fd = ad.finite_difference(f, t.flat())
    assert np.isfinite(loss)
    assert np.max(np.abs(hg - fd) / (np.abs(fd) + 1e-8)) < 1e-3


def test_inner_and_outer_loss_contracts(pipe):
    cfg = OptimConfig()
    split = DomainSplit(("painting", "cartoon"), "sketch", "photo")
    tasks = [Task("painting", "apples", 4, 1), Task("cartoon", "birds", 9, 2)]
    theta = init_tokens(0)
    total = meta.inner_loss(theta, split, tasks, pipe, cfg)
    parts = [meta.inner_loss(theta, DomainSplit((t.domain,), "sketch", "photo"), [t], pipe, cfg)
             for t in tasks]
    assert total == pytest.approx(sum(parts), rel=1e-12)
    test = Task("sketch", "sheep", 3, 3)
    assert meta.outer_loss(theta, split, test, pipe, cfg) == pytest.approx(
        meta.inner_loss(theta, DomainSplit(("sketch",), "photo", "painting"), [test], pipe, cfg))
    with pytest.raises(ValueError):
        meta.outer_loss(theta, split, tasks[0], pipe, cfg)
    with pytest.raises(ValueError):
        meta.inner_loss(theta, split, tasks[:1], pipe, cfg)


def test_lambda_zero_is_counting_only(pipe):
    task = Task("photo", "apples", 6, 11)
    t = ad.Tape()
    toks = {n: t.leaf(getattr(init_tokens(0), n)) for n in ("e_count", "e_style")}
    _, lc, _ = meta.task_loss_graph(t, toks, task, pipe, OptimConfig())
    got = meta.inner_loss(init_tokens(0), DomainSplit(("photo",), "cartoon", "sketch"), [task], pipe,
                          OptimConfig(lam=0.0))
    assert got == pytest.approx(float(lc.value), rel=1e-12)


def test_lambda_sweep_semantic_share(pipe):
    task = Task("sketch", "sheep", 12, 4)
    shares = []
    for lam in (0.1, 5.0, 100.0):
        t = ad.Tape()
        toks = {n: t.leaf(getattr(init_tokens(0), n)) for n in ("e_count", "e_style")}
        total, lc, ls = meta.task_loss_graph(t, toks, task, pipe, OptimConfig(lam=lam))
        shares.append(lam * float(ls.value) / float(total.value))
    assert shares[0] < shares[1] < shares[2]
    assert shares[2] > 0.5


def test_train_counters_and_schedule(pipe, trained):
    assert trained.outer_updates == 30 and trained.inner_steps == 90
    assert trained.skipped == 0
    assert set(trained.schedule) == set(FOLD)
    assert trained.held_out == "photo"


def test_train_deterministic(pipe, trained):
    again = meta.train(pipe, FOLD, OptimConfig())
    assert np.array_equal(again.phi.flat(), trained.phi.flat())
    assert again.log == trained.log


def test_train_rejects_bad_folds(pipe):
    with pytest.raises(ValueError):
        meta.train(pipe, ("photo",), OptimConfig(iterations=1))
    with pytest.raises(ValueError):
        meta.train(pipe, ("photo", "photo"), OptimConfig(iterations=1))


def test_held_out_never_generated(pipe, monkeypatch):
    seen = []
    real = meta.generate_graph

    def spy(tape, spec, *a, **kw):
        seen.append(spec.domain)
        return real(tape, spec, *a, **kw)

    monkeypatch.setattr(meta, "generate_graph", spy)
    meta.train(pipe, ("photo", "cartoon", "sketch"), OptimConfig(iterations=5))
    assert seen and "painting" not in seen


def test_inner_only_keeps_phi(pipe):
    tr = meta.train(pipe, FOLD, OptimConfig(iterations=3), update_outer=False)
    assert np.array_equal(tr.phi.flat(), init_tokens(0).flat())
    assert tr.outer_updates == 0 and tr.inner_steps == 9
    assert not np.array_equal(tr.theta.flat(), tr.phi.flat())


def test_apply_at_test(pipe, trained):
    spec = PromptSpec("photo", 7, "apples")
    img = meta.apply_at_test(spec, trained.phi, pipe, 3)
    base = meta.generate(spec, None, 3, pipe.vocab, pipe.weights)
    assert not np.array_equal(img.pixels, base.pixels)
    import time
    t0 = time.perf_counter()
    for i in range(20):
        meta.apply_at_test(spec, trained.phi, pipe, i)
    assert (time.perf_counter() - t0) / 20 < 0.01 * trained.seconds


def test_nonfinite_inner_aborts_with_diagnostics():
    def bad(t, v):
        return ad.sum(v["x"] * np.nan)

    with pytest.raises(meta.NonFiniteLoss) as info:
        meta.inner_adapt(bad, ("x",), np.ones(2), 0.1, 2, 10.0)
    assert {"loss", "grad_norm", "step"} <= set(info.value.diagnostics)


def test_nonfinite_step_is_skipped(pipe, monkeypatch):
    def boom(*a, **kw):
        raise meta.NonFiniteLoss("nan", {"loss": float("nan")})

    monkeypatch.setattr(meta, "hypergradient", boom)
    split = DomainSplit(("painting", "cartoon"), "sketch", "photo")
    phi = init_tokens(0)
    res = meta.meta_step(phi, split, [Task("painting", "apples", 2, 0), Task("cartoon", "apples", 2, 0)],
                         Task("sketch", "apples", 2, 0), pipe, OptimConfig())
    assert res.skipped and np.array_equal(res.phi, phi.flat())


def test_nonfinite_streak_aborts_training(pipe, monkeypatch):
    calls = []
    real = meta.meta_step

    def flaky(phi, *a, **kw):
        calls.append(1)
        if len(calls) in (2, 3):
            x = phi.flat()
            return meta.StepResult(x, x, float("nan"), [], float("nan"), True, "nan")
        return real(phi, *a, **kw)

    monkeypatch.setattr(meta, "meta_step", flaky)
    tr = meta.train(pipe, FOLD, OptimConfig(iterations=6))
    assert tr.skipped == 2 and tr.outer_updates == 4

    def always(phi, *a, **kw):
        x = phi.flat()
        return meta.StepResult(x, x, float("nan"), [], float("nan"), True, "nan")

    monkeypatch.setattr(meta, "meta_step", always)
    with pytest.raises(meta.NonFiniteLoss):
        meta.train(pipe, FOLD, OptimConfig(iterations=10))


def test_checkpoint_and_log(pipe, tmp_path):
    ck, log = tmp_path / "ck.json", tmp_path / "log.csv"
    tr = meta.train(pipe, FOLD, OptimConfig(iterations=4), log_path=log, checkpoint_path=ck,
                    provenance={"fixtures": "x"})
    loaded = meta.load_checkpoint(ck)
    assert np.array_equal(loaded.phi.flat(), tr.phi.flat())
    assert loaded.iteration == 4 and loaded.provenance == {"fixtures": "x"}
    assert loaded.config == OptimConfig(iterations=4)
    lines = log.read_text().strip().splitlines()
    assert lines[0].split(",") == list(meta.LOG_FIELDS) and len(lines) == 5


def test_first_order_ablations_train_only_their_token(pipe):
    tr = meta.train(pipe, FOLD, OptimConfig(iterations=2), token_names=("e_count",))
    assert tr.phi.names() == ("e_count",)
