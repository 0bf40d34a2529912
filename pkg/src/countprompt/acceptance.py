"""Acceptance suite: eight pass/fail criteria, shared by ``countprompt check``
and the test suite."""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import bench, gradcheck, meta
from .fixtures import Pipeline, build_pipeline
from .generator import render, stylize
from .perception import (calibrate, clip_s, count_hard, count_soft, oracle_scene)
from .prompt import DOMAINS, MAX_COUNT, MIN_COUNT, TRAIN_CLASSES, PromptSpec, init_tokens

FIXTURE_SEED = 0


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"criterion {self.number} {status} {self.name}: {self.detail} [{self.seconds:.1f}s]"


@dataclass
class AcceptanceContext:
    pipe: Pipeline
    cfg: meta.OptimConfig = field(default_factory=meta.OptimConfig)
    bench_spec: bench.BenchmarkSpec = field(default_factory=bench.BenchmarkSpec)
    workers: int = 1
    _trained: dict = field(default_factory=dict)
    _rows: dict = field(default_factory=dict)
    _unseen_rows: dict = field(default_factory=dict)
    _seconds: dict = field(default_factory=dict)

    @classmethod
    def default(cls, seed: int = FIXTURE_SEED, workers: int = 1) -> "AcceptanceContext":
        return cls(pipe=build_pipeline(seed), cfg=meta.OptimConfig(seed=seed),
                   bench_spec=bench.BenchmarkSpec(seed=seed), workers=workers)

    def run_method(self, method: str):
        """Train (if needed) and evaluate ``method`` on all four folds; cached."""
        if method in self._rows:
            return self._rows[method]
        t0 = time.perf_counter()
        prompts = bench.build_bench(self.bench_spec)
        unseen = self.pipe.vocab.unseen_classes
        uprompts = bench.build_bench(bench.BenchmarkSpec(unseen, repetitions=self.bench_spec.repetitions,
                                                         seed=self.bench_spec.seed)) if unseen else []
        rows, urows = [], []
        for f in bench.folds():
            toks = on = None
            if method != "baseline":
                tr = meta.train(self.pipe, f.training_domains, self.cfg, bench.METHOD_TOKENS[method],
                                update_outer=(method != "inner-only"))
                self._trained[(method, f.held_out)] = tr
                toks, on = bench.test_tokens(tr, method), tr.train_domains
            rows += bench.run_fold(f, method, prompts, self.pipe, toks, on, self.workers)
            if uprompts:
                urows += bench.run_fold(f, method, uprompts, self.pipe, toks, on, self.workers)
        self._rows[method] = rows
        self._unseen_rows[method] = urows
        self._seconds[method] = time.perf_counter() - t0
        return rows

    def report(self, method: str) -> bench.FoldReport:
        return bench.report(self.run_method(method), method, self.bench_spec.repetitions)

    def unseen_report(self, method: str) -> bench.FoldReport:
        self.run_method(method)
        return bench.report(self._unseen_rows[method], method, self.bench_spec.repetitions)


def _timed(number, name):
    def deco(fn):
        def run(ctx: AcceptanceContext) -> CriterionResult:
            t0 = time.perf_counter()
            try:
                passed, detail = fn(ctx)
            except Exception as exc:  # a crash is a failure, reported with its message
                passed, detail = False, f"error: {type(exc).__name__}: {exc}"
            return CriterionResult(number, name, bool(passed), detail, time.perf_counter() - t0)
        run.number = number
        run.__name__ = fn.__name__
        return run
    return deco


# --------------------------------------------------------------------------


def pipeline_gradient_error(pipe: Pipeline, cfg: meta.OptimConfig, seed: int = 0) -> float:
    rng = np.random.default_rng([seed, 11])
    task = meta.sample_task(rng, DOMAINS[int(rng.integers(4))])
    obj = meta.summed_objective([task], pipe, cfg)
    tokens = init_tokens(seed, pipe.vocab.dim)
    x = tokens.flat()
    _, g = meta.value_and_grad(obj, tokens.names(), x)
    fd = ad.finite_difference(lambda z: meta.value_and_grad(obj, tokens.names(), z)[0], x)
    return float(np.max(np.abs(g - fd) / (np.abs(fd) + 1e-8)))


def pipeline_hypergradient_error(pipe: Pipeline, cfg: meta.OptimConfig, seed: int = 0) -> float:
    rng = np.random.default_rng([seed, 12])
    test = DOMAINS[int(rng.integers(4))]
    train = [d for d in DOMAINS if d != test][:2]
    inner = meta.summed_objective([meta.sample_task(rng, d) for d in train], pipe, cfg)
    outer = meta.summed_objective([meta.sample_task(rng, test)], pipe, cfg)
    tokens = init_tokens(seed, pipe.vocab.dim)
    names, phi = tokens.names(), tokens.flat()
    _, hg, _ = meta.hypergradient(inner, outer, names, phi, cfg.inner_lr, cfg.inner_steps, cfg.clip,
                                  "second-order")

    def f(x):
        traj = meta.inner_adapt(inner, names, x, cfg.inner_lr, cfg.inner_steps, cfg.clip)
        return meta.value_and_grad(outer, names, traj.final)[0]

    fd = ad.finite_difference(f, phi)
    return float(np.max(np.abs(hg - fd) / (np.abs(fd) + 1e-8)))


def quadratic_probe(alpha: float = 0.1, phi: float = 0.0, steps: int = 1):
    """Inner x^2, outer (x - 1)^2: second-order hypergradient and its FD check."""
    inner = lambda t, v: ad.sum(v["x"] * v["x"])                      # noqa: E731
    outer = lambda t, v: ad.sum((v["x"] - 1.0) * (v["x"] - 1.0))      # noqa: E731
    x0 = np.array([phi])
    _, hg, _ = meta.hypergradient(inner, outer, ("x",), x0, alpha, steps, 10.0, "second-order")

    def f(x):
        traj = meta.inner_adapt(inner, ("x",), x, alpha, steps, 10.0)
        return meta.value_and_grad(outer, ("x",), traj.final)[0]

    fd = ad.finite_difference(f, x0, 1e-5)
    return float(hg[0]), float(fd[0])


@_timed(1, "gradient suite")
def criterion_1(ctx):
    ops = gradcheck.check_all_ops(points=100)
    worst_op = max(ops, key=ops.get)
    comp = pipeline_gradient_error(ctx.pipe, ctx.cfg)
    hyper = pipeline_hypergradient_error(ctx.pipe, ctx.cfg)
    hg, fd = quadratic_probe()
    ok = (ops[worst_op] < 1e-4 and comp < 1e-4 and hyper < 1e-3
          and abs(hg - (-1.6)) < 1e-12 and abs(hg - fd) < 1e-6)
    return ok, (f"{len(ops)} ops, worst {worst_op} {ops[worst_op]:.1e}; composite {comp:.1e}; "
                f"hypergradient {hyper:.1e}; quadratic {hg:.6f} (fd {fd:.8f})")


@_timed(2, "counter contract")
def criterion_2(ctx):
    w = ctx.pipe.weights
    cal = ctx.pipe.calibration
    rng = np.random.default_rng([FIXTURE_SEED, 0x0AC1E])
    wrong = 0
    for j in range(500):
        n = MIN_COUNT + j % (MAX_COUNT - MIN_COUNT + 1)
        d = DOMAINS[j % len(DOMAINS)]
        img = stylize(render(oracle_scene(n, rng, w), w.size), d)
        wrong += cal.count_hard(img, d) != n
    fresh = calibrate(w, FIXTURE_SEED)
    ok = wrong == 0 and fresh.heldout_error <= 0.25
    per = ", ".join(f"{d} {e:.3f}" for d, e in fresh.per_domain_error.items())
    return ok, (f"hard-count errors {wrong}/500; soft-count held-out MAE "
                f"{fresh.heldout_error:.3f} ({per})")


@_timed(3, "dual-loop benefit")
def criterion_3(ctx):
    base, inner, quota = (ctx.report(m) for m in ("baseline", "inner-only", "quota"))
    ordered = all(quota.per_domain[d]["mae"] < inner.per_domain[d]["mae"] < base.per_domain[d]["mae"]
                  for d in DOMAINS)
    gain = 1.0 - quota.average["mae"] / base.average["mae"]
    folds = "; ".join(f"{d} {quota.per_domain[d]['mae']:.2f}<{inner.per_domain[d]['mae']:.2f}"
                      f"<{base.per_domain[d]['mae']:.2f}" for d in DOMAINS)
    return ordered and gain >= 0.30, f"{folds}; average reduction {100 * gain:.1f}%"


@_timed(4, "token ablation")
def criterion_4(ctx):
    q, c, s = (ctx.report(m).average["mae"] for m in ("quota", "count-only", "style-only"))
    return q <= c and q <= s, f"quota {q:.3f}, count-only {c:.3f}, style-only {s:.3f}"


@_timed(5, "test-time reuse")
def criterion_5(ctx):
    fold = bench.folds()[0]
    tr = meta.train(ctx.pipe, fold.training_domains, ctx.cfg)
    before = dict(meta.COUNTERS)
    n = 50
    t0 = time.perf_counter()
    for i in range(n):
        spec = PromptSpec(fold.held_out, 1 + i % 25, TRAIN_CLASSES[i % len(TRAIN_CLASSES)])
        meta.apply_at_test(spec, tr.phi, ctx.pipe, i)
    per_prompt = (time.perf_counter() - t0) / n
    steps = {k: meta.COUNTERS[k] - before[k] for k in before}
    frac = per_prompt / tr.seconds
    ok = all(v == 0 for v in steps.values()) and frac < 0.01
    return ok, (f"optimisation steps during test {steps}; {1e3 * per_prompt:.2f} ms per prompt = "
                f"{100 * frac:.2f}% of training ({tr.seconds:.2f}s)")


@_timed(6, "unseen-class generalisation")
def criterion_6(ctx):
    if len(ctx.pipe.vocab.unseen_classes) != 9:
        return False, f"expected 9 unseen classes, found {len(ctx.pipe.vocab.unseen_classes)}"
    trained = ctx.report("quota").average["mae"]
    unseen = ctx.unseen_report("quota").average["mae"]
    base = ctx.unseen_report("baseline").average["mae"]
    leaked = set(ctx.pipe.vocab.unseen_classes) & {
        c for (m, _), tr in ctx._trained.items() if m == "quota" for c in tr.classes_seen}
    ok = unseen <= 2 * trained and unseen < base and not leaked
    return ok, (f"quota unseen {unseen:.3f} vs trained {trained:.3f} (ratio {unseen / trained:.2f}); "
                f"baseline unseen {base:.3f}")


@_timed(7, "benchmark integrity")
def criterion_7(ctx):
    spec1 = bench.BenchmarkSpec(repetitions=1)
    prompts = bench.build_bench(spec1)
    per_dom = {d: sum(p.domain == d for p in prompts) for d in DOMAINS}
    count_ok = all(v == 475 for v in per_dom.values())
    stable = bench.manifest(prompts) == bench.manifest(bench.build_bench(spec1))
    held = [f.held_out for f in bench.folds()]
    partition = sorted(held) == sorted(DOMAINS) and all(
        set(f.training_domains) | {f.held_out} == set(DOMAINS) and f.held_out not in f.training_domains
        for f in bench.folds())
    reports = [ctx.report(m) for m in ctx._rows] + [ctx.unseen_report(m) for m in ctx._unseen_rows
                                                    if ctx._unseen_rows[m]]
    rmse_ok = all(v["rmse"] >= v["mae"] for r in reports for v in r.per_domain.values()) and all(
        r.average["rmse"] >= r.average["mae"] for r in reports)
    # rerun one fold end to end and compare raw CSV bytes
    fold = bench.folds()[0]
    small = bench.BenchmarkSpec(classes=TRAIN_CLASSES[:3], repetitions=1, seed=ctx.bench_spec.seed)
    prov = {"config_hash": meta.config_hash(ctx.cfg), "fixtures": "acceptance", "global_seed": ctx.cfg.seed}
    blobs = []
    with tempfile.TemporaryDirectory() as tmp:
        for k in range(2):
            tr = meta.train(ctx.pipe, fold.training_domains, ctx.cfg)
            rows = bench.run_fold(fold, "quota", bench.build_bench(small), ctx.pipe, tr.phi,
                                  tr.train_domains)
            path = Path(tmp) / f"run{k}.csv"
            bench.write_raw_csv(rows, path, prov)
            blobs.append(path.read_bytes())
    identical = blobs[0] == blobs[1]
    ok = count_ok and stable and partition and rmse_ok and identical
    return ok, (f"prompts per domain {sorted(set(per_dom.values()))}; manifest stable {stable}; "
                f"folds partition {partition}; RMSE>=MAE on {len(reports)} reports {rmse_ok}; "
                f"rerun byte-identical {identical}")


@_timed(8, "metric identities")
def criterion_8(ctx):
    checks = {
        "mae [2,4]/[2,2]": bench.mae([2, 4], [2, 2]) == 1.0,
        "rmse [2,4]/[2,2]": bench.rmse([2, 4], [2, 2]) == math.sqrt(2.0),
        "identical": bench.mae([3, 5], [3, 5]) == 0.0 and bench.rmse([3, 5], [3, 5]) == 0.0,
        "mae [0,10]": bench.mae([0, 10], [0, 0]) == 5.0,
        "rmse [0,10]": bench.rmse([0, 10], [0, 0]) == math.sqrt(50.0),
        "clip -0.2": clip_s(-0.2) == 0.0,
        "clip 0.748": clip_s(0.748, 100.0) == 74.8,
        "clip 0": clip_s(0.0) == 0.0,
    }
    rng = np.random.default_rng(8)
    lin = all(clip_s(s, 2.0 * w) == 2.0 * clip_s(s, w)
              for s, w in zip(rng.uniform(-1, 1, 200), rng.uniform(0.1, 200, 200)))
    checks["linear in w"] = lin
    failed = [k for k, v in checks.items() if not v]
    return not failed, f"{len(checks) - len(failed)}/{len(checks)} identities hold" + (
        f"; failed: {failed}" if failed else "")


CRITERIA = (criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8)


def run_all(ctx: AcceptanceContext | None = None, only=None, emit=print) -> list[CriterionResult]:
    ctx = ctx or AcceptanceContext.default()
    out = []
    for crit in CRITERIA:
        if only and crit.number not in only:
            continue
        res = crit(ctx)
        out.append(res)
        if emit is not None:
            emit(res.line())
    return out
