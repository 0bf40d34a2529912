"""Leave-one-domain-out benchmark: prompt grid, per-method runs, reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import meta
from .fixtures import Pipeline
from .generator import generate
from .perception import clip_s_metric
from .prompt import DOMAINS, MAX_COUNT, MIN_COUNT, TRAIN_CLASSES, LearnableTokens, PromptSpec

METHODS = ("baseline", "style-only", "count-only", "inner-only", "quota")
METHOD_TOKENS = {"style-only": ("e_style",), "count-only": ("e_count",),
                 "inner-only": ("e_count", "e_style"), "quota": ("e_count", "e_style")}


class SplitError(ValueError):
    """Tokens trained on the domain they are being evaluated on."""


class ProvenanceError(ValueError):
    """Results from different configs or fixtures were mixed."""


@dataclass(frozen=True)
class BenchmarkSpec:
    classes: tuple = TRAIN_CLASSES
    counts: tuple = tuple(range(MIN_COUNT, MAX_COUNT + 1))
    domains: tuple = DOMAINS
    repetitions: int = 3
    seed: int = 0

    def __post_init__(self):
        if not self.classes:
            raise ValueError("benchmark needs at least one class")
        c = tuple(int(n) for n in self.counts)
        if not c or c != tuple(range(MIN_COUNT, MIN_COUNT + len(c))):
            raise ValueError("counts must be contiguous from 1")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        for d in self.domains:
            if d not in DOMAINS:
                raise ValueError(f"unknown domain {d!r}")
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "counts", c)
        object.__setattr__(self, "domains", tuple(self.domains))


@dataclass(frozen=True)
class BenchPrompt:
    domain: str
    cls: str
    count: int
    rep: int
    noise_seed: int

    def spec(self) -> PromptSpec:
        return PromptSpec(self.domain, self.count, self.cls)


def prompt_seed(seed: int, domain: str, cls: str, count: int, rep: int) -> int:
    key = f"{seed}|{domain}|{cls}|{count}|{rep}".encode()
    return int(hashlib.sha256(key).hexdigest()[:8], 16)


def build_bench(spec: BenchmarkSpec) -> list[BenchPrompt]:
    """domains x classes x counts x repetitions, in that nesting order."""
    return [BenchPrompt(d, c, n, r, prompt_seed(spec.seed, d, c, n, r))
            for d in spec.domains for c in spec.classes for n in spec.counts
            for r in range(spec.repetitions)]


def manifest(prompts) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(("domain", "class", "N", "rep", "noise_seed"))
    for p in prompts:
        w.writerow((p.domain, p.cls, p.count, p.rep, p.noise_seed))
    return buf.getvalue().encode()


# --------------------------------------------------------------------------
# metrics


def _pair(detected, target):
    a = np.asarray(detected, dtype=np.float64).reshape(-1)
    b = np.asarray(target, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} detected vs {b.size} targets")
    if a.size == 0:
        raise ValueError("need at least one value")
    return a, b


def mae(detected, target) -> float:
    a, b = _pair(detected, target)
    return math.fsum(np.abs(a - b)) / a.size


def rmse(detected, target) -> float:
    a, b = _pair(detected, target)
    return math.sqrt(math.fsum((a - b) ** 2) / a.size)


# --------------------------------------------------------------------------
# folds and runs


@dataclass(frozen=True)
class Fold:
    held_out: str

    def __post_init__(self):
        if self.held_out not in DOMAINS:
            raise ValueError(f"unknown domain {self.held_out!r}")

    @property
    def training_domains(self) -> tuple:
        return tuple(d for d in DOMAINS if d != self.held_out)


def folds() -> list[Fold]:
    return [Fold(d) for d in DOMAINS]


@dataclass(frozen=True)
class CellResult:
    method: str
    fold: str
    domain: str
    cls: str
    count: int
    rep: int
    seed: int
    detected: int
    clip_s: float


def _eval_chunk(args):
    pipe, method, fold, tokens, prompts, w = args
    out = []
    for p in prompts:
        spec = p.spec()
        if tokens is None:
            img = generate(spec, None, p.noise_seed, pipe.vocab, pipe.weights)
        else:
            img = meta.apply_at_test(spec, tokens, pipe, p.noise_seed)
        det = pipe.calibration.count_hard(img, p.domain)
        out.append(CellResult(method, fold, p.domain, p.cls, p.count, p.rep, p.noise_seed, det,
                              clip_s_metric(spec, img, pipe.scorer, pipe.vocab, w)))
    return out


def run_fold(fold: Fold, method: str, prompts, pipe: Pipeline, tokens: LearnableTokens | None = None,
             trained_on=None, workers: int = 1, w: float = 100.0) -> list[CellResult]:
    """Evaluate one method on the held-out domain's prompts."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method != "baseline":
        if tokens is None:
            raise ValueError(f"method {method!r} needs trained tokens")
        if trained_on is None:
            raise SplitError("training domains of the tokens are unknown")
        if fold.held_out in trained_on:
            raise SplitError(f"tokens were trained on held-out domain {fold.held_out!r}")
    else:
        tokens = None
    mine = [p for p in prompts if p.domain == fold.held_out]
    chunks = _chunks(mine, max(1, workers) * 4 if workers > 1 else 1)
    jobs = [(pipe, method, fold.held_out, tokens, c, w) for c in chunks]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_eval_chunk, jobs))
    else:
        parts = [_eval_chunk(j) for j in jobs]
    return [r for part in parts for r in part]


def _chunks(items, n):
    n = max(1, min(n, len(items)))
    k, m = divmod(len(items), n)
    out, i = [], 0
    for j in range(n):
        step = k + (1 if j < m else 0)
        out.append(items[i:i + step])
        i += step
    return out


# --------------------------------------------------------------------------
# reports


@dataclass
class FoldReport:
    method: str
    per_domain: dict              # domain -> {"mae", "rmse", "clip_s", "n"}
    average: dict                 # {"mae", "rmse", "clip_s"} arithmetic means over domains
    per_quantity: dict            # domain -> list of 25 MAE values (None where no cell)
    repetitions: int
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def report(results, method: str | None = None, repetitions: int | None = None,
           provenance: dict | None = None) -> FoldReport:
    """Aggregate cells; order of ``results`` does not matter (exact sums)."""
    rows = [r for r in results if method is None or r.method == method]
    if not rows:
        raise ValueError("no results to report")
    methods = {r.method for r in rows}
    if len(methods) != 1:
        raise ValueError(f"results mix methods {sorted(methods)}")
    per_domain, per_q = {}, {}
    for d in DOMAINS:
        rs = [r for r in rows if r.domain == d]
        if not rs:
            continue
        det = [r.detected for r in rs]
        tgt = [r.count for r in rs]
        per_domain[d] = {"mae": mae(det, tgt), "rmse": rmse(det, tgt),
                         "clip_s": math.fsum(r.clip_s for r in rs) / len(rs), "n": len(rs)}
        table = []
        for n in range(MIN_COUNT, MAX_COUNT + 1):
            rn = [r for r in rs if r.count == n]
            table.append(mae([r.detected for r in rn], [n] * len(rn)) if rn else None)
        per_q[d] = table
    avg = {k: math.fsum(v[k] for v in per_domain.values()) / len(per_domain)
           for k in ("mae", "rmse", "clip_s")}
    reps = repetitions if repetitions is not None else len({r.rep for r in rows})
    return FoldReport(method=rows[0].method, per_domain=per_domain, average=avg,
                      per_quantity=per_q, repetitions=reps, provenance=dict(provenance or {}))


# --------------------------------------------------------------------------
# suites


@dataclass
class SuiteResult:
    reports: dict                     # method -> FoldReport (all folds)
    results: list                     # CellResult list
    trained: dict                     # (method, fold) -> TrainResult
    unseen: dict = field(default_factory=dict)   # method -> FoldReport on unseen classes


def train_methods(pipe: Pipeline, cfg: meta.OptimConfig, methods=METHODS, fold_list=None) -> dict:
    fold_list = fold_list or folds()
    trained = {}
    for m in methods:
        if m == "baseline":
            continue
        for f in fold_list:
            trained[(m, f.held_out)] = meta.train(pipe, f.training_domains, cfg, METHOD_TOKENS[m],
                                                  update_outer=(m != "inner-only"))
    return trained


def test_tokens(tr: "meta.TrainResult", method: str) -> LearnableTokens:
    return tr.theta if method == "inner-only" else tr.phi


def ablation_suite(bench: BenchmarkSpec, pipe: Pipeline, cfg: meta.OptimConfig,
                   methods=("baseline", "style-only", "count-only", "quota"), trained=None,
                   workers: int = 1, unseen_classes=(), provenance=None) -> SuiteResult:
    """Run every method on every fold; one report per method over all folds."""
    fold_list = folds()
    trained = dict(trained or {})
    missing = [(m, f.held_out) for m in methods if m != "baseline" for f in fold_list
               if (m, f.held_out) not in trained]
    if trained and missing:
        raise ValueError(f"missing trained folds: {missing}")
    if not trained:
        trained = train_methods(pipe, cfg, methods, fold_list)
    prompts = build_bench(bench)
    results, reports, unseen = [], {}, {}
    uprompts = build_bench(BenchmarkSpec(tuple(unseen_classes), bench.counts, bench.domains,
                                         bench.repetitions, bench.seed)) if unseen_classes else []
    for m in methods:
        rows, urows = [], []
        for f in fold_list:
            tr = trained.get((m, f.held_out))
            toks = None if tr is None else test_tokens(tr, m)
            on = None if tr is None else tr.train_domains
            rows += run_fold(f, m, prompts, pipe, toks, on, workers)
            if uprompts:
                if tr is not None:
                    leaked = set(unseen_classes) & set(tr.classes_seen)
                    if leaked:
                        raise SplitError(f"unseen classes {sorted(leaked)} appear in training")
                urows += run_fold(f, m, uprompts, pipe, toks, on, workers)
        results += rows
        reports[m] = report(rows, m, bench.repetitions, provenance)
        if urows:
            unseen[m] = report(urows, m, bench.repetitions, provenance)
    return SuiteResult(reports=reports, results=results, trained=trained, unseen=unseen)


def unseen_class_eval(bench: BenchmarkSpec, pipe: Pipeline, tokens_by_fold: dict, method: str = "quota",
                      classes_seen=None, workers: int = 1, provenance=None) -> FoldReport:
    """Report restricted to registered unseen classes.

    ``tokens_by_fold`` maps held-out domain -> (tokens, training domains).
    """
    unseen = set(pipe.vocab.unseen_classes)
    ids = [c for c in bench.classes if c in unseen]
    if not ids:
        raise ValueError("benchmark contains no unseen classes")
    leaked = set(ids) & set(classes_seen or ())
    if leaked:
        raise SplitError(f"unseen classes {sorted(leaked)} appear in the training log")
    prompts = build_bench(BenchmarkSpec(tuple(ids), bench.counts, bench.domains,
                                        bench.repetitions, bench.seed))
    rows = []
    for f in folds():
        toks, on = tokens_by_fold.get(f.held_out, (None, None)) if method != "baseline" else (None, None)
        rows += run_fold(f, method, prompts, pipe, toks, on, workers)
    return report(rows, method, bench.repetitions, provenance)


# --------------------------------------------------------------------------
# output files


RAW_FIELDS = ("method", "fold", "domain", "class", "N", "seed", "rep", "detected", "clip_s",
              "config_hash", "fixtures", "global_seed")


def provenance_record(config_hash: str, checksums: dict, seed: int) -> dict:
    fx = hashlib.sha256(json.dumps(checksums, sort_keys=True).encode()).hexdigest()[:16]
    return {"config_hash": config_hash, "fixtures": fx, "global_seed": int(seed)}


def write_raw_csv(results, path, provenance: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)            # RFC 4180: CRLF rows, minimal quoting
        w.writerow(RAW_FIELDS)
        for r in results:
            w.writerow((r.method, r.fold, r.domain, r.cls, r.count, r.seed, r.rep, r.detected,
                        repr(float(r.clip_s)), provenance["config_hash"], provenance["fixtures"],
                        provenance["global_seed"]))
    os.replace(tmp, path)


def read_raw_csv(path) -> tuple[list, dict]:
    """Load raw results; all rows must share one provenance."""
    rows, prov = [], set()
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            prov.add((rec["config_hash"], rec["fixtures"], rec["global_seed"]))
            rows.append(CellResult(rec["method"], rec["fold"], rec["domain"], rec["class"],
                                   int(rec["N"]), int(rec["rep"]), int(rec["seed"]),
                                   int(rec["detected"]), float(rec["clip_s"])))
    if len(prov) > 1:
        raise ProvenanceError(f"{path}: rows from {len(prov)} different provenances")
    p = prov.pop() if prov else ("", "", "0")
    return rows, {"config_hash": p[0], "fixtures": p[1], "global_seed": int(p[2])}


def merge_results(sources) -> tuple[list, dict]:
    """Concatenate raw CSVs, refusing mixed provenance."""
    rows, prov = [], None
    for s in sources:
        r, p = read_raw_csv(s)
        if prov is not None and p != prov:
            raise ProvenanceError(f"{s}: provenance {p} differs from {prov}")
        prov = p
        rows += r
    return rows, prov or {}


def write_summary(reports: dict, path, provenance: dict, extra: dict | None = None) -> None:
    rec = {"provenance": provenance, "methods": {m: r.to_dict() for m, r in reports.items()}}
    if extra:
        rec.update(extra)
    Path(path).write_text(json.dumps(rec, sort_keys=True, indent=1) + "\n")


def write_svg(reports: dict, path, provenance: dict, metric: str = "mae") -> None:
    """Grouped bar chart: one group per domain (plus average), one bar per method."""
    methods = list(reports)
    groups = [d for d in DOMAINS if any(d in r.per_domain for r in reports.values())] + ["average"]
    vals = {(m, g): (reports[m].average[metric] if g == "average"
                     else reports[m].per_domain.get(g, {}).get(metric, 0.0))
            for m in methods for g in groups}
    top = max([1e-9, *vals.values()])
    width, height, pad = 120 * len(groups) + 160, 320, 40
    bar = 90 / max(1, len(methods))
    colours = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f"<!-- provenance: {json.dumps(provenance, sort_keys=True)} -->",
           f'<text x="{pad}" y="20" font-size="14">{metric.upper()} per domain and method</text>']
    for gi, g in enumerate(groups):
        x0 = pad + gi * 120
        for mi, m in enumerate(methods):
            h = 220 * vals[(m, g)] / top
            x = x0 + mi * bar
            out.append(f'<rect x="{x:.1f}" y="{270 - h:.1f}" width="{bar - 2:.1f}" height="{h:.1f}" '
                       f'fill="{colours[mi % len(colours)]}"><title>{m} {g}: {vals[(m, g)]:.3f}'
                       f'</title></rect>')
        out.append(f'<text x="{x0}" y="290" font-size="11">{g}</text>')
    for mi, m in enumerate(methods):
        y = 40 + 16 * mi
        out.append(f'<rect x="{width - 150}" y="{y - 10}" width="10" height="10" '
                   f'fill="{colours[mi % len(colours)]}"/>')
        out.append(f'<text x="{width - 135}" y="{y}" font-size="11">{m}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def write_pgm(image, path, provenance: dict | None = None, vmax: float = 1.0) -> None:
    """Plain (P2) 8-bit PGM, row-major, values clipped to [0, vmax]."""
    px = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
    q = np.rint(np.clip(px / vmax, 0.0, 1.0) * 255).astype(int)
    lines = ["P2"]
    if provenance:
        lines.append("# " + json.dumps(provenance, sort_keys=True))
    lines.append(f"{q.shape[1]} {q.shape[0]}")
    lines.append("255")
    lines += [" ".join(str(v) for v in row) for row in q]
    Path(path).write_text("\n".join(lines) + "\n")
