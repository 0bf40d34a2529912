"""Command-line driver.

Exit codes: 0 ok, 2 fixture/config error, 3 numerical failure,
4 acceptance threshold missed (``check``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import bench, meta
from .config import ConfigError, ExperimentConfig, load_config
from .fixtures import (FixtureError, build_base, load_base, load_pipeline, save_base,
                       save_calibration)
from .perception import calibrate
from .prompt import DOMAINS, PromptSpec

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPT = 0, 2, 3, 4
CALIBRATION_LIMIT = 0.25


def _workers(cfg: ExperimentConfig, flag) -> int:
    n = flag if flag is not None else cfg["workers"]
    return n if n and n > 0 else (os.cpu_count() or 1)


def _out(cfg: ExperimentConfig) -> Path:
    p = Path(cfg["output.dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _provenance(cfg: ExperimentConfig, pipe) -> dict:
    return bench.provenance_record(cfg.hash(), pipe.checksums(), cfg["seed"])


def _ckpt_path(cfg, method, fold) -> Path:
    d = _out(cfg) / "checkpoints"
    d.mkdir(exist_ok=True)
    return d / f"{method}-{fold}.json"


# --------------------------------------------------------------------------


def cmd_fixtures(cfg: ExperimentConfig, args) -> int:
    vocab, weights, scorer = build_base(cfg["seed"], cfg["vocab.dim"], cfg["vocab.magnitude_scale"],
                                        cfg["generator.bind_gain"])
    sums = save_base((vocab, weights, scorer), cfg["fixtures.dir"], force=args.force)
    for k, v in sums.items():
        print(f"{k:10s} {v}")
    return EXIT_OK


def cmd_calibrate(cfg: ExperimentConfig, args) -> int:
    _, weights, _ = load_base(cfg["fixtures.dir"])
    cal = calibrate(weights, cfg["seed"])
    print("domain     beta      theta_hard  held-out |error|")
    for d in DOMAINS:
        print(f"{d:10s} {cal.counter.beta[d]:.4f}    {cal.theta_hard[d]:.4f}      "
              f"{cal.per_domain_error[d]:.3f}")
    print(f"lambda_scale {cal.counter.lambda_scale:.6f}  mean held-out error {cal.heldout_error:.3f}")
    save_calibration(cal, cfg["fixtures.dir"], cfg["seed"], force=args.force)
    if cal.heldout_error > CALIBRATION_LIMIT:
        print(f"calibration error {cal.heldout_error:.3f} exceeds {CALIBRATION_LIMIT}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _train_one(cfg, pipe, method, fold):
    f = bench.Fold(fold)
    logs = _out(cfg) / "logs"
    logs.mkdir(exist_ok=True)
    return meta.train(pipe, f.training_domains, cfg.optim(), bench.METHOD_TOKENS[method],
                      update_outer=(method != "inner-only"),
                      log_path=logs / f"{method}-{fold}.csv",
                      checkpoint_path=_ckpt_path(cfg, method, fold),
                      provenance=_provenance(cfg, pipe))


def cmd_train(cfg: ExperimentConfig, args) -> int:
    if not args.fold:
        raise ConfigError("train needs --fold")
    method = args.method or "quota"
    if method == "baseline":
        raise ConfigError("baseline has nothing to train")
    pipe = load_pipeline(cfg["fixtures.dir"])
    tr = _train_one(cfg, pipe, method, args.fold)
    print(f"{method} fold {args.fold}: {tr.outer_updates} outer updates, {tr.inner_steps} inner steps, "
          f"{tr.skipped} skipped, {tr.seconds:.2f}s -> {_ckpt_path(cfg, method, args.fold)}")
    return EXIT_OK


def _load_tokens(cfg, pipe, method, fold, path):
    if method == "baseline":
        return None, None
    path = Path(path) if path else _ckpt_path(cfg, method, fold)
    if not path.exists():
        raise FixtureError(f"checkpoint {path} not found; run train first")
    ck = meta.load_checkpoint(path)
    if ck.provenance and ck.provenance != _provenance(cfg, pipe):
        raise FixtureError(f"{path} was trained with a different config or fixtures")
    return ck.tokens(), ck.train_domains


def _dump_images(cfg, pipe, method, fold, tokens, prov):
    d = _out(cfg) / "images" / f"{method}-{fold}"
    d.mkdir(parents=True, exist_ok=True)
    cls = cfg["bench.classes"][0]
    from .generator import generate
    for n in range(1, 26):
        spec = PromptSpec(fold, n, cls)
        seed = bench.prompt_seed(cfg["seed"], fold, cls, n, 0)
        img = (generate(spec, None, seed, pipe.vocab, pipe.weights) if tokens is None
               else meta.apply_at_test(spec, tokens, pipe, seed))
        bench.write_pgm(img, d / f"{cls}-{n:02d}.pgm", {**prov, "method": method, "N": n})


def _emit(cfg, stem, reports, rows, prov, extra=None):
    out = _out(cfg)
    bench.write_raw_csv(rows, out / f"{stem}.csv", prov)
    bench.write_summary(reports, out / f"{stem}.json", prov, extra)
    bench.write_svg(reports, out / f"{stem}.svg", prov)


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    if not args.fold:
        raise ConfigError("eval needs --fold")
    method = args.method or "quota"
    pipe = load_pipeline(cfg["fixtures.dir"])
    prov = _provenance(cfg, pipe)
    tokens, on = _load_tokens(cfg, pipe, method, args.fold, args.checkpoint)
    rows = bench.run_fold(bench.Fold(args.fold), method, bench.build_bench(cfg.bench()), pipe,
                          tokens, on, _workers(cfg, args.workers), cfg["bench.clip_weight"])
    rep = bench.report(rows, method, cfg["bench.repetitions"], prov)
    _emit(cfg, f"eval-{method}-{args.fold}", {method: rep}, rows, prov)
    if args.dump_images:
        _dump_images(cfg, pipe, method, args.fold, tokens, prov)
    a = rep.average
    print(f"{method} on {args.fold}: MAE {a['mae']:.3f}  RMSE {a['rmse']:.3f}  CLIP-S {a['clip_s']:.2f}")
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    pipe = load_pipeline(cfg["fixtures.dir"])
    prov = _provenance(cfg, pipe)
    workers = _workers(cfg, args.workers)
    methods = cfg["methods"]
    trained = {}
    for m in methods:
        if m == "baseline":
            continue
        for f in bench.folds():
            trained[(m, f.held_out)] = _train_one(cfg, pipe, m, f.held_out)
    unseen = pipe.vocab.unseen_classes if cfg["bench.unseen"] else ()
    suite = bench.ablation_suite(cfg.bench(), pipe, cfg.optim(), methods, trained, workers,
                                 unseen, prov)
    out = _out(cfg)
    for m in methods:
        for f in bench.folds():
            rows = [r for r in suite.results if r.method == m and r.fold == f.held_out]
            rep = bench.report(rows, m, cfg["bench.repetitions"], prov)
            bench.write_summary({m: rep}, out / f"summary-{m}-{f.held_out}.json", prov)
    extra = {"unseen": {m: r.to_dict() for m, r in suite.unseen.items()}} if suite.unseen else None
    _emit(cfg, "ablation", suite.reports, suite.results, prov, extra)
    _write_quantity_table(out / "per-quantity.csv", suite.reports)
    if args.dump_images:
        for m in methods:
            for f in bench.folds():
                tr = trained.get((m, f.held_out))
                toks = None if tr is None else bench.test_tokens(tr, m)
                _dump_images(cfg, pipe, m, f.held_out, toks, prov)
    print(f"{'method':12s} " + " ".join(f"{d:>9s}" for d in DOMAINS) + "   average  CLIP-S")
    for m, r in suite.reports.items():
        cells = " ".join(f"{r.per_domain[d]['mae']:9.3f}" for d in DOMAINS)
        print(f"{m:12s} {cells} {r.average['mae']:9.3f} {r.average['clip_s']:7.2f}")
    for m, r in suite.unseen.items():
        print(f"unseen {m:12s} MAE {r.average['mae']:.3f}")
    return EXIT_OK


def _write_quantity_table(path, reports):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = [(m, d) for m in reports for d in DOMAINS if d in reports[m].per_quantity]
        w.writerow(["N"] + [f"{m}/{d}" for m, d in cols])
        for i in range(25):
            w.writerow([i + 1] + [repr(reports[m].per_quantity[d][i]) for m, d in cols])


def cmd_check(cfg: ExperimentConfig, args) -> int:
    from . import acceptance
    ctx = acceptance.AcceptanceContext(pipe=load_pipeline(cfg["fixtures.dir"]), cfg=cfg.optim(),
                                       bench_spec=cfg.bench(), workers=_workers(cfg, args.workers)) \
        if Path(cfg["fixtures.dir"]).exists() else acceptance.AcceptanceContext.default(cfg["seed"])
    results = acceptance.run_all(ctx)
    failed = [r.number for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    return EXIT_ACCEPT if failed else EXIT_OK


COMMANDS = {"fixtures": cmd_fixtures, "calibrate": cmd_calibrate, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate, "check": cmd_check}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="countprompt",
                                description="Meta-learned count/style prompt tokens on a surrogate "
                                            "text-to-image pipeline.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON file with flat dotted keys")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--fold", choices=DOMAINS, help="held-out domain")
    p.add_argument("--method", choices=bench.METHODS, help="method for train/eval (default quota)")
    p.add_argument("--checkpoint", help="checkpoint for eval (default: output.dir/checkpoints)")
    p.add_argument("--workers", type=int, help="parallel workers (default: all CPUs)")
    p.add_argument("--force", action="store_true", help="overwrite fixtures with other checksums")
    p.add_argument("--dump-images", action="store_true", help="write PGM images (one per count)")
    p.add_argument("--fixtures-dir", help="override fixtures.dir")
    p.add_argument("--output-dir", help="override output.dir")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        over = {}
        if args.seed is not None:
            over["seed"] = args.seed
        if args.fixtures_dir:
            over["fixtures.dir"] = args.fixtures_dir
        if args.output_dir:
            over["output.dir"] = args.output_dir
        if over:
            cfg = ExperimentConfig({**cfg.values, **over})
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FixtureError, bench.SplitError, bench.ProvenanceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (meta.NonFiniteLoss, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
