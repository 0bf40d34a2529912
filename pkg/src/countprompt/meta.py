"""Dual-loop prompt-token optimisation.

Inner loop: a few clipped gradient steps on the summed loss of the meta-train
domains, starting from the meta-parameters phi. Outer loop: the adapted
tokens are scored on the meta-test domain and phi moves along the
hypergradient, either first-order (outer gradient at theta_G) or
second-order (reverse pass through the inner trajectory using
Hessian-vector products).
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .fixtures import Pipeline
from .generator import RenderedImage, forbid_domains, generate, generate_graph
from .perception import count_soft_graph, semantic_score_graph
from .prompt import (DOMAINS, MAX_COUNT, MIN_COUNT, TRAIN_CLASSES, LearnableTokens, PromptSpec,
                     init_tokens)

# instrumentation: every parameter update anywhere in this module bumps these
COUNTERS = {"inner_steps": 0, "outer_updates": 0}


class NonFiniteLoss(FloatingPointError):
    def __init__(self, msg: str, diagnostics: dict):
        super().__init__(msg)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class OptimConfig:
    inner_lr: float = 0.01
    outer_lr: float = 0.01
    inner_steps: int = 3
    iterations: int = 30
    lam: float = 5.0
    mode: str = "first-order"
    clip: float = 10.0
    seed: int = 0
    semantic: str = "intent"        # "intent": 1 - score, "literal": + score
    scale_mode: str = "static"

    def __post_init__(self):
        if not (self.inner_lr > 0 and self.outer_lr > 0):
            raise ValueError("learning rates must be positive")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.mode not in ("first-order", "second-order"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.semantic not in ("intent", "literal"):
            raise ValueError(f"unknown semantic sign {self.semantic!r}")
        if not self.clip > 0:
            raise ValueError("clip must be positive")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")


@dataclass(frozen=True)
class DomainSplit:
    meta_train: tuple
    meta_test: str
    held_out: str | None = None

    def __post_init__(self):
        mt = tuple(self.meta_train)
        object.__setattr__(self, "meta_train", mt)
        if not mt:
            raise ValueError("meta_train is empty")
        if self.meta_test in mt:
            raise ValueError(f"meta_test {self.meta_test!r} also in meta_train")
        if self.held_out is not None and (self.held_out in mt or self.held_out == self.meta_test):
            raise ValueError(f"held-out domain {self.held_out!r} used for training")
        for d in (*mt, self.meta_test):
            if d not in DOMAINS:
                raise ValueError(f"unknown domain {d!r}")


@dataclass(frozen=True)
class Task:
    """One sampled prompt: domain, class, target count, generator noise seed."""

    domain: str
    cls: str
    count: int
    noise_seed: int

    def spec(self) -> PromptSpec:
        return PromptSpec(self.domain, self.count, self.cls, include_learned_tokens=True)


# --------------------------------------------------------------------------
# flat parameter vectors <-> named token leaves

Objective = Callable[[ad.Tape, dict], ad.Var]


def _layout(names, dim):
    return [(n, slice(i * dim, (i + 1) * dim)) for i, n in enumerate(names)]


def _leaves(tape: ad.Tape, names, x, tangent=None):
    dim = x.size // len(names)
    out = {}
    for n, sl in _layout(names, dim):
        v = x[sl] if tangent is None else ad.Dual(x[sl], tangent[sl])
        out[n] = tape.leaf(v)
    return out


def value_and_grad(objective: Objective, names, x) -> tuple[float, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    tape = ad.Tape()
    leaves = _leaves(tape, names, x)
    root = objective(tape, leaves)
    grads = ad.backward(root)
    g = np.concatenate([np.asarray(grads[leaves[n]]).reshape(-1) for n in names])
    return float(root.value), g


def hvp(objective: Objective, names, x, w) -> np.ndarray:
    """Hessian-vector product by forward-over-reverse: leaves carry tangent w."""
    x = np.asarray(x, dtype=np.float64)
    tape = ad.Tape()
    leaves = _leaves(tape, names, x, tangent=np.asarray(w, dtype=np.float64))
    grads = ad.backward(objective(tape, leaves))
    return np.concatenate([np.asarray(ad.tangent_of(grads[leaves[n]])).reshape(-1) for n in names])


def clip_grad(g: np.ndarray, max_norm: float) -> np.ndarray:
    n = float(np.linalg.norm(g))
    return g * (max_norm / n) if n > max_norm else g


def clip_jvp(g: np.ndarray, max_norm: float, v: np.ndarray) -> np.ndarray:
    """Jacobian of :func:`clip_grad` at ``g`` applied to ``v`` (symmetric)."""
    n = float(np.linalg.norm(g))
    if n <= max_norm:
        return v
    u = g / n
    return (max_norm / n) * (v - u * (u @ v))


# --------------------------------------------------------------------------
# losses


def counting_loss_graph(count: ad.Var, n: int) -> ad.Var:
    return ad.smooth_abs(count - float(n))


def semantic_loss_graph(score: ad.Var, sign: str = "intent") -> ad.Var:
    return (1.0 - score) if sign == "intent" else score


def counting_loss(count: float, n: int, eps: float = ad.SMOOTH_ABS_EPS) -> float:
    return float(np.sqrt((count - n) ** 2 + eps * eps))


def semantic_loss(score: float, sign: str = "intent") -> float:
    return 1.0 - score if sign == "intent" else score


def task_loss_graph(tape: ad.Tape, tokens: dict, task: Task, pipe: Pipeline, cfg: OptimConfig):
    spec = task.spec()
    img = generate_graph(tape, spec, tokens, task.noise_seed, pipe.vocab, pipe.weights)
    count = count_soft_graph(img, task.domain, pipe.counter(cfg.scale_mode))
    lc = counting_loss_graph(count, task.count)
    ls = semantic_loss_graph(semantic_score_graph(img, spec, pipe.scorer, pipe.vocab), cfg.semantic)
    return total_loss([lc], [ls], cfg.lam), lc, ls


def total_loss(counting_losses, semantic_losses, lam: float):
    """sum_d [count_d + lam * sem_d]; works on floats and tape Vars alike."""
    if not counting_losses or len(counting_losses) != len(semantic_losses):
        raise ValueError("need one counting and one semantic loss per domain")
    total = None
    for c, s in zip(counting_losses, semantic_losses):
        term = c + s * lam
        total = term if total is None else total + term
    return total


def summed_objective(tasks, pipe: Pipeline, cfg: OptimConfig) -> Objective:
    if not tasks:
        raise ValueError("no meta-train tasks")

    def objective(tape, tokens):
        parts = [task_loss_graph(tape, tokens, t, pipe, cfg)[1:] for t in tasks]
        return total_loss([p[0] for p in parts], [p[1] for p in parts], cfg.lam)
    return objective


def inner_loss(theta: LearnableTokens, split: DomainSplit, tasks, pipe: Pipeline,
               cfg: OptimConfig) -> float:
    """Summed loss over the meta-train domains (one task per domain)."""
    _check_tasks(split.meta_train, tasks)
    return value_and_grad(summed_objective(tasks, pipe, cfg), theta.names(), theta.flat())[0]


def outer_loss(theta: LearnableTokens, split: DomainSplit, task: Task, pipe: Pipeline,
               cfg: OptimConfig) -> float:
    if task.domain != split.meta_test:
        raise ValueError(f"outer task domain {task.domain!r} is not meta_test {split.meta_test!r}")
    return value_and_grad(summed_objective([task], pipe, cfg), theta.names(), theta.flat())[0]


def _check_tasks(domains, tasks):
    if not domains:
        raise ValueError("meta_train is empty")
    if sorted(t.domain for t in tasks) != sorted(domains):
        raise ValueError(f"need exactly one task per domain in {sorted(domains)}")


# --------------------------------------------------------------------------
# inner loop and hypergradient


@dataclass
class Trajectory:
    thetas: list            # theta_0 .. theta_G (flat)
    losses: list            # inner loss at theta_0 .. theta_{G-1}
    grads: list             # raw (unclipped) gradients at theta_0 .. theta_{G-1}

    @property
    def final(self) -> np.ndarray:
        return self.thetas[-1]


def inner_adapt(objective: Objective, names, phi, lr: float, steps: int, clip: float) -> Trajectory:
    theta = np.array(phi, dtype=np.float64)
    traj = Trajectory([theta.copy()], [], [])
    for g_step in range(steps):
        loss, g = value_and_grad(objective, names, theta)
        if not (np.isfinite(loss) and np.all(np.isfinite(g))):
            raise NonFiniteLoss(f"non-finite inner loss at step {g_step}",
                                {"step": g_step, "loss": loss,
                                 "grad_norm": float(np.linalg.norm(g)),
                                 "theta_norm": float(np.linalg.norm(theta))})
        theta = theta - lr * clip_grad(g, clip)
        COUNTERS["inner_steps"] += 1
        traj.thetas.append(theta.copy())
        traj.losses.append(loss)
        traj.grads.append(g)
    return traj


def hypergradient(inner: Objective, outer: Objective, names, phi, lr: float, steps: int,
                  clip: float, mode: str = "first-order"):
    """Returns (outer loss, d outer / d phi, trajectory)."""
    traj = inner_adapt(inner, names, phi, lr, steps, clip)
    loss, v = value_and_grad(outer, names, traj.final)
    if mode == "second-order":
        for g in range(steps - 1, -1, -1):
            w = clip_jvp(traj.grads[g], clip, v)
            v = v - lr * hvp(inner, names, traj.thetas[g], w)
    elif mode != "first-order":
        raise ValueError(f"unknown mode {mode!r}")
    return loss, v, traj


@dataclass
class StepResult:
    phi: np.ndarray
    theta: np.ndarray
    outer_loss: float
    inner_losses: list
    hypergrad_norm: float
    skipped: bool = False
    reason: str = ""


def meta_step(phi: LearnableTokens, split: DomainSplit, train_tasks, test_task: Task,
              pipe: Pipeline, cfg: OptimConfig, update_outer: bool = True) -> StepResult:
    _check_tasks(split.meta_train, train_tasks)
    if test_task.domain != split.meta_test:
        raise ValueError("test task must come from the meta-test domain")
    names = phi.names()
    x = phi.flat()
    inner = summed_objective(train_tasks, pipe, cfg)
    outer = summed_objective([test_task], pipe, cfg)
    try:
        loss, hg, traj = hypergradient(inner, outer, names, x, cfg.inner_lr, cfg.inner_steps,
                                       cfg.clip, cfg.mode)
    except NonFiniteLoss as exc:
        return StepResult(x, x, float("nan"), [], float("nan"), True, f"{exc} {exc.diagnostics}")
    if not (np.isfinite(loss) and np.all(np.isfinite(hg))):
        return StepResult(x, traj.final, loss, traj.losses, float("nan"), True,
                          "non-finite hypergradient")
    new = x
    if update_outer:
        new = x - cfg.outer_lr * clip_grad(hg, cfg.clip)
        COUNTERS["outer_updates"] += 1
    return StepResult(new, traj.final, loss, traj.losses, float(np.linalg.norm(hg)))


# --------------------------------------------------------------------------
# training


def schedule_rng(seed: int, train_domains) -> np.random.Generator:
    tag = int(hashlib.sha256("|".join(sorted(train_domains)).encode()).hexdigest()[:8], 16)
    return np.random.default_rng([int(seed), tag, 0x7A1])


def sample_task(rng: np.random.Generator, domain: str, classes=TRAIN_CLASSES) -> Task:
    cls = classes[int(rng.integers(len(classes)))]
    n = int(rng.integers(MIN_COUNT, MAX_COUNT + 1))
    return Task(domain, cls, n, int(rng.integers(2**31)))


@dataclass
class TrainResult:
    phi: LearnableTokens
    theta: LearnableTokens          # adapted tokens of the last iteration
    train_domains: tuple
    held_out: str | None
    outer_updates: int
    inner_steps: int
    skipped: int
    schedule: list                  # meta-test domain per iteration
    classes_seen: list
    log: list = field(default_factory=list)
    seconds: float = 0.0


LOG_FIELDS = ("iteration", "meta_test", "meta_train", "test_class", "test_count",
              "inner_loss_first", "inner_loss_last", "outer_loss", "hypergrad_norm",
              "phi_norm", "skipped")


def config_hash(cfg: OptimConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode()).hexdigest()[:16]


def train(pipe: Pipeline, train_domains, cfg: OptimConfig, token_names=("e_count", "e_style"),
          update_outer: bool = True, log_path=None, checkpoint_path=None,
          provenance: dict | None = None, max_nonfinite: int = 5) -> TrainResult:
    """Meta-train the tokens on a leave-one-out fold.

    ``update_outer=False`` keeps phi at its initialisation and returns the
    last iteration's adapted tokens (the inner-loop-only ablation).
    """
    train_domains = tuple(train_domains)
    if len(train_domains) < 2:
        raise ValueError("need at least two training domains")
    if len(set(train_domains)) != len(train_domains):
        raise ValueError("duplicate training domain")
    held = [d for d in DOMAINS if d not in train_domains]
    held_out = held[0] if len(held) == 1 else None
    tokens = init_tokens(cfg.seed, pipe.vocab.dim).only(*token_names)
    names = tokens.names()
    rng = schedule_rng(cfg.seed, train_domains)
    phi = tokens.flat()
    theta = phi.copy()
    start = dict(COUNTERS)
    t0 = time.perf_counter()
    log, schedule, classes_seen = [], [], set()
    skipped = streak = 0
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
    try:
        with forbid_domains(held):
            for it in range(cfg.iterations):
                meta_test = train_domains[int(rng.integers(len(train_domains)))]
                split = DomainSplit(tuple(d for d in train_domains if d != meta_test), meta_test,
                                    held_out)
                tasks = {d: sample_task(rng, d) for d in train_domains}
                classes_seen.update(t.cls for t in tasks.values())
                res = meta_step(tokens.with_flat(phi), split, [tasks[d] for d in split.meta_train],
                                tasks[meta_test], pipe, cfg, update_outer=update_outer)
                schedule.append(meta_test)
                if res.skipped:
                    skipped += 1
                    streak += 1
                    if streak >= max_nonfinite:
                        raise NonFiniteLoss(f"{streak} consecutive non-finite iterations",
                                            {"iteration": it, "reason": res.reason})
                else:
                    streak = 0
                    phi, theta = res.phi, res.theta
                row = {"iteration": it, "meta_test": meta_test,
                       "meta_train": "+".join(split.meta_train),
                       "test_class": tasks[meta_test].cls, "test_count": tasks[meta_test].count,
                       "inner_loss_first": _fmt(res.inner_losses[0] if res.inner_losses else np.nan),
                       "inner_loss_last": _fmt(res.inner_losses[-1] if res.inner_losses else np.nan),
                       "outer_loss": _fmt(res.outer_loss), "hypergrad_norm": _fmt(res.hypergrad_norm),
                       "phi_norm": _fmt(float(np.linalg.norm(phi))), "skipped": int(res.skipped)}
                log.append(row)
                if writer is not None:
                    writer.writerow(row)
                    fh.flush()
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, tokens.with_flat(phi), tokens.with_flat(theta),
                                    cfg, train_domains, it + 1, sorted(classes_seen),
                                    update_outer, provenance)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(phi=tokens.with_flat(phi), theta=tokens.with_flat(theta),
                       train_domains=train_domains, held_out=held_out,
                       outer_updates=COUNTERS["outer_updates"] - start["outer_updates"],
                       inner_steps=COUNTERS["inner_steps"] - start["inner_steps"],
                       skipped=skipped, schedule=schedule, classes_seen=sorted(classes_seen),
                       log=log, seconds=time.perf_counter() - t0)


def _fmt(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------
# checkpoints


CHECKPOINT_VERSION = 1


def _tok_json(t: LearnableTokens) -> dict:
    return {n: getattr(t, n).tolist() for n in t.names()}


def _tok_from(d: dict) -> LearnableTokens:
    return LearnableTokens(e_count=np.array(d["e_count"]) if "e_count" in d else None,
                           e_style=np.array(d["e_style"]) if "e_style" in d else None)


def save_checkpoint(path, phi: LearnableTokens, theta: LearnableTokens, cfg: OptimConfig,
                    train_domains, iteration: int, classes_seen, update_outer: bool = True,
                    provenance: dict | None = None) -> None:
    rec = {"version": CHECKPOINT_VERSION, "iteration": iteration, "phi": _tok_json(phi),
           "theta": _tok_json(theta), "config": asdict(cfg), "config_hash": config_hash(cfg),
           "train_domains": list(train_domains), "classes_seen": list(classes_seen),
           "update_outer": bool(update_outer), "provenance": provenance or {}}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(rec, sort_keys=True, indent=1))
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    phi: LearnableTokens
    theta: LearnableTokens
    config: OptimConfig
    train_domains: tuple
    iteration: int
    classes_seen: list
    update_outer: bool
    provenance: dict

    def tokens(self) -> LearnableTokens:
        """Tokens used at test time: phi, or the adapted theta for inner-only runs."""
        return self.phi if self.update_outer else self.theta


def load_checkpoint(path) -> Checkpoint:
    rec = json.loads(Path(path).read_text())
    if rec.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {rec.get('version')} != {CHECKPOINT_VERSION}")
    return Checkpoint(phi=_tok_from(rec["phi"]), theta=_tok_from(rec["theta"]),
                      config=OptimConfig(**rec["config"]), train_domains=tuple(rec["train_domains"]),
                      iteration=rec["iteration"], classes_seen=rec["classes_seen"],
                      update_outer=rec["update_outer"], provenance=rec["provenance"])


# --------------------------------------------------------------------------
# test time


def apply_at_test(spec: PromptSpec, tokens: LearnableTokens, pipe: Pipeline,
                  noise_seed: int) -> RenderedImage:
    """Generate with the learned tokens inserted; no optimisation happens here."""
    before = dict(COUNTERS)
    spec = PromptSpec(spec.domain, spec.count, spec.cls, include_learned_tokens=True)
    img = generate(spec, tokens, noise_seed, pipe.vocab, pipe.weights)
    if COUNTERS != before:
        raise RuntimeError("optimisation step taken during apply_at_test")
    return img
