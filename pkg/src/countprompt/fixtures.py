"""Frozen fixtures shared by every experiment, and their on-disk format.

Each fixture is one ``.npz`` file holding its arrays plus a JSON ``meta``
record (kind, version, seed, checksum). Loading recomputes the checksum and
refuses files whose version or checksum does not match.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .generator import GeneratorWeights, make_weights, slot_anchors
from .perception import (CALIBRATION_VERSION, Calibration, SemanticScorer, SoftCounterConfig,
                         calibrate, fit_scorer)
from .prompt import DOMAINS, Vocabulary, register_unseen_groups

FIXTURE_VERSION = 1
FILES = {"vocab": "vocab.npz", "generator": "generator.npz", "scorer": "scorer.npz",
         "calibration": "calibration.npz"}


class FixtureError(RuntimeError):
    """Missing, corrupt or version-mismatched fixture."""


@dataclass(frozen=True)
class Pipeline:
    """Everything frozen: embeddings, generator, scorer, counter calibration."""

    vocab: Vocabulary
    weights: GeneratorWeights
    scorer: SemanticScorer
    calibration: Calibration
    seed: int = 0

    def counter(self, mode: str = "static") -> SoftCounterConfig:
        return self.calibration.soft_config(mode)

    def checksums(self) -> dict:
        return {"vocab": self.vocab.checksum(), "generator": self.weights.checksum(),
                "scorer": self.scorer.checksum(),
                "calibration": calibration_checksum(self.calibration)}


def build_pipeline(seed: int = 0, dim: int = 32, magnitude_scale: float = 1.0,
                   bind_gain: float = 1.0, unseen: bool = True) -> Pipeline:
    vocab, weights, scorer = build_base(seed, dim, magnitude_scale, bind_gain, unseen)
    cal = calibrate(weights, seed)
    return Pipeline(vocab=vocab, weights=weights, scorer=scorer, calibration=cal, seed=int(seed))


# --------------------------------------------------------------------------
# calibration <-> flat dict


def _calibration_record(cal: Calibration) -> dict:
    c = cal.counter
    return {"sigma_t": c.sigma_t, "beta": c.beta, "tau": c.tau, "peak_ref": c.peak_ref,
            "scale_mode": c.scale_mode, "lambda_scale": c.lambda_scale,
            "theta_hard": cal.theta_hard, "lambda_dynamic": cal.lambda_dynamic,
            "heldout_error": cal.heldout_error, "per_domain_error": cal.per_domain_error,
            "weights_checksum": cal.weights_checksum, "version": cal.version}


def calibration_checksum(cal: Calibration) -> str:
    import hashlib
    blob = json.dumps(_calibration_record(cal), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _calibration_from(rec: dict) -> Calibration:
    counter = SoftCounterConfig(sigma_t=rec["sigma_t"], beta=rec["beta"], tau=rec["tau"],
                                scale_mode=rec["scale_mode"], lambda_scale=rec["lambda_scale"],
                                peak_ref=rec["peak_ref"])
    return Calibration(counter=counter, theta_hard=rec["theta_hard"],
                       lambda_dynamic=rec["lambda_dynamic"], heldout_error=rec["heldout_error"],
                       per_domain_error=rec["per_domain_error"],
                       weights_checksum=rec["weights_checksum"], version=rec["version"])


# --------------------------------------------------------------------------
# file I/O


def _write(path: Path, kind: str, seed: int, checksum: str, arrays: dict, extra: dict | None = None):
    meta = {"kind": kind, "version": FIXTURE_VERSION, "seed": int(seed), "checksum": checksum}
    meta.update(extra or {})
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    os.replace(tmp, path)


def _read(path: Path, kind: str) -> tuple[dict, dict]:
    if not path.exists():
        raise FixtureError(f"missing fixture {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            arrays = {k: z[k] for k in z.files if k != "meta"}
    except (OSError, ValueError, KeyError) as exc:
        raise FixtureError(f"unreadable fixture {path}: {exc}") from exc
    if meta.get("kind") != kind:
        raise FixtureError(f"{path}: expected a {kind} fixture, found {meta.get('kind')!r}")
    if meta.get("version") != FIXTURE_VERSION:
        raise FixtureError(f"{path}: fixture version {meta.get('version')} != {FIXTURE_VERSION}")
    return meta, arrays


def existing_checksums(directory) -> dict:
    out = {}
    for kind, name in FILES.items():
        p = Path(directory) / name
        if p.exists():
            try:
                out[kind] = _read(p, kind)[0]["checksum"]
            except FixtureError:
                out[kind] = None
    return out


def save_base(pipe_or_parts, directory, force: bool = False) -> dict:
    """Write the vocabulary, generator and scorer fixtures. Existing files
    with a different checksum are only replaced with ``force``."""
    vocab, weights, scorer = (pipe_or_parts.vocab, pipe_or_parts.weights, pipe_or_parts.scorer) \
        if isinstance(pipe_or_parts, Pipeline) else pipe_or_parts
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    sums = {"vocab": vocab.checksum(), "generator": weights.checksum(), "scorer": scorer.checksum()}
    _refuse_clash(d, sums, force)
    _write(d / FILES["vocab"], "vocab", vocab.seed, sums["vocab"],
           {**{f"w:{k}": a for k, a in vocab.words.items()},
            **{f"u:{n}": vocab[n] for n in vocab.unseen_classes}},
           {"dim": vocab.dim, "magnitude_scale": vocab.magnitude_scale,
            "classes": list(vocab.classes),
            "unseen": [[n, vocab.unseen_base(n)] for n in vocab.unseen_classes]})
    _write(d / FILES["generator"], "generator", weights.seed, sums["generator"], weights.arrays(),
           {"dim": weights.dim, "bind_gain": weights.bind_gain, "blob_sigma": weights.blob_sigma,
            "size": weights.size})
    _write(d / FILES["scorer"], "scorer", scorer.seed, sums["scorer"],
           {"projection": scorer.projection})
    return sums


def save_calibration(cal: Calibration, directory, seed: int, force: bool = False) -> str:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    sums = {"calibration": calibration_checksum(cal)}
    _refuse_clash(d, sums, force)
    _write(d / FILES["calibration"], "calibration", seed, sums["calibration"], {},
           {"record": _calibration_record(cal)})
    return sums["calibration"]


def _refuse_clash(d: Path, sums: dict, force: bool) -> None:
    old = existing_checksums(d)
    clash = [k for k in sums if k in old and old[k] != sums[k]]
    if clash and not force:
        raise FixtureError(f"fixtures in {d} differ for {', '.join(clash)}; use --force to overwrite")


def save_pipeline(pipe: Pipeline, directory, force: bool = False) -> dict:
    sums = save_base(pipe, directory, force)
    sums["calibration"] = save_calibration(pipe.calibration, directory, pipe.seed, force)
    return sums


def build_base(seed: int = 0, dim: int = 32, magnitude_scale: float = 1.0,
               bind_gain: float = 1.0, unseen: bool = True):
    vocab = Vocabulary(seed, dim=dim, magnitude_scale=magnitude_scale)
    weights = make_weights(seed, dim=dim, bind_gain=bind_gain)
    scorer = fit_scorer(vocab, weights, seed)
    if unseen:
        register_unseen_groups(vocab)
    return vocab, weights, scorer


def load_base(directory):
    d = Path(directory)
    vm, va = _read(d / FILES["vocab"], "vocab")
    vocab = Vocabulary.from_arrays(vm["seed"], vm["dim"], vm["magnitude_scale"], vm["classes"],
                                   {k[2:]: a for k, a in va.items() if k.startswith("w:")})
    if vocab.checksum() != vm["checksum"]:
        raise FixtureError(f"{d / FILES['vocab']}: checksum mismatch")
    for name, base in vm.get("unseen", []):
        vocab._register(name, base, va[f"u:{name}"])

    gm, ga = _read(d / FILES["generator"], "generator")
    for a in ga.values():
        a.setflags(write=False)
    weights = GeneratorWeights(seed=gm["seed"], dim=gm["dim"], bind_gain=gm["bind_gain"],
                               blob_sigma=gm["blob_sigma"], size=gm["size"], **ga)
    if weights.checksum() != gm["checksum"]:
        raise FixtureError(f"{d / FILES['generator']}: checksum mismatch")
    if not np.array_equal(weights.anchors, slot_anchors(weights.n_slots, weights.size)):
        raise FixtureError(f"{d / FILES['generator']}: anchor grid does not match this build")

    sm, sa = _read(d / FILES["scorer"], "scorer")
    proj = sa["projection"]
    proj.setflags(write=False)
    scorer = SemanticScorer(projection=proj, seed=sm["seed"])
    if scorer.checksum() != sm["checksum"]:
        raise FixtureError(f"{d / FILES['scorer']}: checksum mismatch")
    return vocab, weights, scorer


def load_pipeline(directory) -> Pipeline:
    d = Path(directory)
    vocab, weights, scorer = load_base(d)
    cm, _ = _read(d / FILES["calibration"], "calibration")
    cal = _calibration_from(cm["record"])
    if cal.version != CALIBRATION_VERSION:
        raise FixtureError(f"calibration version {cal.version} != {CALIBRATION_VERSION}")
    if calibration_checksum(cal) != cm["checksum"]:
        raise FixtureError(f"{d / FILES['calibration']}: checksum mismatch")
    if cal.weights_checksum != weights.checksum():
        raise FixtureError("calibration was fitted for different generator weights")
    if set(cal.theta_hard) != set(DOMAINS):
        raise FixtureError("calibration does not cover every domain")
    return Pipeline(vocab=vocab, weights=weights, scorer=scorer, calibration=cal, seed=cm["seed"])


def with_calibration(pipe: Pipeline, cal: Calibration) -> Pipeline:
    return replace(pipe, calibration=cal)
