"""Counting and semantic scoring on rendered images.

* a differentiable soft counter: matched-filter response, per-pixel sigmoid
  detection scores, scaled sum;
* a hard counter for evaluation: thresholded 3x3 local maxima with a minimum
  peak separation;
* a frozen linear image-to-text projection scored by cosine similarity.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import kernels
from .generator import (BLOB_SIGMA, IMAGE_SIZE, GeneratorWeights, SceneParams, gaussian_kernel,
                        generate, render, stylize)
from .prompt import DOMAINS, MAX_COUNT, MIN_COUNT, PromptSpec, Vocabulary, semantic_target

TEMPLATE_RADIUS = 2
PEAK_SEPARATION = 4.0
ORACLE_JITTER = 2.0
DYNAMIC_FLOOR = 0.25
POOL = 8


def matched_template(sigma: float = BLOB_SIGMA, radius: int = TEMPLATE_RADIUS) -> np.ndarray:
    """Zero-mean Gaussian template scaled so a unit blob centred on a pixel
    responds 1. Removing the mean makes flat regions respond 0 and keeps the
    response of neighbouring blobs from leaking into each other."""
    t = gaussian_kernel(sigma, radius=radius, normalize="none")
    t = t - t.mean()
    return t / (t * t).sum()


@dataclass
class SoftCounterConfig:
    sigma_t: float = BLOB_SIGMA
    beta: dict = field(default_factory=lambda: {d: 0.35 for d in DOMAINS})
    tau: dict = field(default_factory=lambda: {d: 0.035 for d in DOMAINS})
    scale_mode: str = "static"
    lambda_scale: float | None = None
    # detection-weighted mean response of a unit blob, per domain (dynamic mode)
    peak_ref: dict = field(default_factory=lambda: {d: 1.0 for d in DOMAINS})

    def __post_init__(self):
        if self.scale_mode not in ("static", "dynamic"):
            raise ValueError(f"unknown scale mode {self.scale_mode!r}")
        for d, t in self.tau.items():
            if not t > 0:
                raise ValueError(f"tau for {d} must be positive")
        if self.lambda_scale is not None and not self.lambda_scale > 0:
            raise ValueError("lambda_scale must be positive")

    @property
    def template(self) -> np.ndarray:
        return matched_template(self.sigma_t)


class UncalibratedError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# soft counter


def response_graph(image: ad.Var, cfg: SoftCounterConfig) -> ad.Var:
    return ad.conv2d(image, cfg.template)


def detect_soft_graph(image: ad.Var, domain: str, cfg: SoftCounterConfig):
    corr = response_graph(image, cfg)
    phi = ad.sigmoid((corr - cfg.beta[domain]) * (1.0 / cfg.tau[domain]))
    return phi, corr


def count_soft_graph(image: ad.Var, domain: str, cfg: SoftCounterConfig) -> ad.Var:
    if cfg.lambda_scale is None:
        raise UncalibratedError("soft counter has no lambda_scale; run calibration first")
    phi, corr = detect_soft_graph(image, domain, cfg)
    mass = ad.sum(phi)
    if cfg.scale_mode == "static":
        return mass * cfg.lambda_scale
    # per-image renormalisation by the detection-weighted mean response,
    # measured relative to a unit blob of the same domain
    peak = ad.sum(phi * corr) * (1.0 / cfg.peak_ref[domain]) / (mass + 1e-12)
    return (mass / ad.max_with(peak, DYNAMIC_FLOOR)) * cfg.lambda_scale


def detect_soft(image, cfg: SoftCounterConfig, domain: str = "photo") -> np.ndarray:
    tape = ad.Tape()
    phi, _ = detect_soft_graph(tape.leaf(_pixels(image)), domain, cfg)
    return phi.value


def count_soft(image, cfg: SoftCounterConfig, domain: str | None = None) -> float:
    domain = domain or getattr(image, "domain", None) or "photo"
    tape = ad.Tape()
    return float(count_soft_graph(tape.leaf(_pixels(image)), domain, cfg).value)


def soft_mass(image, cfg: SoftCounterConfig, domain: str) -> float:
    """Unscaled sum of detection scores (the S_j of calibration)."""
    return float(detect_soft(image, cfg, domain).sum())


def calibrate_scale(masses, counts) -> float:
    """Least-squares ratio ``sum(n S) / sum(S^2)``."""
    s = np.asarray(masses, dtype=np.float64)
    n = np.asarray(counts, dtype=np.float64)
    if s.shape != n.shape or s.size == 0:
        raise ValueError("need equally many masses and counts")
    ss = float(s @ s)
    if ss == 0.0:
        raise ValueError("all detection responses are zero; cannot calibrate")
    return float(n @ s) / ss


def _pixels(image) -> np.ndarray:
    return np.asarray(getattr(image, "pixels", image), dtype=np.float64)


# --------------------------------------------------------------------------
# hard counter


def count_hard(image, threshold: float, min_separation: float = PEAK_SEPARATION) -> int:
    return int(kernels.local_peaks(_pixels(image), threshold, min_separation).shape[0])


# --------------------------------------------------------------------------
# construction oracle scenes


def oracle_scene(n: int, rng: np.random.Generator, weights: GeneratorWeights,
                 min_presence: float = 0.9, min_separation: float = 3.0 * BLOB_SIGMA,
                 jitter: float = ORACLE_JITTER) -> SceneParams:
    """``n`` blobs on distinct slot anchors, jittered, pairwise >= ``min_separation``."""
    k = weights.n_slots
    if not 0 <= n <= k:
        raise ValueError(f"count {n} outside 0..{k}")
    slots = rng.choice(k, size=n, replace=False)
    centers = np.zeros((k, 2))
    presence = np.zeros(k)
    placed: list[np.ndarray] = []
    for s in slots:
        for _ in range(1000):
            c = weights.anchors[s] + rng.uniform(-jitter, jitter, 2)
            if all(np.hypot(*(c - p)) >= min_separation for p in placed):
                break
        else:
            raise RuntimeError("could not place blob with required separation")
        placed.append(c)
        centers[s] = c
        presence[s] = rng.uniform(min_presence, 1.0)
    centers[presence == 0] = weights.anchors[presence == 0]
    return SceneParams(presence=presence, centers=centers, sigma=weights.blob_sigma)


def oracle_image(n: int, domain: str, rng: np.random.Generator, weights: GeneratorWeights,
                 **kw) -> np.ndarray:
    return stylize(render(oracle_scene(n, rng, weights, **kw), weights.size), domain)


def single_blob(domain: str, presence: float = 1.0, size: int = IMAGE_SIZE,
                sigma: float = BLOB_SIGMA) -> np.ndarray:
    c = size // 2
    scene = SceneParams(presence=np.array([presence]), centers=np.array([[c, c]], dtype=np.float64),
                        sigma=sigma)
    return stylize(render(scene, size), domain)


# --------------------------------------------------------------------------
# calibration


CALIBRATION_VERSION = 1


@dataclass
class Calibration:
    """Per-domain detector constants plus the global soft-count scale."""

    counter: SoftCounterConfig
    theta_hard: dict
    lambda_dynamic: float
    heldout_error: float
    per_domain_error: dict
    weights_checksum: str
    version: int = CALIBRATION_VERSION

    def soft_config(self, mode: str | None = None) -> SoftCounterConfig:
        mode = mode or self.counter.scale_mode
        lam = self.counter.lambda_scale if mode == "static" else self.lambda_dynamic
        return replace(self.counter, scale_mode=mode, lambda_scale=lam)

    def count_hard(self, image, domain: str | None = None) -> int:
        domain = domain or getattr(image, "domain", None)
        if domain is None:
            raise ValueError("domain required for hard counting")
        return count_hard(image, self.theta_hard[domain])


def _bisect(f, lo, hi, target, iters=80):
    """Root of f(x) = target for decreasing f on [lo, hi]."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def calibrate(weights: GeneratorWeights, seed: int = 0, n_fit: int = 200, n_heldout: int = 200,
              beta_photo: float = 0.35, tau_ratio: float = 0.1, hard_fraction: float = 0.5,
              sigma_t: float = BLOB_SIGMA) -> Calibration:
    """Fit the detector constants on construction-oracle scenes.

    theta_hard is a fixed fraction of a stylized unit blob's peak. The soft
    counter's scale comes from photo scenes at ``beta_photo``; every other
    domain then gets the beta whose least-squares scale under that lambda is
    exactly 1, and lambda is refitted on all domains. Held-out scenes, drawn
    after the fitting set from the same stream, give the reported error.
    """
    template = matched_template(sigma_t)
    theta = {d: hard_fraction * float(single_blob(d).max()) for d in DOMAINS}
    rng = np.random.default_rng([int(seed), 0xCA1])
    counts = np.arange(MIN_COUNT, MAX_COUNT + 1)

    def draw(n_total):
        out = []
        for j in range(n_total):
            n = int(counts[j % counts.size])
            d = DOMAINS[(j // counts.size + j) % len(DOMAINS)]
            img = oracle_image(n, d, rng, weights)
            out.append((kernels.correlate_same(img, template), n, d, img))
        return out

    fit = draw(n_fit)
    held = draw(n_heldout)

    def masses(rows, b):
        return np.array([_sigmoid((c - b) / (tau_ratio * b)).sum() for c, *_ in rows])

    by_dom = {d: [r for r in fit if r[2] == d] for d in DOMAINS}
    if any(not rows for rows in by_dom.values()):
        raise ValueError("calibration set must cover every domain")
    photo_n = np.array([r[1] for r in by_dom["photo"]], dtype=np.float64)
    lam0 = calibrate_scale(masses(by_dom["photo"], beta_photo), photo_n)
    beta = {"photo": float(beta_photo)}
    for d in DOMAINS[1:]:
        rows = by_dom[d]
        n = np.array([r[1] for r in rows], dtype=np.float64)
        peak = max(float(r[0].max()) for r in rows)
        beta[d] = _bisect(lambda b: lam0 * float(masses(rows, b) @ n), 1e-3 * peak, peak, float(n @ n))
    tau = {d: tau_ratio * b for d, b in beta.items()}
    counter = SoftCounterConfig(sigma_t=sigma_t, beta=beta, tau=tau)
    fit_masses = [float(masses([r], beta[r[2]])[0]) for r in fit]
    lam = calibrate_scale(fit_masses, [r[1] for r in fit])
    peak_ref = {}
    for d in DOMAINS:
        c = kernels.correlate_same(single_blob(d), template)
        phi = _sigmoid((c - beta[d]) / tau[d])
        peak_ref[d] = float((phi * c).sum() / phi.sum())
    counter = replace(counter, lambda_scale=lam, peak_ref=peak_ref)

    dyn_cfg = replace(counter, scale_mode="dynamic", lambda_scale=1.0)
    dyn = [count_soft(img, dyn_cfg, d) for _, _, d, img in fit]
    lam_dyn = calibrate_scale(dyn, [r[1] for r in fit])

    errs = {d: [] for d in DOMAINS}
    for _, n, d, img in held:
        errs[d].append(abs(count_soft(img, counter, d) - n))
    per_domain = {d: float(np.mean(v)) for d, v in errs.items()}
    total = float(np.mean([e for v in errs.values() for e in v]))
    return Calibration(counter=counter, theta_hard=theta, lambda_dynamic=lam_dyn,
                       heldout_error=total, per_domain_error=per_domain,
                       weights_checksum=weights.checksum())


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


# --------------------------------------------------------------------------
# semantic scorer


def pool_matrix(size: int = IMAGE_SIZE, out: int = POOL) -> np.ndarray:
    step = size // out
    m = np.zeros((out, size))
    for i in range(out):
        m[i, i * step:(i + 1) * step] = 1.0 / step
    return m


def pooled_features(image) -> np.ndarray:
    m = pool_matrix(_pixels(image).shape[0])
    return (m @ _pixels(image) @ m.T).reshape(-1)


@dataclass(frozen=True)
class SemanticScorer:
    """Linear map from 8x8 average-pooled pixels to the text embedding space.

    Rows have unit norm. The map is fitted once by ridge regression on
    generated (image, caption) pairs, the way a contrastive model is
    pretrained, then frozen.
    """

    projection: np.ndarray   # (E, 64)
    seed: int

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.projection).tobytes()).hexdigest()

    def features(self, image) -> np.ndarray:
        return self.projection @ pooled_features(image)


def fit_scorer(vocab: Vocabulary, weights: GeneratorWeights, seed: int = 0,
               n_pairs: int = 800, ridge: float = 1e-2, init_scale: float = 0.1) -> SemanticScorer:
    rng = np.random.default_rng([int(seed), 0x5C0])
    feats, targets = [], []
    for j in range(n_pairs):
        spec = PromptSpec(domain=DOMAINS[j % len(DOMAINS)],
                          count=int(rng.integers(MIN_COUNT, MAX_COUNT + 1)),
                          cls=vocab.classes[int(rng.integers(len(vocab.classes)))])
        img = generate(spec, None, int(rng.integers(2**31)), vocab, weights)
        feats.append(pooled_features(img.pixels))
        targets.append(semantic_target(spec, vocab))
    x = np.asarray(feats)
    t = np.asarray(targets)
    prior = init_scale * rng.standard_normal((vocab.dim, x.shape[1]))
    # ridge towards a random prior: (X^T X + r I) P^T = X^T T + r prior^T
    a = x.T @ x + ridge * np.eye(x.shape[1])
    proj = np.linalg.solve(a, x.T @ t + ridge * prior.T).T
    proj /= np.linalg.norm(proj, axis=1, keepdims=True)
    proj.setflags(write=False)
    return SemanticScorer(projection=proj, seed=int(seed))


def semantic_score_graph(image: ad.Var, spec: PromptSpec, scorer: SemanticScorer,
                         vocab: Vocabulary) -> ad.Var:
    tape = image.tape
    m = pool_matrix(image.shape[0])
    pooled = tape.const(m) @ image @ tape.const(m.T)
    f = tape.const(scorer.projection) @ ad.reshape(pooled, (m.shape[0] ** 2,))
    return ad.cosine(f, tape.const(semantic_target(spec, vocab)))


def semantic_score(image, spec: PromptSpec, scorer: SemanticScorer, vocab: Vocabulary) -> float:
    tape = ad.Tape()
    return float(semantic_score_graph(tape.leaf(_pixels(image)), spec, scorer, vocab).value)


def clip_s(score: float, w: float = 100.0) -> float:
    if not w > 0:
        raise ValueError("w must be positive")
    return w * max(float(score), 0.0)


def clip_s_metric(spec: PromptSpec, image, scorer: SemanticScorer, vocab: Vocabulary,
                  w: float = 100.0) -> float:
    return clip_s(semantic_score(image, spec, scorer, vocab), w)
