"""Frozen differentiable stand-in for a text-to-image model.

prompt embedding -> text features -> scene (per-slot presence and centre)
-> Gaussian blob image -> domain style transform.

Count sensitivity is planted: every slot's presence map contains a positive
multiple of one unit direction ``u_count``, and slot thresholds along that
direction are spread so the expected count ramps from 0 to K. Biases are set
so the prompt without learned tokens lands near K/3 blobs regardless of N.
"""

from __future__ import annotations

import contextlib
import contextvars
import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .prompt import DOMAINS, LearnableTokens, PromptSpec, Vocabulary, prompt_items

IMAGE_SIZE = 64
N_SLOTS = 32
BLOB_SIGMA = 2.0
JITTER_PX = 3.0
NOISE_AMPLITUDE = 0.1


class DomainLeakError(RuntimeError):
    """A forbidden (held-out) domain reached the generator."""


_forbidden: contextvars.ContextVar[frozenset] = contextvars.ContextVar("forbidden", default=frozenset())


@contextlib.contextmanager
def forbid_domains(domains):
    token = _forbidden.set(_forbidden.get() | frozenset(domains))
    try:
        yield
    finally:
        _forbidden.reset(token)


def gaussian_kernel(sigma: float, radius: int | None = None, normalize: str = "sum") -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma)) if radius is None else int(radius)
    r = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma * sigma))
    if normalize == "sum":
        g /= g.sum()
    return g


def slot_anchors(n_slots: int = N_SLOTS, size: int = IMAGE_SIZE) -> np.ndarray:
    """Cell centres of a ceil(sqrt K) square grid, corners dropped first."""
    side = int(np.ceil(np.sqrt(n_slots)))
    cell = size / side
    cells = [(r, c) for r in range(side) for c in range(side)]
    corners = {(0, 0), (0, side - 1), (side - 1, 0), (side - 1, side - 1)}
    extra = len(cells) - n_slots
    drop = sorted(corners)[:extra] if extra <= 4 else None
    if drop is None:
        raise ValueError(f"cannot fit {n_slots} slots on a {side}x{side} grid")
    cells = [rc for rc in cells if rc not in drop]
    return np.array([((c + 0.5) * cell, (r + 0.5) * cell) for r, c in cells], dtype=np.float64)


@dataclass(frozen=True)
class GeneratorWeights:
    seed: int
    dim: int
    u_count: np.ndarray      # (E,) unit, orthogonal to the all-ones direction
    slot_maps: np.ndarray    # (K, E) = a_bar_k + gain_k * u_count
    gains: np.ndarray        # (K,) > 0
    thresholds: np.ndarray   # (K,) positions along u_count where slots switch on
    biases: np.ndarray       # (K,)
    offset_maps: np.ndarray  # (2K, E) rows [x_0, y_0, x_1, y_1, ...]
    anchors: np.ndarray      # (K, 2)
    bind_gain: float
    blob_sigma: float = BLOB_SIGMA
    size: int = IMAGE_SIZE

    @property
    def n_slots(self) -> int:
        return self.gains.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in
                ("u_count", "slot_maps", "gains", "thresholds", "biases", "offset_maps", "anchors")}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.arrays().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        h.update(repr((self.seed, self.dim, self.bind_gain, self.blob_sigma, self.size)).encode())
        return h.hexdigest()


def make_weights(seed: int = 0, dim: int = 32, n_slots: int = N_SLOTS, *,
                 gain: float = 12.0, spread: float = 4.0, base_fraction: float = 1.0 / 3.0,
                 slot_noise: float = 0.4, jitter_scale: float = 0.5,
                 bind_gain: float = 1.0) -> GeneratorWeights:
    """Draw frozen generator weights.

    ``spread`` is the span of slot thresholds along ``u_count`` (so one extra
    blob costs ``spread / K``); ``base_fraction`` of the thresholds sit below
    zero, which puts the no-token prompt near ``base_fraction * K`` blobs.
    """
    rng = np.random.default_rng([int(seed), 0x6E4])
    u = rng.standard_normal(dim)
    ones = np.ones(dim) / np.sqrt(dim)
    u -= (u @ ones) * ones
    u /= np.linalg.norm(u)
    gains = gain * rng.uniform(0.75, 1.25, n_slots)
    levels = spread * ((np.arange(n_slots) + 0.5) / n_slots - base_fraction)
    thresholds = rng.permutation(levels)
    a_bar = slot_noise / np.sqrt(dim) * rng.standard_normal((n_slots, dim))
    a_bar -= np.outer(a_bar @ u, u)
    slot_maps = a_bar + gains[:, None] * u[None, :]
    biases = -gains * thresholds
    offset_maps = jitter_scale / np.sqrt(dim) * rng.standard_normal((2 * n_slots, dim))
    w = GeneratorWeights(seed=int(seed), dim=dim, u_count=u, slot_maps=slot_maps, gains=gains,
                         thresholds=thresholds, biases=biases, offset_maps=offset_maps,
                         anchors=slot_anchors(n_slots), bind_gain=float(bind_gain))
    for v in w.arrays().values():
        v.setflags(write=False)
    return w


@dataclass
class SceneParams:
    presence: np.ndarray     # (K,) in (0, 1)
    centers: np.ndarray      # (K, 2) (x, y)
    sigma: float = BLOB_SIGMA


@dataclass
class RenderedImage:
    pixels: np.ndarray
    domain: str | None
    spec: PromptSpec | None = None
    noise_seed: int | None = None


def slot_noise(noise_seed: int, n_slots: int) -> np.ndarray:
    return NOISE_AMPLITUDE * np.random.default_rng([int(noise_seed), 0x5107]).standard_normal(n_slots)


# --------------------------------------------------------------------------
# graph builders (operate on tape Vars)


def text_features_graph(tape: ad.Tape, spec: PromptSpec, token_vars: dict, vocab: Vocabulary,
                        weights: GeneratorWeights) -> ad.Var:
    """Mean-pooled sequence plus a binding term for each learned token.

    A learned token reads the word to its left through an elementwise product
    (``e_style * domain word``, ``e_count * number word``), which is how a
    single shared token can respond differently to different number words.
    """
    tokens = None
    if spec.include_learned_tokens:
        tokens = LearnableTokens(e_count=token_vars.get("e_count"), e_style=token_vars.get("e_style"))
    items = prompt_items(spec, tokens)
    seq = [token_vars[n] if n in ("e_count", "e_style") else tape.const(vocab[n]) for n in items]
    pooled = seq[0]
    for x in seq[1:]:
        pooled = pooled + x
    feats = pooled * (1.0 / len(seq))
    for pos, name in enumerate(items):
        if name in ("e_count", "e_style"):
            feats = feats + (seq[pos] * seq[pos - 1]) * weights.bind_gain
    return feats


def decode_graph(feats: ad.Var, noise_seed: int, weights: GeneratorWeights):
    tape = feats.tape
    eta = slot_noise(noise_seed, weights.n_slots)
    logits = tape.const(weights.slot_maps) @ feats + (weights.biases + eta)
    presence = ad.sigmoid(logits)
    offsets = ad.tanh(tape.const(weights.offset_maps) @ feats) * JITTER_PX
    centers = ad.reshape(offsets, (weights.n_slots, 2)) + weights.anchors
    return presence, centers


def render_graph(presence: ad.Var, centers: ad.Var, weights: GeneratorWeights) -> ad.Var:
    return ad.render(presence, centers, weights.blob_sigma, weights.size, weights.size)


PAINT_SIGMA = 1.5
PAINT_CONTRAST = 1.2
SKETCH_SIGMAS = (1.0, 2.0)
_PAINT_KERNEL = gaussian_kernel(PAINT_SIGMA)
_DOG_KERNEL = (gaussian_kernel(SKETCH_SIGMAS[0], radius=6) - gaussian_kernel(SKETCH_SIGMAS[1], radius=6))


def stylize_graph(image: ad.Var, domain: str) -> ad.Var:
    if domain == "photo":
        return image
    if domain == "painting":
        return ad.conv2d(image, _PAINT_KERNEL) * PAINT_CONTRAST
    if domain == "cartoon":
        return ad.tanh((image - 0.5) * 3.0) * 0.5 + 0.5
    if domain == "sketch":
        return ad.clamp01(ad.conv2d(image, _DOG_KERNEL))
    raise ValueError(f"unknown domain {domain!r}")


def generate_graph(tape: ad.Tape, spec: PromptSpec, token_vars: dict, noise_seed: int,
                   vocab: Vocabulary, weights: GeneratorWeights) -> ad.Var:
    spec.validate(vocab)
    if spec.domain in _forbidden.get():
        raise DomainLeakError(f"generate called with forbidden domain {spec.domain!r}")
    feats = text_features_graph(tape, spec, token_vars, vocab, weights)
    presence, centers = decode_graph(feats, noise_seed, weights)
    return stylize_graph(render_graph(presence, centers, weights), spec.domain)


def token_leaves(tape: ad.Tape, tokens: LearnableTokens | None) -> dict:
    if tokens is None:
        return {}
    return {n: tape.leaf(getattr(tokens, n)) for n in tokens.names()}


# --------------------------------------------------------------------------
# array API


def encode(spec: PromptSpec, tokens: LearnableTokens | None, vocab: Vocabulary,
           weights: GeneratorWeights) -> np.ndarray:
    tape = ad.Tape()
    return ad.value_of(text_features_graph(tape, spec, token_leaves(tape, tokens), vocab, weights).value)


def decode(features, noise_seed: int, weights: GeneratorWeights) -> SceneParams:
    tape = ad.Tape()
    p, c = decode_graph(tape.leaf(np.asarray(features, dtype=np.float64)), noise_seed, weights)
    return SceneParams(presence=p.value, centers=c.value, sigma=weights.blob_sigma)


def render(scene: SceneParams, size: int = IMAGE_SIZE) -> np.ndarray:
    from . import kernels
    return kernels.render_blobs(np.asarray(scene.presence, dtype=np.float64),
                                np.asarray(scene.centers, dtype=np.float64), scene.sigma, size, size)


def stylize(image, domain: str) -> np.ndarray:
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}")
    tape = ad.Tape()
    return ad.value_of(stylize_graph(tape.leaf(np.asarray(image, dtype=np.float64)), domain).value)


def generate(spec: PromptSpec, tokens: LearnableTokens | None, noise_seed: int,
             vocab: Vocabulary, weights: GeneratorWeights) -> RenderedImage:
    tape = ad.Tape()
    img = generate_graph(tape, spec, token_leaves(tape, tokens), noise_seed, vocab, weights)
    return RenderedImage(pixels=ad.value_of(img.value), domain=spec.domain, spec=spec, noise_seed=noise_seed)
