"""State encoder: frozen feature extractors, trainable projections and layer norm."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionMismatch
from .memory import Memory, get_tokenizer, render_context
from .supernet import ENTRY

FEATURE_DIM = 64
PROJECTION_DIMS = (256, 128, 128)
STATE_DIM = sum(PROJECTION_DIMS)
LN_EPS = 1e-5
SEP_TOKEN = "[SEP]"


@dataclass(frozen=True)
class State:
    query: str
    image: np.ndarray
    context: str
    memory: Memory = field(default_factory=Memory)
    position: str = ENTRY


def _seed_of(*parts) -> int:
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class HashingExtractors:
    """Frozen desk-scale feature maps.

    * ``image``: seeded Gaussian random projection of the flattened image block.
    * ``text``: bag of hashed unigram and bigram embeddings of ``q [SEP] C``.
    * ``memory``: mean of hashed token embeddings over the rendered memory context.

    Nothing here is trainable; outputs depend only on the inputs and ``seed``.
    """

    def __init__(self, dim: int = FEATURE_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._tokens: dict[str, np.ndarray] = {}
        self._proj: dict[tuple, np.ndarray] = {}
        self._text: dict[tuple[str, str], np.ndarray] = {}
        self._image: dict[bytes, np.ndarray] = {}

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.dim, self.dim, self.dim)

    def _embed(self, token: str) -> np.ndarray:
        vec = self._tokens.get(token)
        if vec is None:
            rng = np.random.default_rng(_seed_of("tok", self.seed, token))
            vec = rng.standard_normal(self.dim)
            vec.setflags(write=False)
            self._tokens[token] = vec
        return vec

    def image(self, image) -> np.ndarray:
        arr = np.asarray(image, dtype=np.float64)
        if arr.size == 0:
            return np.zeros(self.dim)
        key = repr(arr.shape).encode() + arr.tobytes()
        out = self._image.get(key)
        if out is None:
            proj = self._proj.get(arr.shape)
            if proj is None:
                rng = np.random.default_rng(_seed_of("img", self.seed, arr.shape))
                proj = rng.standard_normal((self.dim, arr.size)) / np.sqrt(arr.size)
                self._proj[arr.shape] = proj
            out = proj @ arr.ravel()
            out.setflags(write=False)
            self._image[key] = out
        return out

    def text(self, query: str, context: str) -> np.ndarray:
        key = (query, context)
        out = self._text.get(key)
        if out is None:
            tokens = get_tokenizer()(f"{query} {SEP_TOKEN} {context}")
            grams = tokens + [a + " " + b for a, b in zip(tokens, tokens[1:])]
            out = np.sum([self._embed(g) for g in grams], axis=0) / np.sqrt(len(grams))
            out.setflags(write=False)
            self._text[key] = out
        return out

    def memory(self, tokens) -> np.ndarray:
        if not tokens:
            return np.zeros(self.dim)
        return np.mean([self._embed(t) for t in tokens], axis=0)

    def __call__(self, state: State) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.image(state.image), self.text(state.query, state.context),
                self.memory(render_context(state.memory)))


@dataclass
class EncoderParams:
    w_image: np.ndarray
    w_query: np.ndarray
    w_memory: np.ndarray

    def __post_init__(self):
        dims = (self.w_image.shape[0], self.w_query.shape[0], self.w_memory.shape[0])
        if dims != PROJECTION_DIMS:
            raise DimensionMismatch(f"projection output dims {dims}, expected {PROJECTION_DIMS}")


def init_encoder_params(rng: np.random.Generator, in_dims=(FEATURE_DIM,) * 3) -> EncoderParams:
    mats = []
    for out_dim, in_dim in zip(PROJECTION_DIMS, in_dims):
        bound = 1.0 / np.sqrt(in_dim)
        mats.append(rng.uniform(-bound, bound, size=(out_dim, in_dim)))
    return EncoderParams(*mats)


def layer_norm(z, eps: float = LN_EPS):
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] < 2:
        raise DimensionMismatch("layer_norm needs at least 2 features")
    mu = z.mean(axis=-1, keepdims=True)
    centered = z - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps)


def layer_norm_backward(dy, y, z, eps: float = LN_EPS):
    """Gradient wrt the input of :func:`layer_norm` given its output ``y``."""
    var = np.var(z, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return inv_std * (dy - dy.mean(axis=-1, keepdims=True)
                      - y * np.mean(dy * y, axis=-1, keepdims=True))


def project(features, params: EncoderParams) -> np.ndarray:
    """Concatenate the three projections; ``features`` rows are (image, text, memory)."""
    x_img, x_txt, x_mem = features
    for x, w in ((x_img, params.w_image), (x_txt, params.w_query), (x_mem, params.w_memory)):
        if np.shape(x)[-1] != w.shape[1]:
            raise DimensionMismatch(f"feature dim {np.shape(x)[-1]} vs projection input {w.shape[1]}")
    return np.concatenate([x_img @ params.w_image.T, x_txt @ params.w_query.T,
                           x_mem @ params.w_memory.T], axis=-1)


def encode_state(state: State, extractors, params: EncoderParams) -> np.ndarray:
    return layer_norm(project(extractors(state), params))
