"""Toy multimodal encoder: attribute tokens and pixels share one embedding space.

Every vocabulary token gets a fixed random unit vector in R^M. Text
descriptions embed as the normalized sum of their tokens' vectors; pixels
embed as the same sum for the entity they show, perturbed by Gaussian noise
and renormalized. Background pixels map to a dedicated background vector.
"""

from __future__ import annotations

import base64

import numpy as np

DEFAULT_M = 16
BACKGROUND_TOKEN = "background"

SUBREGION_NONE = 0
SUBREGION_HANDLE = 1
SUBREGION_HEAD = 2
SUBREGION_TOKENS = {SUBREGION_HANDLE: "handle", SUBREGION_HEAD: "head"}


class UnknownTokenError(KeyError):
    def __init__(self, token):
        super().__init__(token)
        self.token = token

    def __str__(self):
        return f"unknown vocabulary token: {self.token!r}"


class AttributeVocabulary:
    """Immutable map from attribute tokens to fixed unit vectors in R^M."""

    def __init__(self, tokens, master_seed, m=DEFAULT_M):
        tokens = list(dict.fromkeys(tokens))
        if BACKGROUND_TOKEN not in tokens:
            tokens.append(BACKGROUND_TOKEN)
        rng = np.random.default_rng(master_seed)
        vecs = rng.normal(size=(len(tokens), m))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        self._vectors = {tok: vecs[i] for i, tok in enumerate(tokens)}
        for v in self._vectors.values():
            v.setflags(write=False)
        self.m = m
        self.master_seed = master_seed

    def __contains__(self, token):
        return token in self._vectors

    @property
    def tokens(self):
        return list(self._vectors)

    def vector(self, token):
        try:
            return self._vectors[token]
        except KeyError:
            raise UnknownTokenError(token) from None

    def to_manifest(self):
        """Token -> base64 of little-endian float64 components."""
        return {
            "m": self.m,
            "master_seed": self.master_seed,
            "vectors": {
                tok: base64.b64encode(np.ascontiguousarray(v, dtype="<f8").tobytes()).decode()
                for tok, v in self._vectors.items()
            },
        }

    @classmethod
    def from_manifest(cls, manifest):
        vocab = cls.__new__(cls)
        vocab.m = manifest["m"]
        vocab.master_seed = manifest["master_seed"]
        vocab._vectors = {}
        for tok, blob in manifest["vectors"].items():
            v = np.frombuffer(base64.b64decode(blob), dtype="<f8").copy()
            v.setflags(write=False)
            vocab._vectors[tok] = v
        return vocab


def embed_text(vocab: AttributeVocabulary, tokens) -> np.ndarray:
    """Normalized sum of attribute vectors; empty token list embeds to zero."""
    tokens = list(tokens)
    if not tokens:
        return np.zeros(vocab.m)
    total = np.zeros(vocab.m)
    for tok in tokens:
        total += vocab.vector(tok)
    norm = np.linalg.norm(total)
    if norm == 0.0:
        return total
    return total / norm


def embed_pixels(vocab, entity_id_image, subregion_image, entity_attrs,
                 noise_sigma=0.0, seed=0):
    """Embed every pixel of an observation into the shared space.

    entity_attrs maps entity id -> token tuple (e.g. color, category). Tool
    pixels additionally mix in their sub-region token per `subregion_image`.
    Noise is added to the unnormalized attribute sum before renormalizing, so
    the pixel stays close to its text embedding for small sigma; background
    pixels get the exact background vector.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    ids = np.asarray(entity_id_image)
    sub = np.asarray(subregion_image)
    h, w = ids.shape
    sums = np.tile(vocab.vector(BACKGROUND_TOKEN), (h, w, 1))
    for eid in np.unique(ids):
        if eid == 0:
            continue
        base = np.zeros(vocab.m)
        for tok in entity_attrs[int(eid)]:
            base += vocab.vector(tok)
        for sub_id in (SUBREGION_NONE, SUBREGION_HANDLE, SUBREGION_HEAD):
            mask = (ids == eid) & (sub == sub_id)
            if not mask.any():
                continue
            vec = base.copy()
            if sub_id != SUBREGION_NONE:
                vec += vocab.vector(SUBREGION_TOKENS[sub_id])
            sums[mask] = vec
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(scale=noise_sigma, size=(h, w, vocab.m))
        sums = np.where((ids > 0)[..., None], sums + noise, sums)
    norms = np.linalg.norm(sums, axis=2, keepdims=True)
    return sums / np.maximum(norms, 1e-12)


def embed_point_window(embedding_image, pixel):
    """Mean over the 3x3 window around pixel (u, v), renormalized.

    Border pixels average over the in-bounds subset only.
    """
    u, v = pixel
    h, w = embedding_image.shape[:2]
    if not (0 <= u < w and 0 <= v < h):
        raise IndexError(f"pixel {(u, v)} outside image of size {(w, h)}")
    block = embedding_image[max(v - 1, 0):v + 2, max(u - 1, 0):u + 2]
    avg = block.reshape(-1, block.shape[-1]).mean(axis=0)
    norm = np.linalg.norm(avg)
    if norm == 0.0:
        return avg
    return avg / norm
