"""The inter-RoI attention block.

Given a blob of N aligned RoI features (N, D, H, W), the block computes a
row-stochastic N-by-N attention matrix from pairwise feature similarity,
summarizes each RoI through a small convolutional descriptor, mixes the
descriptors by the attention weights, and appends the mixture to the input
channels. Output shape is (N, D + D_g, H, W); the original channels pass
through untouched.

All functions here are pure and accept any N >= 1 without reconfiguration.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .ops import (
    concat_channels,
    conv1x1,
    conv3x3,
    flatten_rois,
    global_avg_pool,
    matmul,
    relu,
    row_softmax,
    tile_spatial,
)
from .validation import check_feature_blob, check_rank, frozen, owned_copy

PARAM_NAMES = ("w_phi", "w_psi", "g1_w", "g1_b", "g2_w", "g2_b")


@dataclass(frozen=True)
class NlRoiParams:
    """Weights of one block.

    ``w_phi`` and ``w_psi`` are bias-free (D_f, D) channel embeddings used
    for the similarity logits. The descriptor path is a biased (D_g, D) 1x1
    convolution, a ReLU, and a biased (D_g, D_g, 3, 3) convolution.
    Arrays are copied on construction and frozen; instances are immutable.
    """

    w_phi: np.ndarray
    w_psi: np.ndarray
    g1_w: np.ndarray
    g1_b: np.ndarray
    g2_w: np.ndarray
    g2_b: np.ndarray

    def __post_init__(self):
        for name in PARAM_NAMES:
            object.__setattr__(self, name, owned_copy(getattr(self, name), name=name))
        w_phi, w_psi = self.w_phi, self.w_psi
        check_rank(w_phi, 2, "w_phi")
        if w_psi.shape != w_phi.shape:
            raise ValueError(
                f"w_psi shape {w_psi.shape} must match w_phi shape {w_phi.shape}"
            )
        d_f, d = w_phi.shape
        d_g = self.g1_w.shape[0] if self.g1_w.ndim == 2 else 0
        if self.g1_w.shape != (d_g, d) or d_g < 1:
            raise ValueError(
                f"g1_w shape {self.g1_w.shape} must be (d_g, {d}) with d_g >= 1"
            )
        if self.g1_b.shape != (d_g,):
            raise ValueError(f"g1_b shape {self.g1_b.shape} must be ({d_g},)")
        if self.g2_w.shape != (d_g, d_g, 3, 3):
            raise ValueError(
                f"g2_w shape {self.g2_w.shape} must be ({d_g}, {d_g}, 3, 3)"
            )
        if self.g2_b.shape != (d_g,):
            raise ValueError(f"g2_b shape {self.g2_b.shape} must be ({d_g},)")
        dtypes = {getattr(self, n).dtype for n in PARAM_NAMES}
        if len(dtypes) != 1:
            raise ValueError(f"all parameter tensors must share one dtype, got {dtypes}")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(D, D_f, D_g): input, embedding, and descriptor channel counts."""
        return (self.w_phi.shape[1], self.w_phi.shape[0], self.g1_w.shape[0])

    @property
    def dtype(self) -> np.dtype:
        return self.w_phi.dtype

    def to_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_dict(cls, d) -> "NlRoiParams":
        missing = [n for n in PARAM_NAMES if n not in d]
        extra = [n for n in d if n not in PARAM_NAMES]
        if missing or extra:
            raise ValueError(
                f"parameter dict must have exactly {PARAM_NAMES}; "
                f"missing {missing}, unexpected {extra}"
            )
        return cls(**{n: d[n] for n in PARAM_NAMES})

    def astype(self, dtype) -> "NlRoiParams":
        return NlRoiParams(**{n: getattr(self, n).astype(dtype) for n in PARAM_NAMES})


@dataclass(frozen=True)
class NlRoiOutput:
    """Forward result: the augmented blob plus inspectable intermediates."""

    augmented: np.ndarray
    attention: np.ndarray
    pooled_nl: np.ndarray


def default_dims(d: int) -> tuple[int, int, int]:
    """Bottleneck defaults: embedding and descriptor widths are ceil(d/2)."""
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    half = (d + 1) // 2
    return (d, half, half)


def init_params(dims, seed: int, dtype=np.float32) -> NlRoiParams:
    """Seeded parameter draw: weights uniform(+-1/sqrt(fan_in)), biases zero."""
    d, d_f, d_g = (int(v) for v in dims)
    if min(d, d_f, d_g) < 1:
        raise ValueError(f"all dims must be >= 1, got {dims}")
    rng = np.random.default_rng(seed)

    def draw(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    return NlRoiParams(
        w_phi=draw((d_f, d), d),
        w_psi=draw((d_f, d), d),
        g1_w=draw((d_g, d), d),
        g1_b=np.zeros(d_g, dtype=dtype),
        g2_w=draw((d_g, d_g, 3, 3), d_g * 9),
        g2_b=np.zeros(d_g, dtype=dtype),
    )


def _check_input(x, params: NlRoiParams) -> np.ndarray:
    x = check_feature_blob(x, channels=params.dims[0], name="x")
    if x.dtype != params.dtype:
        raise ValueError(
            f"dtype mismatch: x is {x.dtype} but params are {params.dtype}"
        )
    return x


def _attention_parts(x: np.ndarray, params: NlRoiParams) -> dict:
    """Similarity stage. Logits[i,j] = <phi(x_i), psi(x_j)> over all channels
    and positions; one softmax per row turns them into mixture weights."""
    phi_map = conv1x1(x, params.w_phi)
    psi_map = conv1x1(x, params.w_psi)
    phi = flatten_rois(phi_map)
    psi = flatten_rois(psi_map)
    # phi @ psi.T, but contracted over the rows' shared (contiguous) axis:
    # equivalent term order, much kinder to the cache for small N
    logits = frozen(np.einsum("ik,jk->ij", phi, psi))
    return {
        "phi_map": phi_map,
        "psi_map": psi_map,
        "phi": phi,
        "psi": psi,
        "logits": logits,
        "attention": row_softmax(logits),
    }


def _g_parts(x: np.ndarray, params: NlRoiParams) -> dict:
    """Descriptor stage: 1x1 conv, ReLU, 3x3 conv, then global average pool."""
    g1 = conv1x1(x, params.g1_w, params.g1_b)
    g1r = relu(g1)
    gmap = conv3x3(g1r, params.g2_w, params.g2_b)
    return {"g1": g1, "g1r": g1r, "gmap": gmap, "g": global_avg_pool(gmap)}


def _forward_parts(x: np.ndarray, params: NlRoiParams) -> dict:
    parts = {"x": x}
    parts.update(_attention_parts(x, params))
    parts.update(_g_parts(x, params))
    parts["pooled_nl"] = matmul(parts["attention"], parts["g"])
    tiled = tile_spatial(parts["pooled_nl"], x.shape[2], x.shape[3])
    parts["tiled"] = tiled
    parts["augmented"] = concat_channels(x, tiled)
    return parts


def correlation(x, params: NlRoiParams) -> np.ndarray:
    """Row-stochastic (N, N) attention matrix from pairwise similarity."""
    x = _check_input(x, params)
    return _attention_parts(x, params)["attention"]


def g_transform(x, params: NlRoiParams) -> np.ndarray:
    """Per-RoI descriptor vectors, shape (N, D_g)."""
    x = _check_input(x, params)
    return _g_parts(x, params)["g"]


def attention_mix(a, g) -> np.ndarray:
    """Mix descriptor rows by attention weights: row i of the result is the
    a[i]-weighted average of the rows of g."""
    a = check_rank(np.asarray(a), 2, "a")
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"a must be square (n_rois, n_rois), got {a.shape}")
    row_sums = np.asarray(a, dtype=np.float64).sum(axis=1)
    if np.max(np.abs(row_sums - 1.0)) > 1e-4:
        raise ValueError("a must be row-stochastic: rows must sum to 1")
    return matmul(a, g)


def nlroi_forward(x, params: NlRoiParams) -> NlRoiOutput:
    """Run the block: attention, descriptors, mixture, tile, and append."""
    x = _check_input(x, params)
    parts = _forward_parts(x, params)
    return NlRoiOutput(
        augmented=parts["augmented"],
        attention=parts["attention"],
        pooled_nl=parts["pooled_nl"],
    )


def forward_many(blobs, params: NlRoiParams, threads: int | None = None):
    """Map nlroi_forward over independent blobs, optionally in a thread pool.

    Results are bit-identical to the sequential map regardless of
    ``threads``: every kernel is pure with a fixed accumulation order.
    """
    blobs = list(blobs)
    if threads is None or threads <= 1 or len(blobs) <= 1:
        return [nlroi_forward(b, params) for b in blobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda b: nlroi_forward(b, params), blobs))
