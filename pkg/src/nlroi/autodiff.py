"""Reverse-mode gradients for the block, plus a finite-difference checker.

The block's compute graph is one fixed pipeline, so there is no general
graph machinery here: ``forward_traced`` saves every intermediate on a
Tape, and ``backward`` walks the recorded steps in exact reverse order,
applying the hand-derived vector-Jacobian product of each primitive.

``finite_diff_grad`` is the independent oracle: central differences of an
arbitrary scalar loss, one coordinate at a time, in binary64 only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .block import (
    PARAM_NAMES,
    NlRoiOutput,
    NlRoiParams,
    _check_input,
    _forward_parts,
    init_params,
    nlroi_forward,
)
from .ops import conv1x1, conv3x3
from .validation import frozen

# forward execution order of the pipeline; backward visits this reversed
_STEPS = (
    ("conv1x1", "phi_map"),
    ("flatten_rois", "phi"),
    ("conv1x1", "psi_map"),
    ("flatten_rois", "psi"),
    ("matmul", "logits"),
    ("row_softmax", "attention"),
    ("conv1x1", "g1"),
    ("relu", "g1r"),
    ("conv3x3", "gmap"),
    ("global_avg_pool", "g"),
    ("matmul", "pooled_nl"),
    ("tile_spatial", "tiled"),
    ("concat_channels", "augmented"),
)


def rel_err(a, b) -> float:
    """max over coordinates of |a-b| / max(1, |a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


@dataclass(frozen=True)
class Tape:
    """Execution record of one traced forward pass.

    ``values`` maps every step's output name (see ``steps``) to the saved
    tensor; the input blob and parameters are kept so the pipeline can be
    replayed bit-exactly.
    """

    x: np.ndarray
    params: NlRoiParams
    values: dict
    steps: tuple = field(default=_STEPS)

    def replay(self) -> dict:
        """Recompute every intermediate from the saved inputs."""
        return _forward_parts(self.x, self.params)


@dataclass(frozen=True)
class Gradients:
    """Cotangents of a scalar loss: one array per parameter plus d_input."""

    params: dict
    d_input: np.ndarray

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]


def forward_traced(x, params: NlRoiParams) -> tuple[NlRoiOutput, Tape]:
    """Run the block and keep every intermediate needed by ``backward``.

    The returned output is bit-identical to ``nlroi_forward``: both call
    the same pipeline code.
    """
    x = _check_input(x, params)
    parts = _forward_parts(x, params)
    out = NlRoiOutput(
        augmented=parts["augmented"],
        attention=parts["attention"],
        pooled_nl=parts["pooled_nl"],
    )
    return out, Tape(x=x, params=params, values=parts)


def _softmax_vjp(p: np.ndarray, d_p: np.ndarray) -> np.ndarray:
    # per row: J = diag(p) - p p^T, so J^T d = p * (d - <d, p>)
    inner = np.sum(d_p * p, axis=1, keepdims=True)
    return p * (d_p - inner)


def backward(tape: Tape, d_out) -> Gradients:
    """Pull the cotangent ``d_out`` of the augmented blob back through the
    tape, yielding gradients of sum(d_out * augmented) in every parameter
    and in the input."""
    x, p, v = tape.x, tape.params, tape.values
    n, d, h, w = x.shape
    d_out = np.ascontiguousarray(np.asarray(d_out, dtype=x.dtype))
    if d_out.shape != v["augmented"].shape:
        raise ValueError(
            f"d_out shape {d_out.shape} does not match traced output "
            f"shape {v['augmented'].shape}"
        )
    d_x = np.zeros_like(x)

    # concat_channels: split into the identity slice and the tiled slice
    d_x += d_out[:, :d]
    d_tiled = d_out[:, d:]
    # tile_spatial: sum the broadcast positions
    d_pooled = d_tiled.sum(axis=(2, 3))
    # pooled_nl = attention @ g
    att, g = v["attention"], v["g"]
    d_att = np.einsum("ik,jk->ij", d_pooled, g)
    d_gvec = np.einsum("ji,jk->ik", att, d_pooled)
    # global_avg_pool: spread evenly over positions
    d_gmap = np.ascontiguousarray(
        np.broadcast_to(
            (d_gvec / x.dtype.type(h * w))[:, :, None, None], v["gmap"].shape
        )
    )
    # conv3x3: input grad is correlation with the channel-swapped,
    # spatially flipped kernel; weight grad contracts taps against the
    # zero-padded input
    w_t = np.ascontiguousarray(p.g2_w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    d_g1r = np.array(conv3x3(d_gmap, w_t))
    d_g = p.dims[2]
    pad = np.zeros((n, d_g, h + 2, w + 2), dtype=x.dtype)
    pad[:, :, 1 : h + 1, 1 : w + 1] = v["g1r"]
    d_g2w = np.zeros((d_g, d_g, 3, 3), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            d_g2w[:, :, dy, dx] = np.einsum(
                "noyz,ndyz->od", d_gmap, pad[:, :, dy : dy + h, dx : dx + w]
            )
    d_g2b = d_gmap.sum(axis=(0, 2, 3))
    # relu: mask where the pre-activation was <= 0 (subgradient 0 at 0)
    d_g1 = d_g1r * (v["g1"] > 0)
    # conv1x1 of the descriptor path
    d_x += conv1x1(d_g1, np.ascontiguousarray(p.g1_w.T))
    d_g1w = np.einsum("nohw,ndhw->od", d_g1, x)
    d_g1b = d_g1.sum(axis=(0, 2, 3))
    # row_softmax
    d_logits = _softmax_vjp(att, d_att)
    # logits = phi @ psi^T
    phi, psi = v["phi"], v["psi"]
    d_phi = np.einsum("ij,jk->ik", d_logits, psi)
    d_psi = np.einsum("ij,ik->jk", d_logits, phi)
    # flatten_rois: undo the reshape
    d_f = p.dims[1]
    d_psi_map = d_psi.reshape(n, d_f, h, w)
    d_phi_map = d_phi.reshape(n, d_f, h, w)
    # conv1x1 embeddings (bias-free)
    d_x += conv1x1(d_psi_map, np.ascontiguousarray(p.w_psi.T))
    d_wpsi = np.einsum("nohw,ndhw->od", d_psi_map, x)
    d_x += conv1x1(d_phi_map, np.ascontiguousarray(p.w_phi.T))
    d_wphi = np.einsum("nohw,ndhw->od", d_phi_map, x)

    grads = {
        "w_phi": d_wphi,
        "w_psi": d_wpsi,
        "g1_w": d_g1w,
        "g1_b": d_g1b,
        "g2_w": d_g2w,
        "g2_b": d_g2b,
    }
    return Gradients(
        params={k: frozen(g_) for k, g_ in grads.items()}, d_input=frozen(d_x)
    )


def finite_diff_grad(loss, x, params: NlRoiParams, eps: float = 1e-5) -> Gradients:
    """Central differences of ``loss(x, params)`` in every coordinate.

    Second-order accurate: (loss(t+eps) - loss(t-eps)) / (2 eps). Only
    binary64 inputs are accepted; the binary32 noise floor would swamp the
    signal.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = np.asarray(x)
    if x.dtype != np.float64 or params.dtype != np.float64:
        raise ValueError("finite differences require float64 inputs and params")
    work = {"x": np.array(x, dtype=np.float64)}
    for name in PARAM_NAMES:
        work[name] = np.array(getattr(params, name), dtype=np.float64)

    def eval_loss() -> float:
        pv = NlRoiParams(**{nm: work[nm] for nm in PARAM_NAMES})
        return float(loss(work["x"], pv))

    out = {}
    for name, arr in work.items():
        grad = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for k in range(flat.size):
            saved = flat[k]
            flat[k] = saved + eps
            upper = eval_loss()
            flat[k] = saved - eps
            lower = eval_loss()
            flat[k] = saved
            gflat[k] = (upper - lower) / (2.0 * eps)
        out[name] = frozen(grad)
    return Gradients(
        params={nm: out[nm] for nm in PARAM_NAMES}, d_input=out["x"]
    )


@dataclass(frozen=True)
class GradCheckReport:
    """Per-tensor max relative error between the two gradient routes."""

    seed: int
    dims: tuple
    eps: float
    tol: float
    errors: dict
    max_error: float
    passed: bool

    def lines(self):
        for name, err in self.errors.items():
            yield f"{name}\t{err:.3e}\t{'ok' if err < self.tol else 'FAIL'}"
        yield f"max\t{self.max_error:.3e}\t{'pass' if self.passed else 'FAIL'}"


def grad_check(
    seed: int, dims, eps: float = 1e-5, tol: float = 1e-6
) -> GradCheckReport:
    """Compare reverse-mode gradients against central differences.

    ``dims`` is (N, D, D_f, D_g, H, W). The probe loss is the sum of
    squared augmented outputs, which exercises every parameter. Failures
    are reported, never raised.
    """
    n, d, d_f, d_g, h, w = (int(v) for v in dims)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(n, d, h, w))
    params = init_params((d, d_f, d_g), seed=seed + 1, dtype=np.float64)

    def loss(xv, pv):
        return float(np.sum(np.asarray(nlroi_forward(xv, pv).augmented) ** 2))

    out, tape = forward_traced(x, params)
    analytic = backward(tape, 2.0 * np.asarray(out.augmented))
    numeric = finite_diff_grad(loss, x, params, eps=eps)
    errors = {"x": rel_err(analytic.d_input, numeric.d_input)}
    for name in PARAM_NAMES:
        errors[name] = rel_err(analytic[name], numeric[name])
    max_error = max(errors.values())
    return GradCheckReport(
        seed=seed,
        dims=(n, d, d_f, d_g, h, w),
        eps=eps,
        tol=tol,
        errors=errors,
        max_error=max_error,
        passed=bool(max_error < tol),
    )
