"""Built-in invariant suite behind the ``selftest`` CLI subcommand.

Every check either re-derives a quantity through an independent route
(analytic gradients against finite differences, round-trips, worked
constants) or asserts a structural property on seeded random inputs.
The default pass takes about a second; ``full=True`` widens the sweeps.
"""

from __future__ import annotations

import math
import tempfile
from pathlib import Path

import numpy as np

from .autodiff import grad_check
from .bench import attention_flops
from .blobio import load_blob, load_params, save_blob, save_params
from .block import NlRoiParams, forward_many, g_transform, init_params, nlroi_forward
from .ops import conv1x1, conv3x3, global_avg_pool, relu, row_softmax
from .toytask import TrainConfig, analytic_positive_rate, bce_with_logits, gen_scene

HAND_ATTENTION = np.array([[0.73106, 0.26894], [0.5, 0.5]])
HAND_BLOB = bytes.fromhex(
    "4e4c5242" "01" "00" "0000" "01000000" "0100000000000000" "0000803f"
)


def _require(ok: bool, message: str):
    if not ok:
        raise AssertionError(message)


def _random_case(rng, dtype=np.float32):
    n = int(rng.integers(1, 7))
    d = int(rng.integers(1, 5))
    d_f = int(rng.integers(1, 4))
    d_g = int(rng.integers(1, 4))
    h = int(rng.integers(1, 4))
    w = int(rng.integers(1, 4))
    x = rng.uniform(-1, 1, size=(n, d, h, w)).astype(dtype)
    params = init_params((d, d_f, d_g), seed=int(rng.integers(1 << 30)), dtype=dtype)
    return x, params


def check_gradients(full: bool):
    configs = [(0, (2, 2, 1, 1, 1, 1)), (1, (1, 3, 2, 2, 2, 2))]
    if full:
        configs += [(2, (3, 1, 1, 2, 1, 3)), (3, (5, 4, 2, 2, 2, 2)),
                    (4, (2, 12, 6, 6, 3, 3))]
    for seed, dims in configs:
        report = grad_check(seed=seed, dims=dims)
        _require(report.passed,
                 f"gradcheck failed at dims {dims}: max error {report.max_error:.3e}")


def check_attention_rows(full: bool):
    rng = np.random.default_rng(11)
    for i in range(200 if full else 50):
        n = int(rng.integers(1, 8))
        scale = 1e4 if i % 5 == 0 else 1.0
        logits = (rng.uniform(-1, 1, size=(n, n)) * scale).astype(np.float64)
        a = np.asarray(row_softmax(logits))
        _require(np.all(a > 0), "attention entry not strictly positive")
        _require(np.allclose(a.sum(axis=1), 1.0, atol=1e-6),
                 "attention row does not sum to 1")


def check_permutation_equivariance(full: bool):
    rng = np.random.default_rng(12)
    for _ in range(50 if full else 10):
        x, params = _random_case(rng)
        if x.shape[0] < 2:
            continue
        perm = rng.permutation(x.shape[0])
        base = np.asarray(nlroi_forward(x, params).augmented)
        permuted = np.asarray(
            nlroi_forward(np.ascontiguousarray(x[perm]), params).augmented
        )
        err = np.max(np.abs(permuted - base[perm])) / max(1.0, np.max(np.abs(base)))
        _require(err < 1e-5, f"equivariance violated: rel err {err:.3e}")


def check_pool_mix_commutation(full: bool):
    rng = np.random.default_rng(13)
    for _ in range(50 if full else 10):
        x, params = _random_case(rng, dtype=np.float64)
        out = nlroi_forward(x, params)
        att = np.asarray(out.attention)
        # rebuild the per-pixel descriptor maps from the primitive ops
        gmap = np.asarray(
            conv3x3(relu(conv1x1(x, params.g1_w, params.g1_b)),
                    params.g2_w, params.g2_b)
        )
        pooled_then_mixed = att @ np.asarray(g_transform(x, params))
        mixed_then_pooled = np.asarray(
            global_avg_pool(np.einsum("ij,jchw->ichw", att, gmap))
        )
        err = np.max(np.abs(pooled_then_mixed - mixed_then_pooled))
        err /= max(1.0, np.max(np.abs(pooled_then_mixed)))
        _require(err < 1e-5, f"pool/mix commutation violated: rel err {err:.3e}")
        _require(np.allclose(np.asarray(out.pooled_nl), pooled_then_mixed,
                             rtol=1e-12, atol=1e-12),
                 "forward pooled context disagrees with attention @ pooled g")


def check_identity_channels(full: bool):
    rng = np.random.default_rng(14)
    for _ in range(20 if full else 5):
        x, params = _random_case(rng)
        aug = np.asarray(nlroi_forward(x, params).augmented)
        _require(np.array_equal(aug[:, : x.shape[1]], x),
                 "input channels not preserved bit-exactly")


def check_hand_attention(full: bool):
    one = np.ones((1, 1))
    base = init_params((1, 1, 1), seed=0, dtype=np.float64)
    params = NlRoiParams(w_phi=one, w_psi=one, g1_w=base.g1_w, g1_b=base.g1_b,
                         g2_w=base.g2_w, g2_b=base.g2_b)
    x = np.array([1.0, 0.0]).reshape(2, 1, 1, 1)
    att = np.asarray(nlroi_forward(x, params).attention)
    _require(np.max(np.abs(att - HAND_ATTENTION)) < 1e-4,
             f"worked 2-RoI attention off by {np.max(np.abs(att - HAND_ATTENTION)):.2e}")


def check_serialization(full: bool):
    rng = np.random.default_rng(15)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "t.blob"
        for i in range(100 if full else 20):
            dtype = np.float32 if i % 2 == 0 else np.float64
            rank = int(rng.integers(1, 5))
            shape = tuple(int(s) for s in rng.integers(1, 5, size=rank))
            t = rng.uniform(-1, 1, size=shape).astype(dtype)
            save_blob(t, path)
            back = load_blob(path)
            _require(back.tobytes() == t.tobytes() and back.shape == t.shape
                     and back.dtype == t.dtype, "blob round-trip not bit-exact")
        save_blob(np.array([1.0], dtype=np.float32), path)
        _require(path.read_bytes() == HAND_BLOB, "hand-encoded blob bytes differ")
        params = init_params((3, 2, 2), seed=3, dtype=np.float32)
        ppath = Path(tmp) / "p.params"
        save_params(params, ppath)
        back = load_params(ppath)
        _require(
            all(np.array_equal(getattr(back, k), getattr(params, k))
                for k in ("w_phi", "w_psi", "g1_w", "g1_b", "g2_w", "g2_b")),
            "params round-trip not bit-exact",
        )


def check_toy_labels(full: bool):
    config = TrainConfig(rois=5, classes=3, channels=6, embed_channels=2,
                         nl_channels=2, height=2, width=2)
    for seed in range(40 if full else 10):
        scene = gen_scene(config, seed)
        classes = scene.latent_classes
        for i in range(config.rois):
            dup = any(classes[j] == classes[i]
                      for j in range(config.rois) if j != i)
            _require(scene.labels[i] == float(dup), "duplicate-class label rule broken")
    expected = 1.0 - (1.0 - 1.0 / 3) ** 4
    _require(abs(analytic_positive_rate(3, 5) - expected) < 1e-15,
             "analytic positive rate formula broken")


def check_bce(full: bool):
    _require(abs(bce_with_logits(np.zeros(3), np.ones(3)) - math.log(2)) < 1e-12,
             "bce at zero logits must be ln 2")
    big = bce_with_logits(np.array([1e4, -1e4]), np.array([0.0, 1.0]))
    _require(math.isfinite(big) and abs(big - 1e4) < 1.0,
             "bce not stable at extreme logits")


def check_parallel_forward(full: bool):
    rng = np.random.default_rng(16)
    x, params = _random_case(rng)
    xs = [x, np.ascontiguousarray(x[::-1]), x]
    seq = [np.asarray(nlroi_forward(v, params).augmented) for v in xs]
    par = [np.asarray(o.augmented) for o in forward_many(xs, params, threads=4)]
    _require(all(a.tobytes() == b.tobytes() for a, b in zip(seq, par)),
             "threaded forward not bit-identical to sequential")


def check_flops_formula(full: bool):
    _require(attention_flops(8, (3, 4, 2, 3, 3)) == 4608,
             "attention FLOP formula broken")


CHECKS = (
    ("gradients", check_gradients),
    ("attention-rows", check_attention_rows),
    ("permutation-equivariance", check_permutation_equivariance),
    ("pool-mix-commutation", check_pool_mix_commutation),
    ("identity-channels", check_identity_channels),
    ("hand-attention", check_hand_attention),
    ("serialization", check_serialization),
    ("toy-labels", check_toy_labels),
    ("bce-logits", check_bce),
    ("parallel-forward", check_parallel_forward),
    ("flops-formula", check_flops_formula),
)


def run_selftest(full: bool = False, log=print) -> bool:
    """Run every check; log one line each; True iff all passed."""
    all_ok = True
    for name, fn in CHECKS:
        try:
            fn(full)
        except Exception as exc:  # noqa: BLE001 - report, never crash the suite
            all_ok = False
            log(f"FAIL {name}: {exc}")
        else:
            log(f"ok {name}")
    return all_ok
