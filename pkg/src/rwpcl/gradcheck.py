"""Finite-difference verification of the reverse-mode gradients.

The numeric side always evaluates the forward value in float64 (central
differences). The analytic side runs the engine's own backward pass: on
float64 replicas for op-level and model-level checks (the verification
policy replays graphs at 64-bit to avoid false failures), and on the real
float32 path for the full joint-training step, which carries a looser
tolerance because the regenerated noise rescales with the parameter norms.
"""

from __future__ import annotations

import time

import numpy as np

from . import contrastive, encoder, numcore, trainer
from .numcore import Tape, Tensor, backward
from .textprep import Batch

OP_TOLERANCE = 1e-4
STEP_TOLERANCE = 1e-3


def numeric_gradients(value_fn, tensors: dict, step: float = 1e-5) -> dict:
    """Central finite differences of ``value_fn()`` w.r.t. each tensor element.

    ``value_fn`` must return a python float recomputed from the tensors'
    current ``data`` buffers; entries are nudged in place and restored.
    """
    grads = {}
    for key, t in tensors.items():
        flat = t.data.reshape(-1)
        g = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = value_fn()
            flat[i] = orig - step
            fm = value_fn()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * step)
        grads[key] = g.reshape(t.data.shape)
    return grads


def analytic_gradients(loss_fn, tensors: dict) -> dict:
    """Record loss_fn() on a fresh tape, run backward, return float64 grads."""
    numcore.zero_grads(tensors.values())
    tape = Tape()
    with tape:
        loss = loss_fn()
    backward(loss, tape)
    return {k: np.asarray(t.grad, dtype=np.float64) for k, t in tensors.items()}


def relative_error(analytic: dict, numeric: dict) -> float:
    """Largest |analytic - numeric| entry over the largest numeric entry.

    Normalization is global across the checked tensors: some parameters have
    exactly-zero true gradients (e.g. a bias that batch norm cancels, or an
    attention key bias under softmax shift invariance), where a per-tensor
    ratio would just amplify finite-difference roundoff.
    """
    scale = 1e-8
    diff = 0.0
    for key in numeric:
        n, a = numeric[key], analytic[key]
        if n.size:
            scale = max(scale, float(np.max(np.abs(n))))
            diff = max(diff, float(np.max(np.abs(a - n))))
    return diff / scale


def check(loss_fn, tensors: dict, step: float = 1e-5) -> float:
    """Worst relative error of the engine's gradients for one loss function."""
    analytic = analytic_gradients(loss_fn, tensors)
    numeric = numeric_gradients(lambda: loss_fn().item(), tensors, step=step)
    return relative_error(analytic, numeric)


# ---------------------------------------------------------------------------
# op-level cases

def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _projected(rng, forward):
    """Close ``forward`` over one fixed random direction drawn up front, so
    repeated evaluations are a pure function of the input tensors."""
    probe = forward()
    direction = Tensor(rng.standard_normal(probe.shape), dtype=np.float64)
    return lambda: numcore.tsum(numcore.mul(forward(), direction))


def op_case(name: str, rng):
    """(tensors, loss_fn) pair exercising one op on fresh random inputs."""
    if name == "add":
        a, b = _rand(rng, 2, 3), _rand(rng, 3)
        return {"a": a, "b": b}, _projected(rng, lambda: numcore.add(a, b))
    if name == "sub":
        a, b = _rand(rng, 2, 3), _rand(rng, 2, 3)
        return {"a": a, "b": b}, _projected(rng, lambda: numcore.sub(a, b))
    if name == "mul":
        a, b = _rand(rng, 2, 3), _rand(rng, 3)
        return {"a": a, "b": b}, _projected(rng, lambda: numcore.mul(a, b))
    if name == "affine":
        a = _rand(rng, 2, 3)
        return {"a": a}, _projected(rng, lambda: numcore.affine(a, 1.7, -0.3))
    if name == "relu":
        a = _rand(rng, 4, 3)
        return {"a": a}, _projected(rng, lambda: numcore.relu(a))
    if name == "softmax_rows":
        a = _rand(rng, 3, 5)
        return {"a": a}, _projected(rng, lambda: numcore.softmax_rows(a))
    if name == "layernorm_rows":
        a = _rand(rng, 3, 6)
        return {"a": a}, _projected(rng, lambda: numcore.layernorm_rows(a))
    if name == "batchnorm1d":
        x, gamma, beta = _rand(rng, 5, 4), _rand(rng, 4), _rand(rng, 4)
        return ({"x": x, "gamma": gamma, "beta": beta},
                _projected(rng, lambda: numcore.batchnorm1d(x, gamma, beta)))
    if name == "matmul":
        a, b = _rand(rng, 4, 3), _rand(rng, 3, 2)
        return {"a": a, "b": b}, _projected(rng, lambda: numcore.matmul(a, b))
    if name == "matmul_batched":
        a, b = _rand(rng, 2, 3, 4), _rand(rng, 2, 4, 2)
        return {"a": a, "b": b}, _projected(rng, lambda: numcore.matmul(a, b))
    if name == "matmul_shared_rhs":
        a, b = _rand(rng, 2, 3, 4), _rand(rng, 4, 2)
        return {"a": a, "b": b}, _projected(rng, lambda: numcore.matmul(a, b))
    if name == "embedding":
        table = _rand(rng, 7, 3)
        ids = np.array([[0, 2], [6, 2]])
        return {"table": table}, _projected(rng, lambda: numcore.embedding(table, ids))
    if name == "reshape":
        a = _rand(rng, 2, 6)
        return {"a": a}, _projected(rng, lambda: numcore.reshape(a, (3, 4)))
    if name == "transpose":
        a = _rand(rng, 2, 3, 4)
        return {"a": a}, _projected(rng, lambda: numcore.transpose(a, (2, 0, 1)))
    if name == "select_token":
        a = _rand(rng, 3, 4, 2)
        return {"a": a}, _projected(rng, lambda: numcore.select_token(a, 1))
    if name == "take_labels":
        a = _rand(rng, 4, 3)
        labels = np.array([0, 2, 1, 2])
        return {"a": a}, _projected(rng, lambda: numcore.take_labels(a, labels))
    if name == "logsumexp_rows":
        a = _rand(rng, 4, 5)
        return {"a": a}, _projected(rng, lambda: numcore.logsumexp_rows(a))
    if name == "tsum":
        a = _rand(rng, 2, 3)
        return {"a": a}, lambda: numcore.tsum(a)
    if name == "tmean":
        a = _rand(rng, 2, 3)
        return {"a": a}, lambda: numcore.tmean(a)
    if name == "straight_through":
        a = _rand(rng, 2, 3)
        shift = rng.standard_normal((2, 3))
        return {"a": a}, _projected(rng, lambda: numcore.straight_through(a, a.data + shift))
    if name == "diag_part":
        a = _rand(rng, 4, 4)
        return {"a": a}, _projected(rng, lambda: numcore.diag_part(a))
    if name == "column_correlation":
        a, b = _rand(rng, 5, 3), _rand(rng, 5, 3)
        return {"a": a, "b": b}, _projected(rng, lambda: numcore.column_correlation(a, b))
    raise KeyError(name)


OP_NAMES = (
    "add", "sub", "mul", "affine", "relu", "softmax_rows", "layernorm_rows",
    "batchnorm1d", "matmul", "matmul_batched", "matmul_shared_rhs", "embedding",
    "reshape", "transpose", "select_token", "take_labels", "logsumexp_rows",
    "tsum", "tmean", "straight_through", "diag_part", "column_correlation",
)


def check_op(name: str, seed: int = 0, repeats: int = 5, step: float = 1e-5) -> float:
    """Worst relative error for one op over several random float64 inputs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(repeats):
        tensors, loss_fn = op_case(name, rng)
        worst = max(worst, check(loss_fn, tensors, step=step))
    return worst


# ---------------------------------------------------------------------------
# model-level checks

def _cast64(params: dict) -> dict:
    return {k: Tensor(v.data.astype(np.float64), requires_grad=True, name=k, dtype=np.float64)
            for k, v in params.items()}


def _projection64(proj: contrastive.ProjectionParams) -> contrastive.ProjectionParams:
    t = _cast64(proj.named_tensors())
    return contrastive.ProjectionParams(
        config=proj.config,
        linear1_w=t["projection.linear1.weight"], linear1_b=t["projection.linear1.bias"],
        bn_gamma=t["projection.bn.gamma"], bn_beta=t["projection.bn.beta"],
        linear2_w=t["projection.linear2.weight"], linear2_b=t["projection.linear2.bias"],
        bn_state=numcore.BatchNormState(proj.config.hidden_dim, dtype=np.float64),
    )


def _micro_batch(dtype=np.float64) -> Batch:
    ids = np.array([[2, 5, 7, 3, 0, 0], [2, 9, 3, 0, 0, 0]])
    return Batch(ids=ids, mask=(ids != 0).astype(dtype), labels=np.array([1, 2]))


def check_micro_encoder(seed: int = 0) -> float:
    """Full-encoder check at L=2, d=8 (float64 replay, CE loss)."""
    cfg = encoder.EncoderConfig(vocab_size=13, max_len=6, num_classes=3,
                                layers=2, model_dim=8, heads=2, ff_dim=16)
    params = _cast64(encoder.init(cfg, seed=seed))
    batch = _micro_batch()

    def loss_fn():
        _, logits = encoder.forward(cfg, params, batch)
        return trainer.cross_entropy(logits, batch.labels)

    return check(loss_fn, params)


def check_projection(seed: int = 0) -> float:
    """Projection-head check at 8 -> 16 -> 5 including the batch norm."""
    pcfg = contrastive.ProjectionConfig(in_dim=8, hidden_dim=16, out_dim=5)
    proj = _projection64(contrastive.init_projection(pcfg, seed=seed))
    rng = np.random.default_rng(seed + 1)
    x = Tensor(rng.standard_normal((4, 8)), requires_grad=True, dtype=np.float64)
    direction = Tensor(rng.standard_normal((4, 5)), dtype=np.float64)
    tensors = {"input": x, **proj.named_tensors()}

    def loss_fn():
        return numcore.tsum(numcore.mul(contrastive.project(proj, x, training=True), direction))

    return check(loss_fn, tensors)


def check_train_step(seed: int = 0) -> float:
    """Full joint-training loss: float32 analytic pass vs float64 differences.

    The same noise seed is replayed on every evaluation; nudging a parameter
    also rescales the regenerated noise through the tensor norm, which is
    one reason this check carries the looser tolerance.
    """
    mcfg = encoder.EncoderConfig(vocab_size=9, max_len=5, num_classes=2,
                                 layers=1, model_dim=4, heads=1, ff_dim=8)
    pcfg = contrastive.ProjectionConfig(in_dim=4, hidden_dim=6, out_dim=3)
    params32 = encoder.init(mcfg, seed=seed)
    proj32 = contrastive.init_projection(pcfg, seed=seed + 1)
    ids = np.array([[2, 4, 6, 3, 0], [2, 7, 5, 3, 0]])
    labels = np.array([0, 1])
    batch32 = Batch(ids=ids, mask=(ids != 0).astype(np.float32), labels=labels)
    batch64 = Batch(ids=ids, mask=(ids != 0).astype(np.float64), labels=labels)
    tcfg = trainer.TrainConfig(epsilon=1e-3, lam=0.3, batch_size=2, seed=seed)
    step_seed = 12345

    def loss32():
        return trainer.joint_loss(mcfg, params32, proj32, batch32, tcfg, step_seed)[3]

    analytic = analytic_gradients(loss32, {**params32, **proj32.named_tensors()})

    params64 = _cast64(params32)
    proj64 = _projection64(proj32)

    def value64():
        return trainer.joint_loss(mcfg, params64, proj64, batch64, tcfg, step_seed)[3].item()

    # step 1e-4: wide enough to swamp float64 roundoff, narrow enough not to
    # straddle ReLU kinks
    numeric = numeric_gradients(value64, {**params64, **proj64.named_tensors()}, step=1e-4)
    return relative_error(analytic, numeric)


def run_suite(seed: int = 0, op_repeats: int = 5) -> dict:
    """Run every check; returns a report with one entry per check."""
    started = time.perf_counter()
    checks = []
    for name in OP_NAMES:
        err = check_op(name, seed=seed, repeats=op_repeats)
        checks.append({"name": f"op.{name}", "max_rel_err": err,
                       "tolerance": OP_TOLERANCE, "passed": err < OP_TOLERANCE})
    for name, fn, tol in (("encoder.micro", check_micro_encoder, OP_TOLERANCE),
                          ("projection.head", check_projection, OP_TOLERANCE),
                          ("trainer.joint_step", check_train_step, STEP_TOLERANCE)):
        err = fn(seed)
        checks.append({"name": name, "max_rel_err": err, "tolerance": tol, "passed": err < tol})
    return {
        "checks": checks,
        "max_rel_err": max(c["max_rel_err"] for c in checks),
        "passed": all(c["passed"] for c in checks),
        "seconds": time.perf_counter() - started,
    }
