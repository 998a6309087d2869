"""Joint training loop: clean + perturbed cross-entropy streams and the
redundancy-reduction contrastive term, combined as

    total = (1 - lambda) / 2 * (ce_clean + ce_perturbed) + lambda * bt

with a decoupled-weight-decay adaptive-moment optimizer, validation-F1 early
stopping, and a grid-search driver over (batch size, epsilon, lambda).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import contrastive, encoder, evaldeploy, numcore, perturb
from .errors import ConfigError, ContractError, InputError
from .numcore import Tape, Tensor, backward
from .seeding import derive_seed
from .textprep import Batch


@dataclass(frozen=True)
class TrainConfig:
    epsilon: float = 1e-3
    lam: float = 0.2          # weight between the CE streams and the contrastive term
    beta: float = contrastive.DEFAULT_BETA
    batch_size: int = 16
    learning_rate: float = 1e-3
    epochs: int = 40
    patience: int = 5
    seed: int = 0
    noise_scale: str = "std"
    bt_centering: bool = False
    rwp: bool = True          # perturbed stream on/off (ablation switch)
    cl: bool = True           # contrastive term on/off (ablation switch)
    weight_decay: float = 0.01
    clip_norm: float = 1.0    # 0 disables clipping
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_batch_size: int = 64

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.cl and not self.rwp:
            raise ConfigError("the contrastive term needs the perturbed stream: cl=true requires rwp=true")


@dataclass
class StepReport:
    ce1: float
    ce2: float
    bt: float
    total: float
    grad_norm: float
    finite: bool = True


class TrialDivergedError(RuntimeError):
    """A training step produced a non-finite loss; the trial is aborted."""

    def __init__(self, report: StepReport, step: int):
        super().__init__(f"non-finite loss at step {step}: "
                         f"ce1={report.ce1} ce2={report.ce2} bt={report.bt}")
        self.report = report
        self.step = step


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class, via stable log-sum-exp."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    lse = numcore.logsumexp_rows(logits)
    picked = numcore.take_labels(logits, labels)
    return numcore.affine(numcore.tsum(numcore.sub(lse, picked)), 1.0 / n, 0.0)


def total_loss(ce1: float, ce2: float, bt: float, lam: float) -> float:
    """Scalar combination (1 - lam)/2 * (ce1 + ce2) + lam * bt."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    return (1.0 - lam) / 2.0 * (ce1 + ce2) + lam * bt


class AdamW:
    """Adaptive moment estimation with decoupled weight decay."""

    def __init__(self, tensors: dict[str, Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.tensors = dict(sorted(tensors.items()))
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in self.tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.tensors.items()}

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, t in self.tensors.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)
            t.data = t.data - self.lr * update - self.lr * self.weight_decay * t.data

    def zero_grad(self) -> None:
        numcore.zero_grads(self.tensors.values())


def clip_gradients(tensors, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``;
    returns the pre-clip norm."""
    grads = [t.grad for t in tensors if t.grad is not None]
    total = sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


@dataclass
class TrainState:
    model_cfg: encoder.EncoderConfig
    model: dict[str, Tensor]
    projection: contrastive.ProjectionParams | None
    optimizer: AdamW
    global_step: int = 0
    best_f1: float = float("-inf")
    epochs_since_best: int = 0


def joint_loss(model_cfg, model, projection, batch: Batch, cfg: TrainConfig, step_seed: int):
    """Build the full training loss for one batch on the active tape.

    Returns (ce1, ce2, bt, total) tensors; ce2 and bt are None for disabled
    streams. The perturbed stream runs at w + delta through a
    straight-through substitution: its gradient accumulates onto w while the
    noise itself contributes none.
    """
    cls_c, logits_c = encoder.forward(model_cfg, model, batch)
    ce1 = cross_entropy(logits_c, batch.labels)
    if not cfg.rwp:
        return ce1, None, None, ce1

    shifted = perturb.perturb(model, perturb.PerturbationConfig(
        epsilon=cfg.epsilon, seed=step_seed, noise_scale=cfg.noise_scale))
    pmodel = {name: numcore.straight_through(model[name], shifted.tensors[name].data)
              for name in sorted(model)}
    cls_p, logits_p = encoder.forward(model_cfg, pmodel, batch)
    ce2 = cross_entropy(logits_p, batch.labels)
    ce_pair = numcore.add(ce1, ce2)
    if not cfg.cl:
        return ce1, ce2, None, numcore.affine(ce_pair, 0.5, 0.0)

    ec = contrastive.project(projection, cls_c, training=True)
    ep = contrastive.project(projection, cls_p, training=True)
    corr = contrastive.cross_correlation(ec, ep, centering=cfg.bt_centering)
    bt = contrastive.bt_loss(corr, cfg.beta)
    total = numcore.add(numcore.affine(ce_pair, (1.0 - cfg.lam) / 2.0, 0.0),
                        numcore.affine(bt, cfg.lam, 0.0))
    return ce1, ce2, bt, total


def train_step(state: TrainState, batch: Batch, cfg: TrainConfig) -> StepReport:
    """One optimizer update from one batch; fresh noise is drawn per step."""
    if len(batch) < 2:
        raise ContractError(f"train_step needs a batch of >= 2 examples, got {len(batch)}")
    step_seed = cfg.seed ^ state.global_step
    tape = Tape()
    with tape:
        ce1, ce2, bt, total = joint_loss(state.model_cfg, state.model, state.projection,
                                         batch, cfg, step_seed)
    ce1_v = ce1.item()
    ce2_v = ce2.item() if ce2 is not None else ce1_v
    bt_v = bt.item() if bt is not None else 0.0
    lam_eff = cfg.lam if (cfg.rwp and cfg.cl) else 0.0
    report = StepReport(ce1=ce1_v, ce2=ce2_v, bt=bt_v,
                        total=total_loss(ce1_v, ce2_v, bt_v, lam_eff), grad_norm=0.0)
    if not all(math.isfinite(v) for v in (ce1_v, ce2_v, bt_v)):
        report.finite = False
        raise TrialDivergedError(report, state.global_step)
    backward(total, tape)
    report.grad_norm = clip_gradients(state.optimizer.tensors.values(), cfg.clip_norm)
    state.optimizer.step()
    state.optimizer.zero_grad()
    state.global_step += 1
    return report


@dataclass
class FitResult:
    checkpoint: dict        # name -> float32 array, includes projection + BN stats
    log: list               # one dict per epoch (metric-log rows)
    best_epoch: int
    best_f1: float
    stopped_early: bool


def _snapshot(state: TrainState) -> dict[str, np.ndarray]:
    snap = {name: t.data.copy() for name, t in state.model.items()}
    if state.projection is not None:
        for name, t in state.projection.named_tensors().items():
            snap[name] = t.data.copy()
        snap["projection.bn.running_mean"] = state.projection.bn_state.mean.copy()
        snap["projection.bn.running_var"] = state.projection.bn_state.var.copy()
    return snap


def model_from_snapshot(model_cfg: encoder.EncoderConfig, snapshot: dict) -> dict[str, Tensor]:
    """Rebuild encoder parameters (only) from a checkpoint-style dict."""
    wanted = encoder.parameter_shapes(model_cfg)
    missing = sorted(set(wanted) - set(snapshot))
    if missing:
        raise InputError(f"checkpoint is missing encoder tensors: {missing[:3]}")
    return {name: Tensor(np.array(snapshot[name], dtype=np.float32), requires_grad=True, name=name)
            for name in wanted}


def predict_dataset(model_cfg, params, data: Batch, eval_batch_size: int = 64) -> np.ndarray:
    """Class probabilities for a whole dataset, in evaluation-sized chunks."""
    chunks = []
    for start in range(0, len(data), eval_batch_size):
        chunk = data.subset(np.arange(start, min(start + eval_batch_size, len(data))))
        chunks.append(encoder.predict_proba(model_cfg, params, chunk))
    return np.concatenate(chunks, axis=0)


def fit(train: Batch, val: Batch, cfg: TrainConfig, model_cfg: encoder.EncoderConfig) -> FitResult:
    """Train with early stopping on validation macro-F1; keep the best epoch.

    Stops once the validation score has not improved for ``cfg.patience``
    epochs; the returned checkpoint is the best epoch's snapshot. Training
    batches with fewer than 2 examples (tail of a shuffled epoch) are
    dropped because batch norm and the correlation loss need >= 2 rows.
    """
    if len(train) == 0 or len(val) == 0:
        raise ConfigError("fit needs non-empty train and validation sets")
    model = encoder.init(model_cfg, seed=cfg.seed)
    projection = None
    if cfg.cl:
        projection = contrastive.init_projection(
            contrastive.ProjectionConfig(in_dim=model_cfg.model_dim),
            seed=derive_seed(cfg.seed, "projection"))
    tensors = dict(model)
    if projection is not None:
        tensors.update(projection.named_tensors())
    optimizer = AdamW(tensors, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2),
                      eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    state = TrainState(model_cfg=model_cfg, model=model, projection=projection, optimizer=optimizer)

    log_rows: list[dict] = []
    best_snapshot: dict | None = None
    best_epoch = 0
    stopped_early = False
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        sums = {"ce1": 0.0, "ce2": 0.0, "bt": 0.0, "total": 0.0}
        steps = 0
        for start in range(0, len(train), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            report = train_step(state, train.subset(idx), cfg)
            for key in sums:
                sums[key] += getattr(report, key)
            steps += 1
        probs = predict_dataset(model_cfg, state.model, val, cfg.eval_batch_size)
        metrics = evaldeploy.score_predictions(val.labels, probs.argmax(axis=1), model_cfg.num_classes)
        log_rows.append({
            "epoch": epoch,
            "ce1": sums["ce1"] / max(steps, 1),
            "ce2": sums["ce2"] / max(steps, 1),
            "bt": sums["bt"] / max(steps, 1),
            "total": sums["total"] / max(steps, 1),
            "val_macro_f1": metrics.macro_f1,
            "val_precision": metrics.macro_precision,
            "val_recall": metrics.macro_recall,
        })
        if metrics.macro_f1 > state.best_f1:
            state.best_f1 = metrics.macro_f1
            state.epochs_since_best = 0
            best_snapshot = _snapshot(state)
            best_epoch = epoch
        else:
            state.epochs_since_best += 1
            if state.epochs_since_best >= cfg.patience:
                stopped_early = True
                break
    return FitResult(checkpoint=best_snapshot, log=log_rows, best_epoch=best_epoch,
                     best_f1=state.best_f1, stopped_early=stopped_early)


# ---------------------------------------------------------------------------
# grid search

@dataclass(frozen=True)
class GridSpec:
    batch_sizes: tuple
    epsilons: tuple
    lambdas: tuple

    def __post_init__(self):
        if not (self.batch_sizes and self.epsilons and self.lambdas):
            raise ConfigError("grid axes must all be non-empty")


@dataclass
class TrialResult:
    name: str
    batch_size: int
    epsilon: float
    lam: float
    seed: int
    val_macro_f1: float | None   # None when the trial diverged
    best_epoch: int
    error: str | None = None


@dataclass
class GridResult:
    spec: GridSpec
    trials: list
    best: TrialResult


def _run_grid_trial(args):
    train, val, model_cfg, name, cfg = args
    try:
        result = fit(train, val, cfg, model_cfg)
        return TrialResult(name=name, batch_size=cfg.batch_size, epsilon=cfg.epsilon,
                           lam=cfg.lam, seed=cfg.seed, val_macro_f1=result.best_f1,
                           best_epoch=result.best_epoch)
    except TrialDivergedError as exc:
        return TrialResult(name=name, batch_size=cfg.batch_size, epsilon=cfg.epsilon,
                           lam=cfg.lam, seed=cfg.seed, val_macro_f1=None,
                           best_epoch=0, error=str(exc))


def grid_search(train: Batch, val: Batch, base_cfg: TrainConfig,
                model_cfg: encoder.EncoderConfig, spec: GridSpec,
                master_seed: int, jobs: int = 1) -> GridResult:
    """Run ``fit`` for every (batch size, epsilon, lambda) grid point.

    Each trial gets a reproducible seed derived from the master seed and
    the trial name. The best trial maximizes validation macro-F1; ties
    break toward smaller epsilon, then smaller lambda, then smaller batch.
    """
    work = []
    for b in spec.batch_sizes:
        for eps in spec.epsilons:
            for lam in spec.lambdas:
                name = f"b{b}-eps{eps:g}-lam{lam:g}"
                cfg = replace(base_cfg, batch_size=int(b), epsilon=float(eps),
                              lam=float(lam), seed=derive_seed(master_seed, name))
                work.append((train, val, model_cfg, name, cfg))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trials = list(pool.map(_run_grid_trial, work))
    else:
        trials = [_run_grid_trial(args) for args in work]
    ranked = sorted(trials, key=lambda t: (-(t.val_macro_f1 if t.val_macro_f1 is not None else float("-inf")),
                                           t.epsilon, t.lam, t.batch_size))
    return GridResult(spec=spec, trials=trials, best=ranked[0])


def grid_table(result: GridResult) -> str:
    """Sweep table text: one lambda-by-epsilon block per batch size."""
    by_key = {(t.batch_size, t.epsilon, t.lam): t for t in result.trials}
    lines = []
    for b in result.spec.batch_sizes:
        lines.append(f"batch_size={b}")
        header = ["lambda\\eps"] + [f"{eps:g}" for eps in result.spec.epsilons]
        lines.append("  ".join(f"{h:>10}" for h in header))
        for lam in result.spec.lambdas:
            cells = [f"{lam:g}"]
            for eps in result.spec.epsilons:
                trial = by_key[(b, eps, lam)]
                cells.append("failed" if trial.val_macro_f1 is None else f"{trial.val_macro_f1:.4f}")
            lines.append("  ".join(f"{c:>10}" for c in cells))
        lines.append("")
    return "\n".join(lines)
