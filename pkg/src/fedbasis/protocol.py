"""Round-based federated training engine.

Three client-update rules share one outer loop:

* ``fedavg``          -- local SGD on a single parameter vector.
* ``fedbasis_naive``  -- joint local SGD on combination logits and all K
                         bases at once. Long local training drives the bases
                         toward each other and the coefficients toward
                         uniform (the collapse failure mode); kept as a
                         measurable baseline.
* ``fedbasis``        -- per-round coordinate descent: train the logits with
                         bases frozen, sharpen the resulting coefficients
                         with a low softmax temperature, then train the bases
                         with coefficients frozen. Near-zero coefficients
                         shield unselected bases from homogenizing updates.

Combination logits are re-initialized to zero at the start of every round's
local update and never leave the client. Every random draw comes from a
named stream of the run seed, so runs are bit-reproducible and adding
diagnostics never changes training.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .basis import (
    BasisSet,
    CombinationState,
    basis_gradient_values,
    combine_values,
    logit_gradient_values,
    softmax_rows,
)
from .bench import ClientDataset
from .cluster import kmeans
from .diagnostics import (
    alpha_entropy,
    global_accuracy,
    mean_pairwise_cosine,
    personalized_accuracy,
)
from .errors import ConfigError, DataError, FedBasisError, ShapeError
from .nn import (
    MlpSpec,
    ParamVector,
    block_index_of_coordinate,
    init_params,
    loss_and_grad_values,
    loss_values,
    predict,
)
from .rng import stream

ALGORITHMS = ("fedavg", "fedbasis_naive", "fedbasis")
WEIGHTINGS = ("uniform", "by_data_size")


@dataclass(frozen=True)
class FedConfig:
    """Knobs of a federated run. ``lr_bases`` is also the FedAvg local rate."""

    rounds: int
    num_clients: int
    participation_fraction: float = 1.0
    local_epochs: int = 5
    batch_size: int = 16
    lr_bases: float = 0.05
    lr_logits: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9
    temperature: float = 0.1
    num_bases: int = 4
    use_major: bool = False
    warm_start_fraction: float = 0.0
    aggregation_weighting: str | None = None  # None: per-algorithm default
    algorithm: str = "fedbasis"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rounds < 0:
            raise ConfigError("rounds must be non-negative")
        if self.num_clients < 1:
            raise ConfigError("need at least one client")
        if not 0.0 < self.participation_fraction <= 1.0:
            raise ConfigError("participation_fraction must be in (0, 1]")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.lr_bases < 0 or self.lr_logits < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if not 0.0 < self.temperature <= 1.0:
            raise ConfigError("temperature must be in (0, 1]")
        if self.num_bases < 1:
            raise ConfigError("need at least one basis")
        if not 0.0 <= self.warm_start_fraction < 1.0:
            raise ConfigError("warm_start_fraction must be in [0, 1)")
        if self.aggregation_weighting not in (None, *WEIGHTINGS):
            raise ConfigError(f"aggregation_weighting must be one of {WEIGHTINGS}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}")

    def resolved_weighting(self, phase: str) -> str:
        """Explicit setting wins; otherwise FedAvg averages by data size and
        basis aggregation is a plain mean over participants."""
        if self.aggregation_weighting is not None:
            return self.aggregation_weighting
        return "by_data_size" if phase == "fedavg" else "uniform"

    @property
    def warm_start_rounds(self) -> int:
        return int(self.warm_start_fraction * self.rounds)


@dataclass(frozen=True)
class RoundMetrics:
    """One log record per communication round (NaN where not applicable)."""

    round_index: int
    phase: str
    mean_pairwise_cosine: float
    mean_alpha_entropy: float
    global_loss: float
    mean_personalized_acc: float
    mean_global_acc: float
    skipped_clients: tuple[int, ...] = ()


@dataclass(frozen=True)
class EvalContext:
    """Shared per-domain test sets used for the round accuracy summaries."""

    domain_test: dict[str, tuple[np.ndarray, np.ndarray]]


@dataclass
class ClientDiagnostics:
    """Optional sink a client update fills with collapse diagnostics."""

    final_alpha: np.ndarray | None = None
    trace: list[dict] = field(default_factory=list)


class SgdOptimizer:
    """SGD with momentum and decoupled-from-nothing weight decay, the classic
    ``v <- mu v + (g + wd x); x <- x - lr v`` update."""

    def __init__(self, size: int, lr: float, momentum: float, weight_decay: float):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = np.zeros(size)

    def step(self, values: np.ndarray, grad: np.ndarray) -> None:
        g = grad if self.weight_decay == 0.0 else grad + self.weight_decay * values
        self.velocity *= self.momentum
        self.velocity += g
        values -= self.lr * self.velocity


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Mini-batch index slices for one epoch; no RNG draw when full-batch."""
    if batch_size >= n:
        yield np.arange(n)
        return
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


# ---------------------------------------------------------------------------
# Client updates
# ---------------------------------------------------------------------------


def client_update_fedavg(
    spec: MlpSpec,
    global_params: ParamVector,
    dataset: ClientDataset,
    cfg: FedConfig,
    rng: np.random.Generator,
) -> ParamVector:
    """E epochs of local mini-batch SGD from the global model."""
    if len(dataset) == 0:
        raise DataError(f"client {dataset.client_id!r} has no training data")
    values = global_params.values.copy()
    opt = SgdOptimizer(values.size, cfg.lr_bases, cfg.momentum, cfg.weight_decay)
    for _ in range(cfg.local_epochs):
        for idx in _epoch_batches(len(dataset), cfg.batch_size, rng):
            _, g = loss_and_grad_values(
                spec, values, dataset.features[idx], dataset.labels[idx]
            )
            opt.step(values, g)
    return global_params.with_values(values)


def _local_collapse_entry(
    phase: str, epoch: int, stacked: np.ndarray, alpha: np.ndarray
) -> dict:
    k = stacked.shape[0]
    if k >= 2:
        norms = np.linalg.norm(stacked, axis=1)
        unit = stacked / np.where(norms > 0, norms, 1.0)[:, None]
        cos = float((unit @ unit.T)[np.triu_indices(k, 1)].mean())
    else:
        cos = float("nan")
    return {
        "phase": phase,
        "epoch": epoch,
        "cosine": cos,
        "entropy": alpha_entropy(alpha),
    }


def client_update_fedbasis_naive(
    spec: MlpSpec,
    global_bases: BasisSet,
    dataset: ClientDataset,
    cfg: FedConfig,
    rng: np.random.Generator,
    diag: ClientDiagnostics | None = None,
) -> BasisSet:
    """Joint SGD on logits and all bases for E epochs (collapse baseline)."""
    if len(dataset) == 0:
        raise DataError(f"client {dataset.client_id!r} has no training data")
    stacked = global_bases.stacked().copy()
    major = None if global_bases.major is None else global_bases.major.values.copy()
    has_major = major is not None
    block_spec = global_bases.block_spec
    coord_block = block_index_of_coordinate(block_spec, stacked.shape[1])

    psi = np.zeros((len(block_spec), cfg.num_bases))
    opt_psi = SgdOptimizer(psi.size, cfg.lr_logits, cfg.momentum, 0.0)
    opt_bases = [
        SgdOptimizer(stacked.shape[1], cfg.lr_bases, cfg.momentum, cfg.weight_decay)
        for _ in range(cfg.num_bases)
    ]
    opt_major = (
        SgdOptimizer(stacked.shape[1], cfg.lr_bases, cfg.momentum, cfg.weight_decay)
        if has_major
        else None
    )

    alpha = softmax_rows(psi)
    if diag is not None:
        diag.trace.append(_local_collapse_entry("joint", 0, stacked, alpha))
    for epoch in range(cfg.local_epochs):
        for idx in _epoch_batches(len(dataset), cfg.batch_size, rng):
            alpha = softmax_rows(psi)
            theta = combine_values(stacked, major, alpha, coord_block)
            _, g = loss_and_grad_values(
                spec, theta, dataset.features[idx], dataset.labels[idx]
            )
            basis_grads = basis_gradient_values(
                cfg.num_bases, alpha, g, coord_block, has_major
            )
            psi_grad = logit_gradient_values(
                stacked, alpha, g, block_spec, 1.0, has_major
            )
            for k in range(cfg.num_bases):
                opt_bases[k].step(stacked[k], basis_grads[k])
            if has_major:
                opt_major.step(major, 0.5 * g)
            opt_psi.step(psi.reshape(-1), psi_grad.reshape(-1))
        if diag is not None:
            alpha = softmax_rows(psi)
            diag.trace.append(
                _local_collapse_entry("joint", epoch + 1, stacked, alpha)
            )

    alpha = softmax_rows(psi)
    if diag is not None:
        diag.final_alpha = alpha
    bases = tuple(ParamVector(stacked[k], block_spec) for k in range(cfg.num_bases))
    return BasisSet(bases, None if major is None else ParamVector(major, block_spec))


def client_update_fedbasis(
    spec: MlpSpec,
    global_bases: BasisSet,
    dataset: ClientDataset,
    cfg: FedConfig,
    rng_alpha: np.random.Generator,
    rng_bases: np.random.Generator,
    diag: ClientDiagnostics | None = None,
) -> BasisSet:
    """Coordinate-descent local update: logits, sharpen, then bases."""
    if len(dataset) == 0:
        raise DataError(f"client {dataset.client_id!r} has no training data")
    stacked = global_bases.stacked().copy()
    major = None if global_bases.major is None else global_bases.major.values.copy()
    has_major = major is not None
    block_spec = global_bases.block_spec
    coord_block = block_index_of_coordinate(block_spec, stacked.shape[1])

    # Phase 1: logits alone, bases frozen, plain (temperature 1) softmax.
    psi = np.zeros((len(block_spec), cfg.num_bases))
    opt_psi = SgdOptimizer(psi.size, cfg.lr_logits, cfg.momentum, 0.0)
    for epoch in range(cfg.local_epochs):
        for idx in _epoch_batches(len(dataset), cfg.batch_size, rng_alpha):
            alpha = softmax_rows(psi)
            theta = combine_values(stacked, major, alpha, coord_block)
            _, g = loss_and_grad_values(
                spec, theta, dataset.features[idx], dataset.labels[idx]
            )
            psi_grad = logit_gradient_values(
                stacked, alpha, g, block_spec, 1.0, has_major
            )
            opt_psi.step(psi.reshape(-1), psi_grad.reshape(-1))
        if diag is not None:
            diag.trace.append(
                _local_collapse_entry("alpha", epoch + 1, stacked, softmax_rows(psi))
            )

    # Phase 2: sharpen the coefficients and hold them fixed.
    alpha = softmax_rows(psi / cfg.temperature)
    if diag is not None:
        diag.trace.append(_local_collapse_entry("sharpened", 0, stacked, alpha))

    opt_bases = [
        SgdOptimizer(stacked.shape[1], cfg.lr_bases, cfg.momentum, cfg.weight_decay)
        for _ in range(cfg.num_bases)
    ]
    opt_major = (
        SgdOptimizer(stacked.shape[1], cfg.lr_bases, cfg.momentum, cfg.weight_decay)
        if has_major
        else None
    )
    for epoch in range(cfg.local_epochs):
        for idx in _epoch_batches(len(dataset), cfg.batch_size, rng_bases):
            theta = combine_values(stacked, major, alpha, coord_block)
            _, g = loss_and_grad_values(
                spec, theta, dataset.features[idx], dataset.labels[idx]
            )
            basis_grads = basis_gradient_values(
                cfg.num_bases, alpha, g, coord_block, has_major
            )
            for k in range(cfg.num_bases):
                opt_bases[k].step(stacked[k], basis_grads[k])
            if has_major:
                opt_major.step(major, 0.5 * g)
        if diag is not None:
            diag.trace.append(
                _local_collapse_entry("bases", epoch + 1, stacked, alpha)
            )

    if diag is not None:
        diag.final_alpha = alpha
    bases = tuple(ParamVector(stacked[k], block_spec) for k in range(cfg.num_bases))
    return BasisSet(bases, None if major is None else ParamVector(major, block_spec))


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def _check_weights(count: int, weights: np.ndarray | None) -> np.ndarray:
    if weights is None:
        return np.full(count, 1.0 / count)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (count,):
        raise ShapeError(f"need {count} weights, got shape {weights.shape}")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ShapeError(f"weights sum to {weights.sum()!r}, expected 1")
    return weights


def aggregate(
    params_list: list[ParamVector], weights: np.ndarray | None = None
) -> ParamVector:
    """Weighted average, summed in list order.

    Computed as ``x0 + sum_i w_i (x_i - x0)`` so that averaging identical
    vectors returns them bit-exactly.
    """
    if not params_list:
        raise ShapeError("nothing to aggregate")
    weights = _check_weights(len(params_list), weights)
    first = params_list[0]
    for i, p in enumerate(params_list):
        if p.block_spec != first.block_spec:
            raise ShapeError(f"aggregand {i} has a mismatched block spec")
    acc = np.zeros(len(first))
    base = first.values
    for w, p in zip(weights, params_list):
        acc += w * (p.values - base)
    return first.with_values(base + acc)


def aggregate_basis_sets(
    sets: list[BasisSet], weights: np.ndarray | None = None
) -> BasisSet:
    """Basis-wise weighted average: basis k of the result averages every
    client's basis k (and likewise the major basis)."""
    if not sets:
        raise ShapeError("nothing to aggregate")
    k = sets[0].k
    has_major = sets[0].major is not None
    for i, s in enumerate(sets):
        if s.k != k or (s.major is not None) != has_major:
            raise ShapeError(f"basis set {i} has a mismatched structure")
    bases = tuple(
        aggregate([s.bases[j] for s in sets], weights) for j in range(k)
    )
    major = aggregate([s.major for s in sets], weights) if has_major else None
    return BasisSet(bases, major)


# ---------------------------------------------------------------------------
# Federation loop
# ---------------------------------------------------------------------------


def _sample_participants(cfg: FedConfig, round_index: int) -> list[int]:
    count = math.ceil(cfg.participation_fraction * cfg.num_clients)
    rng = stream(cfg.seed, "sampling", round_index)
    picked = rng.choice(cfg.num_clients, size=count, replace=False)
    return sorted(int(i) for i in picked)


def _round_weights(
    cfg: FedConfig, phase: str, datasets: list[ClientDataset], participants: list[int]
) -> np.ndarray:
    if cfg.resolved_weighting(phase) == "uniform":
        return np.full(len(participants), 1.0 / len(participants))
    sizes = np.array([len(datasets[i]) for i in participants], dtype=np.float64)
    return sizes / sizes.sum()


def uniform_combination_values(basis_set: BasisSet) -> np.ndarray:
    """The "global" model of a basis set: uniform coefficients per block."""
    coord_block = block_index_of_coordinate(
        basis_set.block_spec, len(basis_set.bases[0])
    )
    alpha = np.full((basis_set.num_blocks, basis_set.k), 1.0 / basis_set.k)
    major = None if basis_set.major is None else basis_set.major.values
    return combine_values(basis_set.stacked(), major, alpha, coord_block)


def _mean_client_loss(
    spec: MlpSpec, values: np.ndarray, datasets: list[ClientDataset]
) -> float:
    losses = [
        loss_values(spec, values, d.features, d.labels) for d in datasets if len(d)
    ]
    return float(np.mean(losses)) if losses else float("nan")


def _accuracy_summaries(
    spec: MlpSpec,
    values: np.ndarray,
    datasets: list[ClientDataset],
    eval_context: EvalContext | None,
) -> tuple[float, float]:
    if eval_context is None:
        return float("nan"), float("nan")
    preds = {
        dom: (predict(spec, values, x), y)
        for dom, (x, y) in eval_context.domain_test.items()
    }
    pers, glob = [], []
    for d in datasets:
        if len(d) == 0 or d.domain_id not in preds:
            continue
        p, y = preds[d.domain_id]
        pers.append(personalized_accuracy(p, y, d.label_distribution))
        glob.append(global_accuracy(p, y))
    if not pers:
        return float("nan"), float("nan")
    return float(np.mean(pers)), float(np.mean(glob))


def _run_client_updates(updates: list, max_workers: int) -> list:
    """Evaluate zero-argument client jobs, optionally on a thread pool.

    A job that fails with a package error yields the exception object in its
    slot (the caller records the client as skipped). Results keep list order,
    so parallel execution is bit-identical to sequential.
    """

    def guarded(job):
        try:
            return job()
        except FedBasisError as err:
            return err

    if max_workers <= 1 or len(updates) <= 1:
        return [guarded(job) for job in updates]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(guarded, updates))


def _fedavg_round(
    spec: MlpSpec,
    datasets: list[ClientDataset],
    cfg: FedConfig,
    round_index: int,
    theta: ParamVector,
    metrics_out: list[RoundMetrics] | None,
    eval_context: EvalContext | None,
    total_rounds: int,
    diagnostic_cadence: int,
    max_workers: int,
) -> tuple[ParamVector, list[ParamVector]]:
    participants = _sample_participants(cfg, round_index)
    active, skipped, jobs = [], [], []
    for cid in participants:
        if len(datasets[cid]) == 0:
            skipped.append(cid)
            continue
        rng = stream(cfg.seed, "client", round_index, cid, "bases")
        jobs.append(
            lambda cid=cid, rng=rng: client_update_fedavg(
                spec, theta, datasets[cid], cfg, rng
            )
        )
        active.append(cid)

    locals_: list[ParamVector] = []
    surviving: list[int] = []
    for cid, result in zip(active, _run_client_updates(jobs, max_workers)):
        if isinstance(result, FedBasisError):
            skipped.append(cid)
        else:
            locals_.append(result)
            surviving.append(cid)

    if locals_:
        weights = _round_weights(cfg, "fedavg", datasets, surviving)
        theta = aggregate(locals_, weights)

    if metrics_out is not None:
        evaluate = (round_index + 1) % diagnostic_cadence == 0 or (
            round_index == total_rounds - 1
        )
        pers, glob = _accuracy_summaries(
            spec, theta.values, datasets, eval_context if evaluate else None
        )
        metrics_out.append(
            RoundMetrics(
                round_index=round_index,
                phase="fedavg",
                mean_pairwise_cosine=float("nan"),
                mean_alpha_entropy=float("nan"),
                global_loss=_mean_client_loss(spec, theta.values, datasets),
                mean_personalized_acc=pers,
                mean_global_acc=glob,
                skipped_clients=tuple(sorted(skipped)),
            )
        )
    return theta, locals_


def _fedbasis_round(
    spec: MlpSpec,
    datasets: list[ClientDataset],
    cfg: FedConfig,
    round_index: int,
    vbar: BasisSet,
    metrics_out: list[RoundMetrics] | None,
    eval_context: EvalContext | None,
    total_rounds: int,
    diagnostic_cadence: int,
    max_workers: int,
) -> BasisSet:
    participants = _sample_participants(cfg, round_index)
    active, skipped, jobs, diags = [], [], [], []
    for cid in participants:
        if len(datasets[cid]) == 0:
            skipped.append(cid)
            continue
        diag = ClientDiagnostics()
        if cfg.algorithm == "fedbasis_naive":
            rng = stream(cfg.seed, "client", round_index, cid, "bases")
            jobs.append(
                lambda cid=cid, rng=rng, diag=diag: client_update_fedbasis_naive(
                    spec, vbar, datasets[cid], cfg, rng, diag
                )
            )
        else:
            rng_a = stream(cfg.seed, "client", round_index, cid, "alpha")
            rng_b = stream(cfg.seed, "client", round_index, cid, "bases")
            jobs.append(
                lambda cid=cid, ra=rng_a, rb=rng_b, diag=diag: client_update_fedbasis(
                    spec, vbar, datasets[cid], cfg, ra, rb, diag
                )
            )
        active.append(cid)
        diags.append(diag)

    locals_, surviving, alphas = [], [], []
    for cid, diag, result in zip(active, diags, _run_client_updates(jobs, max_workers)):
        if isinstance(result, FedBasisError):
            skipped.append(cid)
        else:
            locals_.append(result)
            surviving.append(cid)
            if diag.final_alpha is not None:
                alphas.append(diag.final_alpha)

    if locals_:
        weights = _round_weights(cfg, "fedbasis", datasets, surviving)
        vbar = aggregate_basis_sets(locals_, weights)

    if metrics_out is not None:
        evaluate = (round_index + 1) % diagnostic_cadence == 0 or (
            round_index == total_rounds - 1
        )
        global_values = uniform_combination_values(vbar)
        pers, glob = _accuracy_summaries(
            spec, global_values, datasets, eval_context if evaluate else None
        )
        cosine = mean_pairwise_cosine(vbar) if vbar.k >= 2 else float("nan")
        entropy = (
            float(np.mean([alpha_entropy(a) for a in alphas]))
            if alphas
            else float("nan")
        )
        metrics_out.append(
            RoundMetrics(
                round_index=round_index,
                phase=cfg.algorithm,
                mean_pairwise_cosine=cosine,
                mean_alpha_entropy=entropy,
                global_loss=_mean_client_loss(spec, global_values, datasets),
                mean_personalized_acc=pers,
                mean_global_acc=glob,
                skipped_clients=tuple(sorted(skipped)),
            )
        )
    return vbar


def _jitter_duplicate_rows(rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Add sigma=1e-3 noise to exact-duplicate rows (identical bases would be
    a fixed point with zero logit gradients)."""
    out = rows.copy()
    seen: dict[bytes, int] = {}
    for i in range(out.shape[0]):
        key = out[i].tobytes()
        if key in seen:
            out[i] = out[i] + rng.normal(0.0, 1e-3, size=out.shape[1])
        else:
            seen[key] = i
    return out


def warm_start(
    spec: MlpSpec,
    datasets: list[ClientDataset],
    cfg: FedConfig,
    metrics_out: list[RoundMetrics] | None = None,
    eval_context: EvalContext | None = None,
    diagnostic_cadence: int = 1,
    max_workers: int = 1,
) -> BasisSet:
    """FedAvg prefix, then k-means over its final-round local models.

    The cluster centroids become the K bases and the FedAvg global model the
    major basis (when enabled).
    """
    if cfg.warm_start_fraction <= 0:
        raise ConfigError("warm start requires warm_start_fraction > 0")
    rounds_ws = cfg.warm_start_rounds
    if rounds_ws < 1:
        raise ConfigError(
            f"warm_start_fraction {cfg.warm_start_fraction} of {cfg.rounds} "
            "rounds leaves no FedAvg round"
        )
    if cfg.num_clients < cfg.num_bases:
        raise ConfigError(
            f"warm start needs at least {cfg.num_bases} clients, have {cfg.num_clients}"
        )

    theta = init_params(spec, stream(cfg.seed, "init", 0))
    final_locals: list[ParamVector] = []
    for t in range(rounds_ws):
        theta, final_locals = _fedavg_round(
            spec, datasets, cfg, t, theta, metrics_out, eval_context,
            cfg.rounds, diagnostic_cadence, max_workers,
        )
    if len(final_locals) < cfg.num_bases:
        raise ConfigError(
            f"final warm-start round produced {len(final_locals)} local models, "
            f"need at least {cfg.num_bases}"
        )

    points = np.stack([m.values for m in final_locals])
    _, centroids, _ = kmeans(points, cfg.num_bases, stream(cfg.seed, "kmeans"))
    centroids = _jitter_duplicate_rows(centroids, stream(cfg.seed, "warmstart_jitter"))
    bases = tuple(ParamVector(c, theta.block_spec) for c in centroids)
    return BasisSet(bases, theta if cfg.use_major else None)


def run_federation(
    spec: MlpSpec,
    datasets: list[ClientDataset],
    cfg: FedConfig,
    eval_context: EvalContext | None = None,
    diagnostic_cadence: int = 1,
    max_workers: int = 1,
) -> tuple[ParamVector | BasisSet, list[RoundMetrics]]:
    """Run the configured algorithm for ``cfg.rounds`` communication rounds."""
    if len(datasets) != cfg.num_clients:
        raise ConfigError(
            f"config says {cfg.num_clients} clients, got {len(datasets)} datasets"
        )
    metrics: list[RoundMetrics] = []

    if cfg.algorithm == "fedavg":
        theta = init_params(spec, stream(cfg.seed, "init", 0))
        for t in range(cfg.rounds):
            theta, _ = _fedavg_round(
                spec, datasets, cfg, t, theta, metrics, eval_context,
                cfg.rounds, diagnostic_cadence, max_workers,
            )
        return theta, metrics

    # A fraction too small to yield a whole FedAvg round degrades to random
    # initialization rather than an unrunnable warm start.
    if cfg.warm_start_fraction > 0 and cfg.warm_start_rounds >= 1:
        vbar = warm_start(
            spec, datasets, cfg,
            metrics_out=metrics, eval_context=eval_context,
            diagnostic_cadence=diagnostic_cadence, max_workers=max_workers,
        )
        start = cfg.warm_start_rounds
    else:
        bases = tuple(
            init_params(spec, stream(cfg.seed, "init", k))
            for k in range(cfg.num_bases)
        )
        major = (
            init_params(spec, stream(cfg.seed, "init", "major"))
            if cfg.use_major
            else None
        )
        vbar = BasisSet(bases, major)
        start = 0

    for t in range(start, cfg.rounds):
        vbar = _fedbasis_round(
            spec, datasets, cfg, t, vbar, metrics, eval_context,
            cfg.rounds, diagnostic_cadence, max_workers,
        )
    return vbar, metrics


# ---------------------------------------------------------------------------
# Personalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PersonalizationResult:
    state: CombinationState
    classifier_delta: np.ndarray | None
    trainable_params: int
    model: ParamVector


def trainable_param_count(
    basis_set: BasisSet, classifier_mode: str
) -> int:
    count = basis_set.num_blocks * basis_set.k
    if classifier_mode == "trained":
        count += basis_set.block_spec[-1].length
    return count


def personalize_new_client(
    spec: MlpSpec,
    basis_set: BasisSet,
    dataset: ClientDataset,
    cfg: FedConfig,
    classifier_mode: str = "trained",
    epochs: int = 20,
    lr_logits: float | None = None,
    lr_classifier: float | None = None,
    rng: np.random.Generator | None = None,
    epoch_callback=None,
) -> PersonalizationResult:
    """Fit combination logits (and optionally the final-layer block) on a
    client's local data with the bases frozen.

    Only ``num_blocks * K`` scalars are trained, plus the classifier block
    when ``classifier_mode == "trained"``. The logits persist across epochs
    here, unlike the per-round re-initialization during federated training.
    """
    if classifier_mode not in ("frozen", "trained"):
        raise ConfigError("classifier_mode must be 'frozen' or 'trained'")
    if len(dataset) == 0:
        raise DataError(f"client {dataset.client_id!r} has no data to personalize on")
    if rng is None:
        rng = stream(cfg.seed, "personalize", dataset.client_id)
    lr_logits = cfg.lr_logits if lr_logits is None else lr_logits
    lr_classifier = cfg.lr_bases if lr_classifier is None else lr_classifier

    stacked = basis_set.stacked()
    major = None if basis_set.major is None else basis_set.major.values
    block_spec = basis_set.block_spec
    coord_block = block_index_of_coordinate(block_spec, stacked.shape[1])
    last = block_spec[-1]
    last_slice = slice(last.offset, last.offset + last.length)

    psi = np.zeros((len(block_spec), basis_set.k))
    delta = np.zeros(last.length) if classifier_mode == "trained" else None
    opt_psi = SgdOptimizer(psi.size, lr_logits, cfg.momentum, 0.0)
    opt_delta = (
        SgdOptimizer(last.length, lr_classifier, cfg.momentum, 0.0)
        if delta is not None
        else None
    )

    def current_model() -> np.ndarray:
        values = combine_values(stacked, major, softmax_rows(psi), coord_block)
        if delta is not None:
            values[last_slice] += delta
        return values

    if epoch_callback is not None:
        epoch_callback(0, ParamVector(current_model(), block_spec))

    for epoch in range(epochs):
        for idx in _epoch_batches(len(dataset), cfg.batch_size, rng):
            alpha = softmax_rows(psi)
            theta = combine_values(stacked, major, alpha, coord_block)
            if delta is not None:
                theta[last_slice] += delta
            _, g = loss_and_grad_values(
                spec, theta, dataset.features[idx], dataset.labels[idx]
            )
            psi_grad = logit_gradient_values(
                stacked, alpha, g, block_spec, 1.0, major is not None
            )
            opt_psi.step(psi.reshape(-1), psi_grad.reshape(-1))
            if delta is not None:
                # Weight decay acts on the effective classifier weights.
                g_delta = g[last_slice] + cfg.weight_decay * theta[last_slice]
                opt_delta.step(delta, g_delta)
        if epoch_callback is not None:
            epoch_callback(epoch + 1, ParamVector(current_model(), block_spec))

    state = CombinationState(psi, 1.0)
    return PersonalizationResult(
        state=state,
        classifier_delta=None if delta is None else delta.copy(),
        trainable_params=trainable_param_count(basis_set, classifier_mode),
        model=ParamVector(current_model(), block_spec),
    )


def finetune_full(
    spec: MlpSpec,
    params: ParamVector,
    dataset: ClientDataset,
    epochs: int,
    lr: float,
    weight_decay: float,
    momentum: float = 0.0,
    batch_size: int | None = None,
    rng: np.random.Generator | None = None,
    epoch_callback=None,
) -> ParamVector:
    """Plain SGD fine-tuning of every parameter (the FedAvg+FT comparator)."""
    if len(dataset) == 0:
        raise DataError(f"client {dataset.client_id!r} has no data to fine-tune on")
    if batch_size is None:
        batch_size = len(dataset)
    if batch_size < len(dataset) and rng is None:
        raise ConfigError("mini-batch fine-tuning needs an rng for shuffling")
    values = params.values.copy()
    opt = SgdOptimizer(values.size, lr, momentum, weight_decay)
    if epoch_callback is not None:
        epoch_callback(0, params.with_values(values))
    for epoch in range(epochs):
        for idx in _epoch_batches(len(dataset), batch_size, rng):
            _, g = loss_and_grad_values(
                spec, values, dataset.features[idx], dataset.labels[idx]
            )
            opt.step(values, g)
        if epoch_callback is not None:
            epoch_callback(epoch + 1, params.with_values(values))
    return params.with_values(values)
