"""Experiment orchestration shared by the CLI and the test suite."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .basis import BasisSet
from .bench import (
    Benchmark,
    ClientDataset,
    ClientSplit,
    SplitFractions,
    benchmark_from_manifest,
    build_pflbed,
    format_float,
    make_synthetic_multidomain,
    read_dataset_csv,
    write_dataset_csv,
)
from .config import ExperimentConfig
from .diagnostics import (
    coefficient_heatmap_csv,
    kmeans_compress,
    pca_compress,
    personalized_accuracy,
)
from .errors import ConfigError, DataError
from .nn import MlpSpec, ParamVector, predict
from .protocol import (
    EvalContext,
    FedConfig,
    RoundMetrics,
    finetune_full,
    personalize_new_client,
    run_federation,
    trainable_param_count,
    uniform_combination_values,
)
from .rng import stream


# ---------------------------------------------------------------------------
# Benchmark materialization
# ---------------------------------------------------------------------------


def synthetic_domains(cfg: ExperimentConfig):
    ds = cfg.dataset
    return make_synthetic_multidomain(
        domains=int(ds["domains"]),
        classes=int(ds["classes"]),
        samples_per_domain=int(ds["samples_per_domain"]),
        input_dim=int(ds["input_dim"]),
        domain_shift=float(ds["domain_shift"]),
        class_separation=float(ds["class_separation"]),
        seed=cfg.seed,
        noise_scale=float(ds["noise_scale"]),
    )


def materialize_benchmark(cfg: ExperimentConfig) -> Benchmark:
    """Build (synthetic) or load (csv + manifest) the benchmark for a config."""
    if cfg.dataset["kind"] == "synthetic":
        domains = synthetic_domains(cfg)
    else:
        domains = read_dataset_csv(cfg.dataset["csv_path"])

    manifest_path = cfg.dataset["manifest_path"]
    if manifest_path and Path(manifest_path).exists():
        manifest = json.loads(Path(manifest_path).read_text())
        return benchmark_from_manifest(manifest, domains)

    b = cfg.bench
    return build_pflbed(
        domains,
        participating_per_domain=int(b["participating_per_domain"]),
        new_per_domain=int(b["new_per_domain"]),
        beta=float(b["beta"]),
        fractions=SplitFractions.from_sequence(b["fractions"]),
        seed=cfg.seed,
    )


def model_spec(cfg: ExperimentConfig, bench: Benchmark) -> MlpSpec:
    dims = (
        bench.features.shape[1],
        *(int(h) for h in cfg.model["hidden"]),
        bench.num_classes,
    )
    return MlpSpec(dims, cfg.model["activation"], cfg.model["blocks"])


def eval_context(bench: Benchmark) -> EvalContext:
    return EvalContext(
        domain_test={
            ev.domain_id: bench.domain_split(ev.domain_id, "test")
            for ev in bench.domain_eval
        }
    )


def participating_datasets(bench: Benchmark) -> list[ClientDataset]:
    return [bench.client_dataset(c) for c in bench.clients_with_role("participating")]


# ---------------------------------------------------------------------------
# Metrics log serialization (17 significant digits, NaN -> null)
# ---------------------------------------------------------------------------


def _json_value(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format_float(v) if np.isfinite(v) else "null"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_json_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v).__name__}")


def metrics_jsonl(metrics: list[RoundMetrics]) -> str:
    lines = []
    for m in metrics:
        fields = [
            ("round", m.round_index),
            ("phase", m.phase),
            ("mean_pairwise_cosine", m.mean_pairwise_cosine),
            ("mean_alpha_entropy", m.mean_alpha_entropy),
            ("global_loss", m.global_loss),
            ("mean_personalized_acc", m.mean_personalized_acc),
            ("mean_global_acc", m.mean_global_acc),
            ("skipped_clients", list(m.skipped_clients)),
        ]
        lines.append(
            "{" + ", ".join(f"{json.dumps(k)}: {_json_value(v)}" for k, v in fields) + "}"
        )
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_run(
    cfg: ExperimentConfig, bench: Benchmark, max_workers: int = 1
) -> tuple[ParamVector | BasisSet, list[RoundMetrics]]:
    datasets = participating_datasets(bench)
    fed = cfg.fed_config(num_clients=len(datasets))
    spec = model_spec(cfg, bench)
    return run_federation(
        spec,
        datasets,
        fed,
        eval_context=eval_context(bench),
        diagnostic_cadence=cfg.diagnostic_cadence,
        max_workers=max_workers,
    )


# ---------------------------------------------------------------------------
# Personalization sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PersonalizationRow:
    client_id: str
    method: str
    local_size: str
    last_acc: float
    best_acc: float
    delta: float


@dataclass(frozen=True)
class PersonalizationReport:
    rows: list[PersonalizationRow]
    chosen_lr: dict[str, float]
    trainable_params: dict[str, int]

    def mean(self, method: str, field_name: str) -> float:
        vals = [getattr(r, field_name) for r in self.rows if r.method == method]
        if not vals:
            raise DataError(f"no rows for method {method!r}")
        return float(np.mean(vals))

    def to_csv(self) -> str:
        out = ["client_id,method,local_size,last_acc,best_acc,delta"]
        for r in self.rows:
            out.append(
                f"{r.client_id},{r.method},{r.local_size},"
                f"{format_float(r.last_acc)},{format_float(r.best_acc)},"
                f"{format_float(r.delta)}"
            )
        return "\n".join(out) + "\n"


def subsample_dataset(
    ds: ClientDataset, fraction: float, cap: int | None, seed: int
) -> ClientDataset:
    """Seeded subsample used for the S/M/L local-size settings.

    The recorded label distribution is kept: the client's evaluation identity
    does not change with the amount of adaptation data.
    """
    n = len(ds)
    keep = max(1, int(fraction * n))
    if cap is not None:
        keep = min(keep, int(cap))
    if keep >= n:
        return ds
    rng = stream(seed, "subsample", ds.client_id)
    idx = np.sort(rng.choice(n, size=keep, replace=False))
    return ClientDataset(
        ds.client_id,
        ds.domain_id,
        ds.features[idx],
        ds.labels[idx],
        ds.num_classes,
        ds.label_distribution,
    )


def _client_eval_sets(bench: Benchmark, client: ClientSplit):
    test_x, test_y = bench.domain_split(client.domain_id, "test")
    val_x, val_y = bench.domain_split(client.domain_id, "val")
    return (test_x, test_y), (val_x, val_y)


def _weighted_acc(spec, values, x, y, dist) -> float:
    return personalized_accuracy(predict(spec, values, x), y, dist)


def _curve_row(
    client_id: str, method: str, local_size: str, curve: list[tuple[float, float]]
) -> PersonalizationRow:
    """Collapse a per-epoch (val_acc, test_acc) curve to Last/Best/|delta|.

    Best is the test accuracy at the epoch with the highest validation
    accuracy (earliest wins ties); Last is the final epoch's test accuracy.
    """
    best_idx = int(np.argmax([v for v, _ in curve]))
    best_acc = curve[best_idx][1]
    last_acc = curve[-1][1]
    return PersonalizationRow(
        client_id, method, local_size, last_acc, best_acc, abs(best_acc - last_acc)
    )


def personalization_report(
    spec: MlpSpec,
    global_obj: ParamVector | BasisSet,
    bench: Benchmark,
    settings: dict,
    seed: int,
    role: str = "new",
) -> PersonalizationReport:
    """Personalize every client of ``role`` and score Last/Best test accuracy.

    A basis-set checkpoint yields methods ``uniform`` (no adaptation) and
    ``fedbasis`` (logits + optionally classifier); a plain parameter vector
    yields ``fedavg`` (as is) and ``fedavg_ft`` (full fine-tuning). Grid
    learning rates are chosen by mean best-epoch validation accuracy.
    """
    clients = bench.clients_with_role(role)
    if not clients:
        raise DataError(f"benchmark has no {role!r} clients")
    epochs = int(settings["epochs"])
    local_size = settings["local_size"]
    fraction = float(settings["local_size_fractions"][local_size])
    cap = settings["max_train_samples"]
    lr_grid = [float(v) for v in settings["lr_grid"]]
    classifier_mode = settings["classifier_mode"]

    fed = FedConfig(
        rounds=1,
        num_clients=max(len(clients), 1),
        seed=seed,
        batch_size=int(settings.get("batch_size", 16)),
        momentum=float(settings.get("momentum", 0.9)),
        weight_decay=float(settings.get("weight_decay", 1e-4)),
        lr_logits=float(settings["lr_logits"]),
    )

    prepared = []
    for client in clients:
        ds = subsample_dataset(bench.client_dataset(client), fraction, cap, seed)
        evals = _client_eval_sets(bench, client)
        prepared.append((client, ds, evals))

    rows: list[PersonalizationRow] = []
    chosen_lr: dict[str, float] = {}
    trainable: dict[str, int] = {}

    if isinstance(global_obj, BasisSet):
        base_values = uniform_combination_values(global_obj)
        for client, _, ((tx, ty), _) in prepared:
            acc = _weighted_acc(spec, base_values, tx, ty, client.label_distribution)
            rows.append(
                PersonalizationRow(client.client_id, "uniform", local_size, acc, acc, 0.0)
            )

        def fedbasis_curves(lr: float):
            curves = []
            for client, ds, ((tx, ty), (vx, vy)) in prepared:
                curve: list[tuple[float, float]] = []

                def on_epoch(_e, model, client=client, tx=tx, ty=ty, vx=vx, vy=vy):
                    dist = client.label_distribution
                    curve.append(
                        (
                            _weighted_acc(spec, model.values, vx, vy, dist),
                            _weighted_acc(spec, model.values, tx, ty, dist),
                        )
                    )

                personalize_new_client(
                    spec, global_obj, ds, fed,
                    classifier_mode=classifier_mode,
                    epochs=epochs,
                    lr_classifier=lr,
                    rng=stream(seed, "personalize", client.client_id),
                    epoch_callback=on_epoch,
                )
                curves.append((client.client_id, curve))
            return curves

        grid = lr_grid if classifier_mode == "trained" else lr_grid[:1]
        best = _pick_lr(grid, fedbasis_curves)
        chosen_lr["fedbasis"] = best[0]
        rows.extend(
            _curve_row(cid, "fedbasis", local_size, curve) for cid, curve in best[1]
        )
        trainable["fedbasis"] = trainable_param_count(global_obj, classifier_mode)
    else:
        for client, _, ((tx, ty), _) in prepared:
            acc = _weighted_acc(
                spec, global_obj.values, tx, ty, client.label_distribution
            )
            rows.append(
                PersonalizationRow(client.client_id, "fedavg", local_size, acc, acc, 0.0)
            )

        def ft_curves(lr: float):
            curves = []
            for client, ds, ((tx, ty), (vx, vy)) in prepared:
                curve: list[tuple[float, float]] = []

                def on_epoch(_e, model, client=client, tx=tx, ty=ty, vx=vx, vy=vy):
                    dist = client.label_distribution
                    curve.append(
                        (
                            _weighted_acc(spec, model.values, vx, vy, dist),
                            _weighted_acc(spec, model.values, tx, ty, dist),
                        )
                    )

                finetune_full(
                    spec, global_obj, ds, epochs, lr, fed.weight_decay,
                    momentum=fed.momentum,
                    batch_size=fed.batch_size,
                    rng=stream(seed, "finetune", client.client_id),
                    epoch_callback=on_epoch,
                )
                curves.append((client.client_id, curve))
            return curves

        best = _pick_lr(lr_grid, ft_curves)
        chosen_lr["fedavg_ft"] = best[0]
        rows.extend(
            _curve_row(cid, "fedavg_ft", local_size, curve) for cid, curve in best[1]
        )
        trainable["fedavg_ft"] = len(global_obj)

    return PersonalizationReport(rows, chosen_lr, trainable)


def _pick_lr(grid: list[float], curves_for_lr):
    """Evaluate the grid, keep the lr with the best mean best-epoch val acc."""
    best_lr, best_score, best_curves = None, -np.inf, None
    for lr in grid:
        curves = curves_for_lr(lr)
        score = float(
            np.mean([max(v for v, _ in curve) for _, curve in curves])
        )
        if score > best_score:
            best_lr, best_score, best_curves = lr, score, curves
    return best_lr, best_curves


# ---------------------------------------------------------------------------
# Diagnostics drivers
# ---------------------------------------------------------------------------


def collapse_comparison(
    cfg: ExperimentConfig, bench: Benchmark, max_workers: int = 1
) -> dict[str, list[RoundMetrics]]:
    """Run the naive and coordinate-descent algorithms at the same budget."""
    datasets = participating_datasets(bench)
    spec = model_spec(cfg, bench)
    ctx = eval_context(bench)
    out = {}
    for algorithm in ("fedbasis_naive", "fedbasis"):
        fed = replace(cfg.fed_config(num_clients=len(datasets)), algorithm=algorithm)
        _, metrics = run_federation(
            spec, datasets, fed,
            eval_context=ctx,
            diagnostic_cadence=cfg.diagnostic_cadence,
            max_workers=max_workers,
        )
        out[algorithm] = metrics
    return out


def collapse_csv(results: dict[str, list[RoundMetrics]]) -> str:
    out = ["algorithm,round,mean_pairwise_cosine,mean_alpha_entropy,global_loss"]
    for algorithm, metrics in results.items():
        for m in metrics:
            out.append(
                f"{algorithm},{m.round_index},{format_float(m.mean_pairwise_cosine)},"
                f"{format_float(m.mean_alpha_entropy)},{format_float(m.global_loss)}"
            )
    return "\n".join(out) + "\n"


def finetuned_client_models(
    spec: MlpSpec,
    global_model: ParamVector,
    bench: Benchmark,
    seed: int,
    epochs: int = 40,
    lr: float = 0.05,
    weight_decay: float = 1e-4,
    batch_size: int = 16,
    role: str = "participating",
) -> tuple[list[ClientSplit], list[ParamVector]]:
    """Fully fine-tune the global model on every client (compression input)."""
    clients = bench.clients_with_role(role)
    models = []
    for client in clients:
        ds = bench.client_dataset(client)
        models.append(
            finetune_full(
                spec, global_model, ds, epochs, lr, weight_decay,
                momentum=0.9,
                batch_size=batch_size,
                rng=stream(seed, "ftfull", client.client_id),
            )
        )
    return clients, models


def mean_personalized_accuracy(
    spec: MlpSpec,
    bench: Benchmark,
    clients: list[ClientSplit],
    models: list[ParamVector],
) -> float:
    accs = []
    for client, model in zip(clients, models):
        tx, ty = bench.domain_split(client.domain_id, "test")
        accs.append(_weighted_acc(spec, model.values, tx, ty, client.label_distribution))
    return float(np.mean(accs))


def compression_report(
    spec: MlpSpec,
    bench: Benchmark,
    clients: list[ClientSplit],
    models: list[ParamVector],
    pca_components: list[int],
    kmeans_clusters: list[int],
    seed: int,
) -> list[dict]:
    """Accuracy of PCA- and k-means-compressed personalized models."""
    rows = [
        {
            "method": "original",
            "k": len(models),
            "mean_personalized_acc": mean_personalized_accuracy(
                spec, bench, clients, models
            ),
            "explained_variance": 1.0,
        }
    ]
    for k in pca_components:
        result = pca_compress(models, k)
        rows.append(
            {
                "method": "pca",
                "k": k,
                "mean_personalized_acc": mean_personalized_accuracy(
                    spec, bench, clients, result.reconstructed
                ),
                "explained_variance": result.explained_variance_ratio,
            }
        )
    for k in kmeans_clusters:
        assign, centroids = kmeans_compress(models, k, seed)
        replaced = [centroids[a] for a in assign]
        rows.append(
            {
                "method": "kmeans",
                "k": k,
                "mean_personalized_acc": mean_personalized_accuracy(
                    spec, bench, clients, replaced
                ),
                "explained_variance": float("nan"),
            }
        )
    return rows


def compression_csv(rows: list[dict]) -> str:
    out = ["method,k,mean_personalized_acc,explained_variance"]
    for r in rows:
        out.append(
            f"{r['method']},{r['k']},{format_float(r['mean_personalized_acc'])},"
            f"{format_float(r['explained_variance'])}"
        )
    return "\n".join(out) + "\n"


def coefficient_heatmap_for_clients(
    spec: MlpSpec,
    basis_set: BasisSet,
    bench: Benchmark,
    settings: dict,
    seed: int,
    role: str = "participating",
) -> str:
    """Personalize each client's coefficients and export them as CSV."""
    fed = FedConfig(
        rounds=1,
        num_clients=1,
        seed=seed,
        batch_size=int(settings.get("batch_size", 16)),
        lr_logits=float(settings["lr_logits"]),
    )
    entries = []
    from .basis import coefficients as _coeffs

    for client in bench.clients_with_role(role):
        ds = bench.client_dataset(client)
        result = personalize_new_client(
            spec, basis_set, ds, fed,
            classifier_mode="frozen",
            epochs=int(settings["epochs"]),
            rng=stream(seed, "heatmap", client.client_id),
        )
        entries.append((client.client_id, client.domain_id, _coeffs(result.state)))
    block_names = [b.name for b in basis_set.block_spec]
    return coefficient_heatmap_csv(entries, block_names)


# ---------------------------------------------------------------------------
# Command implementations (files in, files out)
# ---------------------------------------------------------------------------


def cmd_build_bench(cfg: ExperimentConfig) -> list[Path]:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if cfg.dataset["kind"] == "synthetic":
        domains = synthetic_domains(cfg)
        csv_path = out / "dataset.csv"
        write_dataset_csv(csv_path, domains)
        written.append(csv_path)
    bench = materialize_benchmark(cfg)
    manifest_path = out / "manifest.json"
    from .bench import manifest_to_json

    manifest_path.write_text(manifest_to_json(bench))
    written.append(manifest_path)
    return written


def cmd_train(cfg: ExperimentConfig, max_workers: int = 1) -> list[Path]:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    bench = materialize_benchmark(cfg)
    global_obj, metrics = train_run(cfg, bench, max_workers=max_workers)

    from .checkpoint import checkpoint_write

    ckpt_path = out / "checkpoint.fbas"
    checkpoint_write(ckpt_path, global_obj)
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text(metrics_jsonl(metrics))
    return [ckpt_path, metrics_path]


def cmd_personalize(
    cfg: ExperimentConfig, checkpoint_path: Path | None = None
) -> list[Path]:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    bench = materialize_benchmark(cfg)
    spec = model_spec(cfg, bench)

    from .checkpoint import checkpoint_read

    ckpt = checkpoint_path or (out / "checkpoint.fbas")
    global_obj = checkpoint_read(ckpt)

    report = personalization_report(
        spec, global_obj, bench, cfg.personalization, cfg.seed
    )
    csv_path = out / "personalization.csv"
    csv_path.write_text(report.to_csv())

    summary = {
        "chosen_lr": {k: format_float(v) for k, v in report.chosen_lr.items()},
        "trainable_params": report.trainable_params,
    }
    if isinstance(global_obj, BasisSet):
        expected = global_obj.num_blocks * global_obj.k
        if cfg.personalization["classifier_mode"] == "frozen":
            if report.trainable_params["fedbasis"] != expected:
                raise DataError(
                    "trainable-parameter contract violated: "
                    f"{report.trainable_params['fedbasis']} != {expected}"
                )
        summary["coefficient_scalars"] = expected
    summary_path = out / "personalization_summary.json"
    summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return [csv_path, summary_path]


def cmd_diagnose(cfg: ExperimentConfig, mode: str, max_workers: int = 1) -> list[Path]:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    bench = materialize_benchmark(cfg)
    spec = model_spec(cfg, bench)

    if mode == "collapse":
        results = collapse_comparison(cfg, bench, max_workers=max_workers)
        path = out / "collapse.csv"
        path.write_text(collapse_csv(results))
        return [path]

    if mode == "compression":
        datasets = participating_datasets(bench)
        fed = replace(cfg.fed_config(num_clients=len(datasets)), algorithm="fedavg")
        global_model, _ = run_federation(spec, datasets, fed, max_workers=max_workers)
        clients, models = finetuned_client_models(
            spec, global_model, bench, cfg.seed
        )
        k = cfg.doc["fed"]["num_bases"]
        rows = compression_report(
            spec, bench, clients, models,
            pca_components=sorted({int(k), len(models)}),
            kmeans_clusters=[int(k)],
            seed=cfg.seed,
        )
        path = out / "compression.csv"
        path.write_text(compression_csv(rows))
        return [path]

    if mode == "heatmap":
        from .checkpoint import checkpoint_read

        global_obj = checkpoint_read(out / "checkpoint.fbas")
        if not isinstance(global_obj, BasisSet):
            raise ConfigError("heatmap diagnostics need a basis-set checkpoint")
        csv = coefficient_heatmap_for_clients(
            spec, global_obj, bench, cfg.personalization, cfg.seed
        )
        path = out / "coefficients.csv"
        path.write_text(csv)
        return [path]

    raise ConfigError(f"unknown diagnose mode {mode!r}")
