"""Benchmark construction for personalized federated evaluation.

Builds client populations from domain-annotated datasets: per domain, a
class-balanced shared test/validation split, a class-skewed Dirichlet
partition of the remaining samples into participating clients, a held-out
"new" pool partitioned the same way, and an exact record of every client's
training label distribution. Evaluation then reweights the shared test set
by that recorded distribution, so a client's training and evaluation label
distributions match by construction.

A synthetic multi-domain Gaussian generator stands in for real image data:
class means are drawn once, then each domain sees them through its own
rotation-plus-offset, with the shift magnitude as a single knob.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .errors import ConfigError, DataError, ShapeError
from .rng import RngSeed, child_seed, stream

MANIFEST_FORMAT = "pflbed-manifest"
MANIFEST_VERSION = 1


def format_float(x: float) -> str:
    """17 significant digits: enough to round-trip any float64 exactly."""
    return format(float(x), ".17g")


@dataclass(frozen=True)
class DomainDataset:
    """All samples of one domain."""

    domain_id: str
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) ints in [0, num_classes)
    num_classes: int

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or labels.shape != (feats.shape[0],):
            raise ShapeError("features must be (n, d) with matching labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DataError(
                f"domain {self.domain_id!r} has labels outside [0, {self.num_classes})"
            )
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class ClientDataset:
    """One client's private training data plus its label distribution."""

    client_id: str
    domain_id: str
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    label_distribution: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        if self.label_distribution is None:
            dist = empirical_label_distribution(labels, self.num_classes)
        else:
            dist = np.asarray(self.label_distribution, dtype=np.float64)
        object.__setattr__(self, "label_distribution", dist)

    def __len__(self) -> int:
        return self.features.shape[0]


def empirical_label_distribution(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Exact per-class frequencies of the given labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return np.zeros(num_classes)
    return np.bincount(labels, minlength=num_classes) / labels.size


@dataclass(frozen=True)
class SplitFractions:
    train: float
    new: float
    val: float
    test: float

    def __post_init__(self) -> None:
        vals = (self.train, self.new, self.val, self.test)
        if any(f <= 0 for f in vals):
            raise ConfigError("all split fractions must be positive")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(vals)}")

    @classmethod
    def from_sequence(cls, seq) -> "SplitFractions":
        if len(seq) != 4:
            raise ConfigError("fractions must be (train, new, val, test)")
        return cls(*(float(f) for f in seq))


@dataclass(frozen=True)
class DomainSplit:
    """Index sets (local to the domain) of the four-way split."""

    train: np.ndarray
    new: np.ndarray
    val: np.ndarray
    test: np.ndarray


def split_domain(
    dataset: DomainDataset, fractions: SplitFractions, seed: RngSeed
) -> DomainSplit:
    """Split one domain into train/new pools and class-balanced val/test sets.

    Val and test get exactly ``floor(n * fraction / C)`` samples per class
    (a class too small for that errors out by name); the new pool is a plain
    random draw of ``floor(n * new_fraction)``; every rounding remainder
    lands in train.
    """
    n = len(dataset)
    c = dataset.num_classes
    per_class_test = int(n * fractions.test / c)
    per_class_val = int(n * fractions.val / c)
    rng = stream(seed, "split", dataset.domain_id)

    val_parts, test_parts, pool_parts = [], [], []
    for cls in range(c):
        cls_idx = np.flatnonzero(dataset.labels == cls)
        if cls_idx.size < per_class_test + per_class_val:
            raise DataError(
                f"class {cls} in domain {dataset.domain_id!r} has {cls_idx.size} "
                f"samples, needs {per_class_test + per_class_val} for balanced "
                "val/test splits"
            )
        cls_idx = rng.permutation(cls_idx)
        test_parts.append(cls_idx[:per_class_test])
        val_parts.append(cls_idx[per_class_test : per_class_test + per_class_val])
        pool_parts.append(cls_idx[per_class_test + per_class_val :])

    pool = rng.permutation(np.concatenate(pool_parts))
    n_new = int(n * fractions.new)
    if n_new > pool.size:
        raise DataError(
            f"domain {dataset.domain_id!r}: new split wants {n_new} samples, "
            f"only {pool.size} remain after balanced val/test"
        )
    return DomainSplit(
        train=np.sort(pool[n_new:]),
        new=np.sort(pool[:n_new]),
        val=np.sort(np.concatenate(val_parts)) if per_class_val else np.empty(0, np.int64),
        test=np.sort(np.concatenate(test_parts)) if per_class_test else np.empty(0, np.int64),
    )


def dirichlet_partition(
    indices: np.ndarray,
    labels: np.ndarray,
    num_clients: int,
    beta: float,
    seed: RngSeed,
    max_attempts: int = 100,
) -> list[np.ndarray]:
    """Class-skewed partition of ``indices`` among clients.

    Per class, client proportions are drawn from a symmetric Dirichlet(beta)
    and that class's samples assigned multinomially. Draws leaving any client
    empty are rejected and redrawn, up to ``max_attempts``.
    """
    indices = np.asarray(indices, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if indices.shape != labels.shape:
        raise ShapeError("indices and labels must align")
    if num_clients < 1:
        raise ConfigError("need at least one client")
    if beta <= 0:
        raise ConfigError("Dirichlet concentration must be positive")
    if indices.size < num_clients:
        raise DataError(
            f"cannot fill {num_clients} clients from {indices.size} samples"
        )

    rng = stream(seed, "dirichlet")
    classes = np.unique(labels)
    for _ in range(max_attempts):
        parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for cls in classes:
            cls_idx = rng.permutation(indices[labels == cls])
            proportions = rng.dirichlet(np.full(num_clients, beta))
            counts = rng.multinomial(cls_idx.size, proportions)
            splits = np.split(cls_idx, np.cumsum(counts)[:-1])
            for m in range(num_clients):
                parts[m].append(splits[m])
        result = [np.sort(np.concatenate(p)) for p in parts]
        if all(r.size > 0 for r in result):
            return result
    raise DataError(
        f"could not produce {num_clients} non-empty clients in "
        f"{max_attempts} Dirichlet draws"
    )


def label_discrepancy(p: np.ndarray, q: np.ndarray) -> float:
    """L1 distance between two label distributions, in [0, 2]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError("distributions must be vectors of equal length")
    for name, v in (("first", p), ("second", q)):
        if (v < -1e-12).any() or abs(v.sum() - 1.0) > 1e-9:
            raise ShapeError(f"{name} argument is not a distribution")
    return float(np.abs(p - q).sum())


def make_synthetic_multidomain(
    domains: int,
    classes: int,
    samples_per_domain: int,
    input_dim: int,
    domain_shift: float,
    class_separation: float,
    seed: RngSeed,
    noise_scale: float = 1.0,
) -> list[DomainDataset]:
    """Gaussian class clusters, re-posed per domain.

    Class means are drawn once from N(0, class_separation^2 I). Each domain
    applies its own rotation exp(domain_shift * S) (S a normalized random
    skew-symmetric generator, so shift 0 is the identity) plus an offset of
    norm ``domain_shift``; samples are means plus isotropic noise.
    """
    if min(domains, classes, samples_per_domain, input_dim) <= 0:
        raise ConfigError("synthetic generator sizes must be positive")
    if domain_shift < 0 or class_separation <= 0 or noise_scale <= 0:
        raise ConfigError("synthetic generator scales must be positive")

    means = stream(seed, "class_means").normal(
        0.0, class_separation, size=(classes, input_dim)
    )
    counts = np.full(classes, samples_per_domain // classes)
    counts[: samples_per_domain % classes] += 1

    datasets = []
    for d in range(domains):
        rng = stream(seed, "domain", d)
        a = rng.normal(size=(input_dim, input_dim))
        skew = (a - a.T) / np.sqrt(2.0 * input_dim)
        rotation = expm(domain_shift * skew)
        direction = rng.normal(size=input_dim)
        offset = domain_shift * direction / np.linalg.norm(direction)
        dom_means = means @ rotation.T + offset

        labels = np.repeat(np.arange(classes), counts)
        feats = dom_means[labels] + noise_scale * rng.normal(
            size=(samples_per_domain, input_dim)
        )
        order = rng.permutation(samples_per_domain)
        datasets.append(
            DomainDataset(f"d{d}", feats[order], labels[order], classes)
        )
    return datasets


@dataclass(frozen=True)
class ClientSplit:
    """Manifest entry for one client; indices are rows of the full dataset."""

    client_id: str
    domain_id: str
    role: str  # "participating" or "new"
    train_indices: np.ndarray
    label_distribution: np.ndarray


@dataclass(frozen=True)
class DomainEval:
    domain_id: str
    val_indices: np.ndarray
    test_indices: np.ndarray


@dataclass(frozen=True)
class Benchmark:
    """A fully materialized benchmark: data table plus the client manifest."""

    features: np.ndarray  # (N, d), all domains stacked in manifest order
    labels: np.ndarray
    row_domains: tuple[str, ...]  # per-row domain id
    num_classes: int
    clients: tuple[ClientSplit, ...]
    domain_eval: tuple[DomainEval, ...]
    seed: int
    beta: float
    fractions: SplitFractions

    def client_dataset(self, client: ClientSplit) -> ClientDataset:
        idx = client.train_indices
        return ClientDataset(
            client.client_id,
            client.domain_id,
            self.features[idx],
            self.labels[idx],
            self.num_classes,
            client.label_distribution,
        )

    def clients_with_role(self, role: str) -> list[ClientSplit]:
        return [c for c in self.clients if c.role == role]

    def domain_split(self, domain_id: str, which: str) -> tuple[np.ndarray, np.ndarray]:
        for ev in self.domain_eval:
            if ev.domain_id == domain_id:
                idx = ev.test_indices if which == "test" else ev.val_indices
                return self.features[idx], self.labels[idx]
        raise DataError(f"unknown domain {domain_id!r}")


def build_pflbed(
    domain_datasets: list[DomainDataset],
    participating_per_domain: int,
    new_per_domain: int,
    beta: float,
    fractions: SplitFractions,
    seed: RngSeed,
) -> Benchmark:
    """Compose the full benchmark from per-domain datasets.

    Row indices in the result refer to the datasets concatenated in the
    given order, which is also the row order of the exported CSV.
    """
    if participating_per_domain < 1 or new_per_domain < 0:
        raise ConfigError("client counts per domain must be positive")
    num_classes = domain_datasets[0].num_classes
    for ds in domain_datasets:
        if ds.num_classes != num_classes:
            raise DataError("all domains must share one class count")

    clients: list[ClientSplit] = []
    evals: list[DomainEval] = []
    offset = 0
    for ds in domain_datasets:
        split = split_domain(ds, fractions, seed)
        evals.append(
            DomainEval(ds.domain_id, split.val + offset, split.test + offset)
        )
        for role, pool, count, tag in (
            ("participating", split.train, participating_per_domain, "p"),
            ("new", split.new, new_per_domain, "n"),
        ):
            if count == 0:
                continue
            parts = dirichlet_partition(
                pool,
                ds.labels[pool],
                count,
                beta,
                child_seed(seed, "partition", ds.domain_id, role),
            )
            for j, part in enumerate(parts):
                clients.append(
                    ClientSplit(
                        client_id=f"{ds.domain_id}_{tag}{j:02d}",
                        domain_id=ds.domain_id,
                        role=role,
                        train_indices=part + offset,
                        label_distribution=empirical_label_distribution(
                            ds.labels[part], num_classes
                        ),
                    )
                )
        offset += len(ds)

    return Benchmark(
        features=np.concatenate([ds.features for ds in domain_datasets]),
        labels=np.concatenate([ds.labels for ds in domain_datasets]),
        row_domains=tuple(
            np.repeat([ds.domain_id for ds in domain_datasets],
                      [len(ds) for ds in domain_datasets]).tolist()
        ),
        num_classes=num_classes,
        clients=tuple(clients),
        domain_eval=tuple(evals),
        seed=int(seed),
        beta=float(beta),
        fractions=fractions,
    )


# ---------------------------------------------------------------------------
# Serialization: dataset CSV and benchmark manifest
# ---------------------------------------------------------------------------


def write_dataset_csv(path, datasets: list[DomainDataset]) -> None:
    dim = datasets[0].features.shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        header = [f"f{i}" for i in range(dim)] + ["label", "domain"]
        fh.write(",".join(header) + "\n")
        for ds in datasets:
            for row, label in zip(ds.features, ds.labels):
                cells = [format_float(v) for v in row]
                cells.append(str(int(label)))
                cells.append(ds.domain_id)
                fh.write(",".join(cells) + "\n")


def read_dataset_csv(path) -> list[DomainDataset]:
    """Parse the CSV contract back into per-domain datasets (row order kept)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        for required in ("label", "domain"):
            if required not in header:
                raise DataError(f"dataset CSV is missing column {required!r}")
        feat_cols = [i for i, name in enumerate(header) if name.startswith("f")]
        expected = [f"f{i}" for i in range(len(feat_cols))]
        if [header[i] for i in feat_cols] != expected:
            raise DataError("feature columns must be f0..f{d-1} in order")
        label_col = header.index("label")
        domain_col = header.index("domain")

        feats, labels, domains = [], [], []
        for line_no, line in enumerate(fh, start=2):
            cells = line.rstrip("\n").split(",")
            if len(cells) != len(header):
                raise DataError(f"line {line_no}: expected {len(header)} cells")
            feats.append([float(cells[i]) for i in feat_cols])
            labels.append(int(cells[label_col]))
            domains.append(cells[domain_col])

    if not feats:
        raise DataError("dataset CSV has no rows")
    features = np.asarray(feats)
    labels_arr = np.asarray(labels, dtype=np.int64)
    num_classes = int(labels_arr.max()) + 1
    domains_arr = np.asarray(domains)

    datasets = []
    seen = dict.fromkeys(domains)  # preserves first-appearance order
    for dom in seen:
        mask = domains_arr == dom
        datasets.append(DomainDataset(dom, features[mask], labels_arr[mask], num_classes))
    order_check = np.concatenate([np.flatnonzero(domains_arr == d) for d in seen])
    if not np.array_equal(order_check, np.arange(len(domains))):
        raise DataError("dataset CSV rows must be grouped by domain")
    return datasets


def manifest_to_json(bench: Benchmark) -> str:
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "seed": bench.seed,
        "beta": format_float(bench.beta),
        "num_classes": bench.num_classes,
        "fractions": {
            "train": format_float(bench.fractions.train),
            "new": format_float(bench.fractions.new),
            "val": format_float(bench.fractions.val),
            "test": format_float(bench.fractions.test),
        },
        "domains": [
            {
                "domain": ev.domain_id,
                "val_indices": ev.val_indices.tolist(),
                "test_indices": ev.test_indices.tolist(),
            }
            for ev in bench.domain_eval
        ],
        "clients": [
            {
                "id": c.client_id,
                "role": c.role,
                "domain": c.domain_id,
                "train_indices": c.train_indices.tolist(),
                "label_distribution": [
                    format_float(v) for v in c.label_distribution
                ],
            }
            for c in bench.clients
        ],
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def benchmark_from_manifest(
    manifest: dict, datasets: list[DomainDataset]
) -> Benchmark:
    """Rebuild a Benchmark from a parsed manifest plus the dataset rows."""
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DataError("not a benchmark manifest")
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {manifest.get('version')}")
    fr = manifest["fractions"]
    fractions = SplitFractions(
        float(fr["train"]), float(fr["new"]), float(fr["val"]), float(fr["test"])
    )
    clients = tuple(
        ClientSplit(
            client_id=c["id"],
            domain_id=c["domain"],
            role=c["role"],
            train_indices=np.asarray(c["train_indices"], dtype=np.int64),
            label_distribution=np.asarray(
                [float(v) for v in c["label_distribution"]]
            ),
        )
        for c in manifest["clients"]
    )
    evals = tuple(
        DomainEval(
            d["domain"],
            np.asarray(d["val_indices"], dtype=np.int64),
            np.asarray(d["test_indices"], dtype=np.int64),
        )
        for d in manifest["domains"]
    )
    return Benchmark(
        features=np.concatenate([ds.features for ds in datasets]),
        labels=np.concatenate([ds.labels for ds in datasets]),
        row_domains=tuple(
            np.repeat([ds.domain_id for ds in datasets],
                      [len(ds) for ds in datasets]).tolist()
        ),
        num_classes=int(manifest["num_classes"]),
        clients=clients,
        domain_eval=evals,
        seed=int(manifest["seed"]),
        beta=float(manifest["beta"]),
        fractions=fractions,
    )
