import numpy as np
import pytest

import fedbasis as fb
from fedbasis.bench import SplitFractions


def make_clients(rng, num_clients=6, dim=4, classes=3, n_range=(6, 24), domains=("d0", "d1")):
    """Small random client population for protocol-level tests."""
    out = []
    for cid in range(num_clients):
        n = int(rng.integers(*n_range))
        out.append(
            fb.ClientDataset(
                f"c{cid}",
                domains[cid % len(domains)],
                rng.normal(size=(n, dim)),
                rng.integers(0, classes, n),
                classes,
            )
        )
    return out


def desk_benchmark(seed, samples_per_domain=1000, participating=10, new=10,
                   domains=4, classes=7, dim=16, shift=2.0, separation=1.25):
    """The standard synthetic multi-domain benchmark used in acceptance."""
    domain_sets = fb.make_synthetic_multidomain(
        domains, classes, samples_per_domain, dim, shift, separation, seed
    )
    return fb.build_pflbed(
        domain_sets, participating, new, 0.3,
        SplitFractions(0.6, 0.2, 0.05, 0.15), seed,
    )


def desk_fed_config(algorithm, seed, **overrides):
    base = dict(
        rounds=40, num_clients=40, participation_fraction=1.0, local_epochs=5,
        batch_size=16, lr_bases=0.05, lr_logits=0.1, weight_decay=1e-4,
        momentum=0.9, temperature=0.1, num_bases=4, use_major=False,
        warm_start_fraction=0.0, algorithm=algorithm, seed=seed,
    )
    base.update(overrides)
    return fb.FedConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
