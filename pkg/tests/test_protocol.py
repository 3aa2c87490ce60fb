import numpy as np
import pytest

import fedbasis as fb
from fedbasis.errors import ConfigError, DataError, ShapeError
from fedbasis.nn import loss_and_grad_values
from fedbasis.protocol import ClientDiagnostics, trainable_param_count
from fedbasis.rng import stream

from conftest import desk_fed_config, make_clients


def small_cfg(algorithm="fedavg", **kw):
    base = dict(
        rounds=4, num_clients=6, participation_fraction=1.0, local_epochs=2,
        batch_size=4, lr_bases=0.05, lr_logits=0.1, weight_decay=1e-4,
        momentum=0.9, temperature=0.1, num_bases=2, use_major=False,
        warm_start_fraction=0.0, aggregation_weighting="uniform",
        algorithm=algorithm, seed=11,
    )
    base.update(kw)
    return fb.FedConfig(**base)


@pytest.fixture
def clients(rng):
    return make_clients(rng)


SPEC = fb.MlpSpec((4, 6, 3))


# --- client_update_fedavg ----------------------------------------------------


def test_zero_lr_returns_global_unchanged(clients):
    cfg = small_cfg(lr_bases=0.0)
    theta = fb.init_params(SPEC, 3)
    out = fb.client_update_fedavg(SPEC, theta, clients[0], cfg, stream(0, "t"))
    assert np.array_equal(out.values, theta.values)


def test_single_full_batch_step_is_one_gradient_step(clients):
    ds = clients[0]
    cfg = small_cfg(local_epochs=1, batch_size=len(ds), momentum=0.0, weight_decay=0.0)
    theta = fb.init_params(SPEC, 3)
    out = fb.client_update_fedavg(SPEC, theta, ds, cfg, stream(0, "t"))
    _, g = loss_and_grad_values(SPEC, theta.values, ds.features, ds.labels)
    expected = theta.values - cfg.lr_bases * g
    assert np.array_equal(out.values, expected)


def test_client_update_deterministic(clients):
    cfg = small_cfg()
    theta = fb.init_params(SPEC, 3)
    a = fb.client_update_fedavg(SPEC, theta, clients[0], cfg, stream(9, "c"))
    b = fb.client_update_fedavg(SPEC, theta, clients[0], cfg, stream(9, "c"))
    assert np.array_equal(a.values, b.values)


def test_empty_client_raises(clients):
    empty = fb.ClientDataset("e", "d0", np.zeros((0, 4)), np.zeros(0, dtype=int), 3)
    with pytest.raises(DataError):
        fb.client_update_fedavg(SPEC, fb.init_params(SPEC, 0), empty, small_cfg(), stream(0, "t"))


# --- aggregate ---------------------------------------------------------------


def blocks_of(n):
    return (fb.Block("all", 0, n),)


def test_aggregate_examples():
    a = fb.ParamVector([1.0], blocks_of(1))
    b = fb.ParamVector([3.0], blocks_of(1))
    assert fb.aggregate([a, b]).values[0] == 2.0
    assert fb.aggregate([a], np.array([1.0])).values[0] == 1.0
    c = fb.ParamVector([0.0], blocks_of(1))
    d = fb.ParamVector([4.0], blocks_of(1))
    assert fb.aggregate([c, d], np.array([0.25, 0.75])).values[0] == 3.0


def test_aggregate_identical_inputs_is_exact_identity(rng):
    # odd client counts exercise the non-dyadic weight case
    p = fb.ParamVector(rng.normal(size=7), blocks_of(7))
    for m in (2, 3, 5, 7):
        out = fb.aggregate([p] * m)
        assert np.array_equal(out.values, p.values)


def test_aggregate_validates_weights_and_shapes(rng):
    p = fb.ParamVector([1.0], blocks_of(1))
    q = fb.ParamVector([1.0, 2.0], blocks_of(2))
    with pytest.raises(ShapeError):
        fb.aggregate([p, q])
    with pytest.raises(ShapeError):
        fb.aggregate([p, p], np.array([0.6, 0.6]))
    with pytest.raises(ShapeError):
        fb.aggregate([])


def test_aggregate_basis_sets_idempotent(rng):
    spec = SPEC
    bases = tuple(fb.init_params(spec, k) for k in range(2))
    bs = fb.BasisSet(bases, fb.init_params(spec, 9))
    out = fb.aggregate_basis_sets([bs, bs, bs])
    for k in range(2):
        assert np.array_equal(out.bases[k].values, bs.bases[k].values)
    assert np.array_equal(out.major.values, bs.major.values)


# --- reductions to FedAvg ----------------------------------------------------


def test_naive_single_basis_matches_fedavg_update(clients):
    cfg = small_cfg(algorithm="fedbasis_naive", num_bases=1)
    theta = fb.init_params(SPEC, 3)
    avg = fb.client_update_fedavg(SPEC, theta, clients[1], cfg, stream(4, "x"))
    out = fb.client_update_fedbasis_naive(
        SPEC, fb.BasisSet((theta,)), clients[1], cfg, stream(4, "x")
    )
    assert np.array_equal(out.bases[0].values, avg.values)


def test_coordinate_descent_single_basis_matches_fedavg_update(clients):
    cfg = small_cfg(algorithm="fedbasis", num_bases=1)
    theta = fb.init_params(SPEC, 3)
    avg = fb.client_update_fedavg(SPEC, theta, clients[1], cfg, stream(4, "x"))
    out = fb.client_update_fedbasis(
        SPEC, fb.BasisSet((theta,)), clients[1], cfg,
        stream(5, "alpha"), stream(4, "x"),
    )
    assert np.array_equal(out.bases[0].values, avg.values)


def test_zero_learning_rates_leave_bases_unchanged(clients):
    cfg = small_cfg(algorithm="fedbasis_naive", num_bases=2, lr_bases=0.0, lr_logits=0.0)
    bs = fb.BasisSet((fb.init_params(SPEC, 0), fb.init_params(SPEC, 1)))
    out = fb.client_update_fedbasis_naive(SPEC, bs, clients[0], cfg, stream(0, "t"))
    for k in range(2):
        assert np.array_equal(out.bases[k].values, bs.bases[k].values)


def test_identical_bases_keep_uniform_coefficients(clients):
    cfg = small_cfg(algorithm="fedbasis", num_bases=3)
    p = fb.init_params(SPEC, 5)
    bs = fb.BasisSet((p, p, p))
    diag = ClientDiagnostics()
    fb.client_update_fedbasis(
        SPEC, bs, clients[0], cfg, stream(1, "a"), stream(1, "b"), diag
    )
    assert np.max(np.abs(diag.final_alpha - 1.0 / 3.0)) < 1e-9


def test_local_collapse_direction_under_naive_training(clients):
    # a long naive local update from independently random bases raises the
    # mean pairwise cosine of the local bases
    cfg = small_cfg(
        algorithm="fedbasis_naive", num_bases=3, local_epochs=20, lr_bases=0.2
    )
    bs = fb.BasisSet(tuple(fb.init_params(SPEC, k) for k in range(3)))
    diag = ClientDiagnostics()
    fb.client_update_fedbasis_naive(SPEC, bs, clients[2], cfg, stream(2, "n"), diag)
    start = diag.trace[0]["cosine"]
    end = diag.trace[-1]["cosine"]
    assert end > start + 0.3


# --- run_federation ----------------------------------------------------------


def test_zero_rounds_returns_initial_state(clients):
    cfg = small_cfg(rounds=0)
    theta, metrics = fb.run_federation(SPEC, clients, cfg)
    assert metrics == []
    assert np.array_equal(
        theta.values, fb.init_params(SPEC, stream(cfg.seed, "init", 0)).values
    )


def test_single_client_full_participation_is_sequential_sgd(clients):
    ds = clients[0]
    cfg = small_cfg(rounds=3, num_clients=1, aggregation_weighting="by_data_size")
    theta, metrics = fb.run_federation(SPEC, [ds], cfg)
    # manual: aggregation over one client is the identity
    manual = fb.init_params(SPEC, stream(cfg.seed, "init", 0))
    for t in range(cfg.rounds):
        manual = fb.client_update_fedavg(
            SPEC, manual, ds, cfg, stream(cfg.seed, "client", t, 0, "bases")
        )
    assert np.array_equal(theta.values, manual.values)
    assert len(metrics) == 3


def test_run_is_bit_deterministic(clients):
    from fedbasis.runner import metrics_jsonl

    cfg = small_cfg(algorithm="fedbasis", num_bases=2, rounds=3)
    v1, m1 = fb.run_federation(SPEC, clients, cfg)
    v2, m2 = fb.run_federation(SPEC, clients, cfg)
    for k in range(2):
        assert np.array_equal(v1.bases[k].values, v2.bases[k].values)
    assert metrics_jsonl(m1) == metrics_jsonl(m2)


def test_client_updates_are_stateless_across_rounds(clients):
    # the same global input yields the same local output regardless of what
    # happened in earlier rounds: nothing client-side persists
    cfg = small_cfg(algorithm="fedbasis", num_bases=2)
    bs = fb.BasisSet((fb.init_params(SPEC, 0), fb.init_params(SPEC, 1)))
    a = fb.client_update_fedbasis(
        SPEC, bs, clients[0], cfg, stream(3, "a"), stream(3, "b")
    )
    b = fb.client_update_fedbasis(
        SPEC, bs, clients[0], cfg, stream(3, "a"), stream(3, "b")
    )
    for k in range(2):
        assert np.array_equal(a.bases[k].values, b.bases[k].values)


def test_empty_clients_are_skipped_and_recorded(clients):
    with_empty = list(clients)
    with_empty[2] = fb.ClientDataset("c2", "d0", np.zeros((0, 4)), np.zeros(0, dtype=int), 3)
    cfg = small_cfg(rounds=2)
    theta, metrics = fb.run_federation(SPEC, with_empty, cfg)
    assert all(m.skipped_clients == (2,) for m in metrics)
    assert np.isfinite(theta.values).all()


def test_participation_fraction_samples_subset(clients):
    cfg = small_cfg(rounds=2, participation_fraction=0.5)
    _, metrics = fb.run_federation(SPEC, clients, cfg)
    assert len(metrics) == 2


def test_parallel_execution_matches_sequential(clients):
    from fedbasis.runner import metrics_jsonl

    cfg = small_cfg(algorithm="fedbasis", num_bases=2, rounds=2)
    v1, m1 = fb.run_federation(SPEC, clients, cfg, max_workers=1)
    v2, m2 = fb.run_federation(SPEC, clients, cfg, max_workers=4)
    for k in range(2):
        assert np.array_equal(v1.bases[k].values, v2.bases[k].values)
    assert metrics_jsonl(m1) == metrics_jsonl(m2)


# --- warm start --------------------------------------------------------------


def test_warm_start_round_count_formula():
    cfg = desk_fed_config("fedbasis", seed=0, rounds=100, warm_start_fraction=0.3)
    assert cfg.warm_start_rounds == 30


def test_warm_start_runs_fedavg_prefix(clients):
    cfg = small_cfg(algorithm="fedbasis", rounds=10, warm_start_fraction=0.3, num_bases=2)
    _, metrics = fb.run_federation(SPEC, clients, cfg)
    phases = [m.phase for m in metrics]
    assert phases == ["fedavg"] * 3 + ["fedbasis"] * 7


def test_warm_start_k_equals_m_centroids_are_local_models(clients):
    cfg = small_cfg(rounds=3, warm_start_fraction=0.5, num_bases=6, algorithm="fedbasis")
    bs = fb.warm_start(SPEC, clients, cfg)
    assert bs.k == 6 and bs.major is None
    # reproduce the final warm-start round's local models
    theta = fb.init_params(SPEC, stream(cfg.seed, "init", 0))
    locals_ = []
    for t in range(cfg.warm_start_rounds):
        locals_ = [
            fb.client_update_fedavg(
                SPEC, theta, clients[c], cfg, stream(cfg.seed, "client", t, c, "bases")
            )
            for c in range(6)
        ]
        theta = fb.aggregate([p for p in locals_])
    local_keys = {p.values.tobytes() for p in locals_}
    basis_keys = {b.values.tobytes() for b in bs.bases}
    assert basis_keys == local_keys


def test_warm_start_k1_centroid_is_mean_of_local_models(clients):
    cfg = small_cfg(rounds=2, warm_start_fraction=0.5, num_bases=1, algorithm="fedbasis")
    bs = fb.warm_start(SPEC, clients, cfg)
    theta = fb.init_params(SPEC, stream(cfg.seed, "init", 0))
    locals_ = [
        fb.client_update_fedavg(
            SPEC, theta, clients[c], cfg, stream(cfg.seed, "client", 0, c, "bases")
        )
        for c in range(6)
    ]
    mean = np.stack([p.values for p in locals_]).mean(axis=0)
    assert np.allclose(bs.bases[0].values, mean, rtol=0, atol=1e-12)


def test_warm_start_major_is_global_model(clients):
    cfg = small_cfg(
        rounds=4, warm_start_fraction=0.5, num_bases=2,
        algorithm="fedbasis", use_major=True,
    )
    bs = fb.warm_start(SPEC, clients, cfg)
    assert bs.major is not None
    theta = fb.init_params(SPEC, stream(cfg.seed, "init", 0))
    for t in range(2):
        locals_ = [
            fb.client_update_fedavg(
                SPEC, theta, clients[c], cfg, stream(cfg.seed, "client", t, c, "bases")
            )
            for c in range(6)
        ]
        theta = fb.aggregate(locals_)
    assert np.array_equal(bs.major.values, theta.values)


def test_warm_start_requires_enough_clients(clients):
    cfg = small_cfg(rounds=4, warm_start_fraction=0.5, num_bases=10, algorithm="fedbasis")
    with pytest.raises(ConfigError):
        fb.warm_start(SPEC, clients, cfg)


# --- personalization ---------------------------------------------------------


def test_personalize_zero_epochs_gives_uniform_combination(clients):
    cfg = small_cfg(num_bases=2)
    bs = fb.BasisSet((fb.init_params(SPEC, 0), fb.init_params(SPEC, 1)))
    res = fb.personalize_new_client(
        SPEC, bs, clients[0], cfg, classifier_mode="frozen", epochs=0
    )
    alpha = fb.coefficients(res.state)
    assert np.allclose(alpha, 0.5, atol=1e-15)
    from fedbasis.protocol import uniform_combination_values

    assert np.array_equal(res.model.values, uniform_combination_values(bs))
    assert res.classifier_delta is None


def test_personalize_single_basis_frozen_classifier_is_noop(clients):
    cfg = small_cfg(num_bases=1)
    bs = fb.BasisSet((fb.init_params(SPEC, 0),))
    res = fb.personalize_new_client(
        SPEC, bs, clients[0], cfg, classifier_mode="frozen", epochs=5
    )
    assert np.array_equal(res.model.values, bs.bases[0].values)


def test_personalize_trainable_parameter_count(clients):
    cfg = small_cfg(num_bases=3)
    bs = fb.BasisSet(tuple(fb.init_params(SPEC, k) for k in range(3)))
    frozen = fb.personalize_new_client(
        SPEC, bs, clients[0], cfg, classifier_mode="frozen", epochs=1
    )
    assert frozen.trainable_params == bs.num_blocks * 3
    trained = fb.personalize_new_client(
        SPEC, bs, clients[0], cfg, classifier_mode="trained", epochs=1
    )
    classifier_len = bs.block_spec[-1].length
    assert trained.trainable_params == bs.num_blocks * 3 + classifier_len
    assert trainable_param_count(bs, "frozen") == bs.num_blocks * 3


def test_personalize_rejects_empty_dataset():
    cfg = small_cfg(num_bases=2)
    bs = fb.BasisSet((fb.init_params(SPEC, 0), fb.init_params(SPEC, 1)))
    empty = fb.ClientDataset("e", "d0", np.zeros((0, 4)), np.zeros(0, dtype=int), 3)
    with pytest.raises(DataError):
        fb.personalize_new_client(SPEC, bs, empty, cfg, epochs=1)


# --- finetune_full -----------------------------------------------------------


def test_finetune_zero_epochs_and_zero_lr_are_identity(clients):
    theta = fb.init_params(SPEC, 1)
    out = fb.finetune_full(SPEC, theta, clients[0], epochs=0, lr=0.1, weight_decay=0.0)
    assert np.array_equal(out.values, theta.values)
    out = fb.finetune_full(SPEC, theta, clients[0], epochs=3, lr=0.0, weight_decay=1e-4)
    assert np.array_equal(out.values, theta.values)


def test_finetune_reduces_local_loss(clients):
    from fedbasis.nn import loss_values

    theta = fb.init_params(SPEC, 1)
    ds = clients[0]
    out = fb.finetune_full(SPEC, theta, ds, epochs=30, lr=0.1, weight_decay=0.0)
    before = loss_values(SPEC, theta.values, ds.features, ds.labels)
    after = loss_values(SPEC, out.values, ds.features, ds.labels)
    assert after < before


# --- config validation -------------------------------------------------------


def test_fed_config_rejects_bad_ranges():
    with pytest.raises(ConfigError):
        small_cfg(participation_fraction=0.0)
    with pytest.raises(ConfigError):
        small_cfg(momentum=1.0)
    with pytest.raises(ConfigError):
        small_cfg(temperature=0.0)
    with pytest.raises(ConfigError):
        small_cfg(algorithm="sgd")
    with pytest.raises(ConfigError):
        small_cfg(aggregation_weighting="median")
    with pytest.raises(ConfigError):
        small_cfg(warm_start_fraction=1.0)
