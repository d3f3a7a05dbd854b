"""Federated round loop: selection, local phases, aggregation, determinism."""

from __future__ import annotations

import copy
import math

import numpy as np
import pytest

from fedpr import (
    Batch,
    ClientState,
    ForgeryModel,
    LossWeights,
    PartitionedParams,
    RoundConfig,
    aggregate,
    backward,
    client_round,
    run_federation,
    select_clients,
    sgd_step,
    zero_grads,
)
from fedpr.errors import AggregationError, ConfigError, PartitionError
from fedpr.federation import load_shared
from fedpr.model import (
    forward_mixed,
    loss_adversarial,
    loss_personalized,
    loss_shared,
    total_loss,
)
from fedpr.synthdata import SyntheticSpec, batches, generate


def make_clients(k=2, samples=40, seed=5, all_shared=False):
    data = generate(SyntheticSpec(clients=k, samples_per_client=samples, seed=seed))
    template = ForgeryModel(np.random.default_rng([seed, 100]))
    clients = []
    for cd in data:
        model = ForgeryModel(np.random.default_rng([seed, 200 + cd.client_id]))
        partition = (
            PartitionedParams.all_shared(model)
            if all_shared
            else PartitionedParams.default_for(model)
        )
        for name in partition.shared:
            model.params[name].value.data[...] = template.params[name].value.data
        clients.append(
            ClientState(
                client_id=cd.client_id,
                model=model,
                dataset=cd,
                rng=np.random.default_rng([seed, 300 + cd.client_id]),
                partition=partition,
            )
        )
    return clients


def small_config(**overrides):
    base = dict(rounds=2, batch_size=4, lr=0.05, momentum=0.5)
    base.update(overrides)
    return RoundConfig(**base)


def params_bytes(clients):
    return b"".join(
        p.value.data.tobytes() for c in clients for p in c.model.params.values()
    )


class TestSelectClients:
    def test_select_all(self):
        assert select_clients(0, 8, 1.0, np.random.default_rng(0)) == list(range(8))

    def test_fraction_count(self):
        chosen = select_clients(0, 8, 0.25, np.random.default_rng(1))
        assert len(chosen) == 2
        assert chosen == sorted(set(chosen))

    def test_ceil_guard_against_float_noise(self):
        assert len(select_clients(0, 10, 0.1, np.random.default_rng(2))) == 1

    def test_deterministic_for_fixed_seed(self):
        a = select_clients(3, 10, 0.5, np.random.default_rng(9))
        b = select_clients(3, 10, 0.5, np.random.default_rng(9))
        assert a == b

    def test_empty_population_rejected(self):
        with pytest.raises(ConfigError):
            select_clients(0, 0, 1.0, np.random.default_rng(0))


class TestAggregate:
    def test_identical_updates_idempotent(self):
        update = {"w": np.array([1.0, 2.0])}
        got = aggregate([update, update, update])
        np.testing.assert_array_equal(got["w"], update["w"])

    def test_two_client_mean(self):
        got = aggregate([{"w": np.array([1.0])}, {"w": np.array([3.0])}])
        assert got["w"].tolist() == [2.0]

    def test_three_client_hand_mean(self):
        got = aggregate([{"w": np.array([v])} for v in (0.3, 0.6, 0.9)])
        assert abs(got["w"][0] - 0.6) < 1e-12

    def test_linearity(self):
        rng = np.random.default_rng(4)
        updates = [{"w": rng.normal(size=(3, 2))} for _ in range(4)]
        scaled = [{"w": 2.5 * u["w"]} for u in updates]
        np.testing.assert_allclose(
            aggregate(scaled)["w"], 2.5 * aggregate(updates)["w"], atol=1e-12
        )

    def test_literal_coefficient_form(self):
        got = aggregate([{"w": np.array([1.0])}, {"w": np.array([3.0])}], coefficient=0.5)
        assert got["w"].tolist() == [2.0]

    def test_mismatched_names_rejected(self):
        with pytest.raises(AggregationError):
            aggregate([{"a": np.zeros(1)}, {"b": np.zeros(1)}])

    def test_mismatched_shapes_rejected(self):
        with pytest.raises(AggregationError):
            aggregate([{"a": np.zeros(2)}, {"a": np.zeros(3)}])

    def test_empty_rejected(self):
        with pytest.raises(AggregationError):
            aggregate([])


class TestClientRound:
    def test_zero_lr_returns_snapshot_bitwise(self):
        client = make_clients(k=1)[0]
        snapshot = client.shared_snapshot()
        result = client_round(client, snapshot, small_config(lr=0.0))
        for name, value in snapshot.items():
            assert result.shared_update[name].tobytes() == value.tobytes()

    def test_no_personalized_names_in_update(self):
        client = make_clients(k=1)[0]
        result = client_round(client, client.shared_snapshot(), small_config())
        assert set(result.shared_update) == set(client.partition.shared)
        assert not any(name.startswith("fp.") for name in result.shared_update)

    def test_partition_name_mismatch_rejected(self):
        client = make_clients(k=1)[0]
        bad = client.shared_snapshot()
        bad["fp.head.weight"] = np.zeros((16, 2))
        with pytest.raises(PartitionError):
            client_round(client, bad, small_config())

    def test_round_matches_manual_replay(self):
        # Replays the documented local schedule with raw tensor ops and
        # checks the returned shared update bitwise.
        cfg = small_config(local_personal_steps=2, local_shared_steps=2)
        client = make_clients(k=1, seed=8)[0]
        mirror = copy.deepcopy(client)
        snapshot = client.shared_snapshot()
        result = client_round(client, snapshot, cfg)

        load_shared(mirror, snapshot)
        model = mirror.model
        epoch = iter([])
        def next_batch():
            nonlocal epoch
            try:
                return next(epoch)
            except StopIteration:
                epoch = batches(mirror.dataset.train, cfg.batch_size, mirror.rng)
                return next(epoch)

        for phase_names in (mirror.partition.personalized, mirror.partition.shared):
            trainable = [p for n, p in model.params.items() if n in phase_names]
            for _ in range(2):
                batch = next_batch()
                out = forward_mixed(model, batch, mirror.rng)
                lp = loss_personalized(out.log_probs_p, batch.labels)
                ls = loss_shared(out.log_probs_s, batch.labels[out.pair_index])
                ladv = loss_adversarial(out.log_probs_s_adv)
                loss = total_loss(lp, ls, ladv, cfg.weights)
                zero_grads(model.named_params())
                backward(loss)
                sgd_step(trainable, cfg.lr, cfg.momentum)

        for name in snapshot:
            assert (
                result.shared_update[name].tobytes()
                == model.params[name].value.data.tobytes()
            )

    def test_epoch_default_steps(self):
        client = make_clients(k=1, samples=40)[0]  # 28 train samples
        cfg = small_config()
        result = client_round(client, client.shared_snapshot(), cfg)
        assert result.step_count == 2 * math.ceil(28 / cfg.batch_size)

    def test_loss_sums_finite_and_nonnegative(self):
        client = make_clients(k=1)[0]
        result = client_round(client, client.shared_snapshot(), small_config())
        for value in result.loss_sums.values():
            assert np.isfinite(value) and value >= 0.0


class TestRunFederation:
    def test_zero_rounds_leaves_clients_untouched(self):
        clients = make_clients(k=2)
        before = params_bytes(clients)
        history = run_federation(clients, small_config(rounds=0), np.random.default_rng(0))
        assert history == []
        assert params_bytes(clients) == before

    def test_history_shape(self):
        clients = make_clients(k=2)
        history = run_federation(clients, small_config(rounds=3), np.random.default_rng(1))
        assert [r.round_index for r in history] == [0, 1, 2]
        for report in history:
            assert set(report.client_evals) == {0, 1}
            assert report.mean_total_loss >= 0.0
            assert np.isfinite(report.mean_total_loss)

    def test_thread_count_does_not_change_results(self):
        serial = make_clients(k=4, seed=21)
        threaded = make_clients(k=4, seed=21)
        cfg = small_config(rounds=2)
        run_federation(serial, cfg, np.random.default_rng(2), n_workers=1)
        run_federation(threaded, cfg, np.random.default_rng(2), n_workers=4)
        assert params_bytes(serial) == params_bytes(threaded)

    def test_broadcast_syncs_shared_parameters(self):
        clients = make_clients(k=3, seed=22)
        run_federation(clients, small_config(rounds=1), np.random.default_rng(3))
        reference = clients[0].shared_snapshot()
        for other in clients[1:]:
            snap = other.shared_snapshot()
            for name, value in reference.items():
                assert np.array_equal(snap[name], value)

    def test_personalized_parameters_diverge_across_clients(self):
        clients = make_clients(k=3, seed=23)
        run_federation(clients, small_config(rounds=1), np.random.default_rng(4))
        heads = [c.model.param("fp.head.weight").value.data.tobytes() for c in clients]
        assert len(set(heads)) == len(heads)

    def test_mixed_partitions_rejected(self):
        clients = make_clients(k=2, seed=24)
        clients[1] = ClientState(
            client_id=clients[1].client_id,
            model=clients[1].model,
            dataset=clients[1].dataset,
            rng=clients[1].rng,
            partition=PartitionedParams.all_shared(clients[1].model),
        )
        with pytest.raises(PartitionError):
            run_federation(clients, small_config(rounds=1), np.random.default_rng(5))

    def test_message_sink_sees_only_shared_names_and_no_raw_samples(self):
        clients = make_clients(k=2, seed=25)
        sample_bytes = [
            s.image.data.tobytes() for c in clients for s in c.dataset.train[:3]
        ]
        messages = []

        def sink(round_index, client_id, result):
            blob = b"".join(
                name.encode() + value.tobytes()
                for name, value in sorted(result.shared_update.items())
            )
            blob += repr(sorted(result.loss_sums.items())).encode()
            messages.append((round_index, client_id, set(result.shared_update), blob))

        run_federation(clients, small_config(rounds=2), np.random.default_rng(6), message_sink=sink)
        assert len(messages) == 4
        shared_names = set(clients[0].partition.shared)
        for _, _, names, blob in messages:
            assert names == shared_names
            assert not any(name.startswith("fp.") for name in names)
            assert b"fp." not in blob
            for raw in sample_bytes:
                assert raw not in blob


def test_fedavg_partition_trains_all_parameters():
    clients = make_clients(k=2, seed=26, all_shared=True)
    cfg = small_config(
        rounds=1,
        force_lambda=1.0,
        weights=LossWeights(alpha=0.0, beta=1.0, gamma=0.0),
    )
    before = params_bytes(clients)
    result = client_round(clients[0], clients[0].shared_snapshot(), cfg)
    assert set(result.shared_update) == set(clients[0].model.params)
    run_federation(clients, cfg, np.random.default_rng(7))
    assert params_bytes(clients) != before
