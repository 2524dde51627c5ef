import dataclasses
import hashlib

import numpy as np
import pytest

from fedsim.engine import UplinkPackage, encode_params
from fedsim.fedserver import (
    evaluate,
    fedavg,
    fedavg_weights,
    initial_params,
    model_hash,
    run_simulation,
    sample_clients,
    simulate,
)
from fedsim.datahub import Dataset
from fedsim.rngkit import make_stream
from fedsim.tensornet import ModelParams, ModelSpec, model_layout

LAYOUT4 = (("w", (4,)),)
WITNESS_COUNTS = [197, 428, 277]
WITNESS_ROWS = [
    "af3f8c3e08bdebbe85056bbfb18977bf",
    "f564203fb354533fdc635a3e2501eb3e",
    "1eb0b23dd0c15e3f8fb7213f0f997ebf",
]


def _up(cid, values, count, layout=LAYOUT4):
    return UplinkPackage(cid, ModelParams(layout, np.asarray(values, dtype=np.float32)), count, 0.0)


def _witness():
    rows = [np.frombuffer(bytes.fromhex(h), dtype="<f4") for h in WITNESS_ROWS]
    return [_up(i, r, c) for i, (r, c) in enumerate(zip(rows, WITNESS_COUNTS))]


def test_sample_clients_properties(golden):
    assert sample_clients(42, 0, 100, 10) == golden["sample_clients_42_0_100_10"]
    assert sample_clients(42, 0, 100, 10) == sample_clients(42, 0, 100, 10)
    assert sample_clients(42, 1, 100, 10) != sample_clients(42, 0, 100, 10)
    assert sorted(sample_clients(1, 0, 7, 7)) == list(range(7))
    assert sample_clients(1, 0, 7, 0) == []
    with pytest.raises(ValueError):
        sample_clients(1, 0, 5, 6)


def test_fedavg_weights_sum():
    for seed in range(20):
        s = make_stream(seed)
        counts = [1 + s.bounded(1000) for _ in range(1 + s.bounded(30))]
        w = fedavg_weights(counts)
        assert w.dtype == np.float32
        assert abs(float(w.astype(np.float64).sum()) - 1.0) <= 2.0**-20


def test_fedavg_single_uplink_is_bit_exact():
    values = make_stream(3).gaussians(4).astype(np.float32)
    out = fedavg([_up(0, values, 37)], LAYOUT4)
    assert out.values.tobytes() == values.tobytes()


def test_fedavg_identical_uplinks_within_one_ulp():
    values = make_stream(4).gaussians(64).astype(np.float32)
    layout = (("w", (64,)),)
    out = fedavg([_up(i, values, c, layout) for i, c in enumerate([3, 5, 11, 2])], layout)
    assert np.all(np.abs(out.values - values) <= np.spacing(np.abs(values)))


def test_fedavg_equal_counts_is_mean():
    out = fedavg([_up(0, [1, 2, 3, 4], 10), _up(1, [3, 4, 5, 6], 10)], LAYOUT4)
    assert out.values.tolist() == [2, 3, 4, 5]


def test_fedavg_is_order_sensitive():
    forward_ = fedavg(_witness(), LAYOUT4)
    backward = fedavg(list(reversed(_witness())), LAYOUT4)
    assert forward_.values.tobytes() != backward.values.tobytes()
    assert np.allclose(forward_.values, backward.values, rtol=1e-6)
    assert fedavg(_witness(), LAYOUT4).same_bits(forward_)


def test_fedavg_rejects_bad_input():
    with pytest.raises(ValueError):
        fedavg([], LAYOUT4)
    with pytest.raises(ValueError):
        fedavg([_up(0, [1, 2], 1, (("v", (2,)),))], LAYOUT4)


def test_model_hash_is_sha256_of_canonical_bytes():
    params = ModelParams(LAYOUT4, np.array([1, 2, 3, 4], np.float32))
    assert model_hash(params) == hashlib.sha256(encode_params(params)).hexdigest()
    empty = ModelParams((), np.zeros(0, np.float32))
    assert model_hash(empty) == hashlib.sha256(b"BFL1" + b"\x00" * 4).hexdigest()


def test_model_hash_sees_every_bit():
    params = ModelParams(LAYOUT4, make_stream(5).uniforms(4).astype(np.float32))
    base = model_hash(params)
    bits = params.values.view(np.uint32)
    seen = {base}
    for i in range(4):
        for b in (0, 17, 31):
            flipped = bits.copy()
            flipped[i] ^= np.uint32(1 << b)
            seen.add(model_hash(ModelParams(LAYOUT4, flipped.view(np.float32))))
    assert len(seen) == 13
    # Same values, different layout: different hash.
    assert model_hash(ModelParams((("w", (2, 2)),), params.values)) != base


def test_evaluate_perfect_and_tie_rule():
    spec = ModelSpec("mlp", (1, 1, 2), 2, hidden=2)
    layout = model_layout(spec)
    params = ModelParams.zeros(layout)
    x = np.array([[[[1, 0]]], [[[0, 1]]]], np.float32)
    # All-zero logits tie everywhere; the lowest class wins.
    acc, loss = evaluate(spec, params, Dataset(x, np.array([0, 1]), 2))
    assert acc == 0.5 and loss == pytest.approx(np.log(2))
    params["fc1.weight"][:] = np.eye(2) * 10
    params["fc2.weight"][:] = np.eye(2) * 10
    acc, loss = evaluate(spec, params, Dataset(x, np.array([0, 1]), 2), batch_size=1)
    assert acc == 1.0 and loss < 1e-6


def test_evaluate_batch_size_invariant_accuracy(small_cfg, small_workload):
    params = initial_params(small_cfg)
    a = evaluate(small_cfg.model, params, small_workload.test, 500)
    b = evaluate(small_cfg.model, params, small_workload.test, 7)
    assert a[0] == b[0] and a[1] == pytest.approx(b[1], rel=1e-12)


def test_simulation_golden(small_cfg, small_workload, golden):
    logs = run_simulation(small_cfg, small_workload)
    assert [log.model_hash for log in logs] == golden["small_config_hashes"]
    assert logs[0].test_accuracy == golden["small_config_round1_accuracy"]
    assert logs[0].test_loss.hex() == golden["small_config_round1_loss"]
    assert [log.round for log in logs] == [1, 2, 3]
    assert {log.config_fingerprint for log in logs} == {small_cfg.fingerprint()}


def test_simulation_independent_of_engine(small_cfg, small_workload, golden):
    for p, transport in ((1, "shared_memory"), (4, "serialized_channel")):
        cfg = small_cfg.with_engine(parallelism=p, transport=transport)
        assert [log.model_hash for log in run_simulation(cfg, small_workload)] == golden["small_config_hashes"]


def test_zero_rounds_keeps_initial_model(small_cfg, small_workload):
    cfg = dataclasses.replace(small_cfg, rounds=0)
    state = simulate(cfg, small_workload)
    assert state.history == [] and state.round == 0
    assert state.global_params.same_bits(initial_params(small_cfg))


def test_hooks_see_rounds_in_order(small_cfg, small_workload):
    starts, ups = [], []
    simulate(
        small_cfg,
        small_workload,
        on_round_start=lambda r, p: starts.append((r, model_hash(p))),
        on_uplinks=lambda r, u: ups.append((r, [x.client_id for x in u])),
    )
    assert [r for r, _ in starts] == [1, 2, 3]
    assert starts[0][1] == model_hash(initial_params(small_cfg))
    assert ups[0][1] == sample_clients(small_cfg.base_seed, 0, 20, 5)


def test_round_log_strip_timing(small_cfg, small_workload):
    log = run_simulation(small_cfg, small_workload)[0]
    assert '"wall_nanos"' in log.to_json()
    assert '"wall_nanos"' not in log.to_json(strip_timing=True)
