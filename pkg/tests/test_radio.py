import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgedem.exceptions import EmptyAssignment, EmptyNetwork
from edgedem.radio import (NetworkInstance, RadioConfig, compute_sinr, generate_topology, link_table, path_loss_db,
                           rate_general, rate_single)
from edgedem.units import db_to_linear, dbm_to_watt, kb_to_bits, linear_to_db, watt_to_dbm

from oracles import sinr_loops

CFG = RadioConfig()


def test_path_loss_at_one_km_is_intercept():
    assert path_loss_db(1.0) == pytest.approx(128.1)


def test_path_loss_slope_per_decade():
    assert path_loss_db(0.1) == pytest.approx(128.1 - 37.6)
    assert path_loss_db(0.01) - path_loss_db(0.001) == pytest.approx(37.6)


def test_unit_round_trips():
    assert dbm_to_watt(30.0) == pytest.approx(1.0)
    assert watt_to_dbm(dbm_to_watt(23.0)) == pytest.approx(23.0)
    assert linear_to_db(db_to_linear(-17.3)) == pytest.approx(-17.3)
    assert kb_to_bits(1) == 8000


def test_resource_block_and_noise():
    assert CFG.rb_bandwidth == pytest.approx(180e3)
    # -174 dBm/Hz over 180 kHz
    assert watt_to_dbm(CFG.noise_power_w) == pytest.approx(-174 + 10 * np.log10(180e3))


def test_topology_counts_and_exclusion():
    net = generate_topology(CFG, 40, 4, seed=3)
    assert net.ue_positions.shape == (40, 2) and net.sbs_positions.shape == (4, 2)
    assert np.all(np.hypot(*net.ue_positions.T) <= CFG.network_radius_m + 1e-9)
    assert np.all(np.hypot(*net.ue_positions.T) >= CFG.ue_min_dist_m)
    assert np.all(net.distances() >= CFG.ue_min_dist_m)
    assert np.all(net.channel_gain > 0) and np.all(net.channel_gain <= 1)


def test_topology_deterministic_under_seed():
    a = generate_topology(CFG, 10, 3, seed=11)
    b = generate_topology(CFG, 10, 3, seed=11)
    c = generate_topology(CFG, 10, 3, seed=12)
    assert a.to_json() == b.to_json()
    assert a.to_json() != c.to_json()


def test_empty_network_rejected():
    with pytest.raises(EmptyNetwork):
        generate_topology(CFG, 0, 3, seed=0)
    with pytest.raises(EmptyNetwork):
        generate_topology(CFG, 3, 0, seed=0)


def test_gain_matches_path_loss_plus_shadowing():
    net = generate_topology(CFG, 20, 3, seed=5)
    loss = path_loss_db(net.distances() / 1000) + net.shadowing_db
    assert np.allclose(-linear_to_db(net.channel_gain), np.maximum(loss, 0.0))
    assert np.allclose(net.rsrp, CFG.tx_power_dbm + linear_to_db(net.channel_gain))


def test_shadowing_statistics():
    net = generate_topology(RadioConfig(shadowing_std_db=3.0), 400, 5, seed=1)
    sh = net.shadowing_db.ravel()
    assert abs(sh.mean()) < 0.1 * 3 + 3 * 3 / np.sqrt(sh.size)
    assert sh.std() == pytest.approx(3.0, rel=0.08)


def test_sinr_matches_loop_oracle():
    net = generate_topology(CFG, 15, 4, seed=9)
    got = compute_sinr(net, CFG).gamma
    want = sinr_loops(net.channel_gain, float(dbm_to_watt(CFG.tx_power_dbm)), CFG.noise_power_w)
    assert np.allclose(got, want, rtol=1e-12)


def test_single_sbs_sinr_is_snr():
    net = generate_topology(CFG, 5, 1, seed=2)
    gamma = compute_sinr(net, CFG).gamma
    snr = dbm_to_watt(CFG.tx_power_dbm) * net.channel_gain / CFG.noise_power_w
    assert np.allclose(gamma, snr)


def test_rate_single_zero_rbs_and_linear_in_rbs():
    net = generate_topology(CFG, 4, 2, seed=0)
    sinr = compute_sinr(net, CFG)
    assert rate_single(0, 0, 0, sinr, CFG) == 0.0
    r1 = rate_single(1, 1, 1, sinr, CFG)
    assert rate_single(1, 1, 3, sinr, CFG) == pytest.approx(3 * r1)
    assert r1 == pytest.approx(180e3 * np.log2(1 + sinr.gamma[1, 1]))


def test_rate_general_sums_over_sbs():
    net = generate_topology(CFG, 4, 3, seed=0)
    sinr = compute_sinr(net, CFG)
    r = rate_general(2, [0, 2], [0.5, 0.25], sinr, CFG)
    want = 15 * 180e3 * (0.5 * np.log2(1 + sinr.gamma[2, 0]) + 0.25 * np.log2(1 + sinr.gamma[2, 2]))
    assert r == pytest.approx(want)
    with pytest.raises(EmptyAssignment):
        rate_general(2, [], [], sinr, CFG)


def test_zeta_must_sum_to_total():
    assert list(RadioConfig(subbands_per_sbs=[10, 20]).zeta(2)) == [10, 20]
    with pytest.raises(ValueError):
        RadioConfig(subbands_per_sbs=[10, 10]).zeta(2)


def test_link_table_full_band_rate():
    net = generate_topology(CFG, 6, 2, seed=4)
    links = link_table(net, CFG)
    sinr = compute_sinr(net, CFG)
    assert np.allclose(links.rate_coeff, 2.7e6 * np.log2(1 + sinr.gamma))
    assert links.virtual_rate == pytest.approx(180e3 * np.log2(1 + np.median(sinr.gamma)))


def test_network_json_round_trip():
    net = generate_topology(CFG, 7, 2, seed=8)
    back = NetworkInstance.from_json(net.to_json())
    assert back.rng_seed == 8
    for name in ("sbs_positions", "ue_positions", "channel_gain", "rsrp", "shadowing_db"):
        assert np.array_equal(getattr(back, name), getattr(net, name))
    assert set(json.loads(net.to_json())) >= {"sbs_positions", "ue_positions", "channel_gain", "rsrp", "rng_seed"}


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(1, 6), st.integers(0, 10_000))
def test_sinr_positive_and_finite(n, s, seed):
    net = generate_topology(CFG, n, s, seed)
    gamma = compute_sinr(net, CFG).gamma
    assert np.all(np.isfinite(gamma)) and np.all(gamma > 0)
    # adding an interferer can only lower SINR
    if s > 1:
        sub = NetworkInstance(net.sbs_positions[:-1], net.ue_positions, net.channel_gain[:, :-1], net.rsrp[:, :-1], seed)
        assert np.all(compute_sinr(sub, CFG).gamma >= gamma[:, :-1] * (1 - 1e-12))
