import pytest

from actmsense.config import (ConfigError, FundamentalDiagram, HighwayConfig, HighwayTopology,
                              RampParams, TopologyTooSmallError, dumps_config,
                              generate_standard_topology, highway_a, highway_b, load_config,
                              loads_config, standard_highway)


@pytest.mark.parametrize("N, on, off, n", [
    (7, (2, 5), (3, 6), 11),
    (13, (2, 5, 8, 11), (3, 6, 9, 12), 21),
])
def test_standard_topology_examples(N, on, off, n):
    t = generate_standard_topology(N)
    assert t.onramps == on and t.offramps == off and t.n == n


def test_highway_sizes():
    a, b = highway_a(), highway_b()
    assert (a.n, a.m) == (21, 10)
    assert b.topology.N_I == 13 and b.topology.N_O == 13 and b.n == 66


def test_topology_too_small():
    with pytest.raises(TopologyTooSmallError):
        generate_standard_topology(3)
    with pytest.raises(TopologyTooSmallError):
        HighwayTopology(N=1, onramps=(), offramps=(), l=400, T=1)


@pytest.mark.parametrize("on, off", [((2,), (2,)), ((1,), ()), ((), (5,)), ((2, 2), ())])
def test_invalid_ramp_positions(on, off):
    with pytest.raises(ConfigError):
        HighwayTopology(N=5, onramps=on, offramps=off, l=400, T=1)


def test_cfl_and_ramp_parameter_checks():
    d = FundamentalDiagram(v_f=28.8889, w_c=6.6667, rho_c=0.0249, rho_m=0.1333)
    t = HighwayTopology(N=5, onramps=(2,), offramps=(3,), l=400, T=1)
    HighwayConfig(d, t, RampParams(beta={3: 0.2}, xi={2: 3.0}))
    with pytest.raises(ConfigError, match="CFL"):
        HighwayConfig(d, HighwayTopology(N=5, onramps=(2,), offramps=(3,), l=20, T=1),
                      RampParams(beta={3: 0.2}, xi={2: 3.0}))
    for beta, xi in (({3: 0.0}, {2: 3.0}), ({3: 1.0}, {2: 3.0}), ({3: 0.2}, {2: 0.0}),
                     ({3: 0.2}, {2: 7.0}), ({}, {2: 3.0})):
        with pytest.raises(ConfigError):
            HighwayConfig(d, t, RampParams(beta=beta, xi=xi))


def test_roundtrip_text(tmp_path):
    cfg = standard_highway(10, beta=0.3)
    text = dumps_config(cfg)
    assert loads_config(text) == cfg
    path = tmp_path / "hw.ini"
    path.write_text(text)
    assert load_config(path) == cfg


def test_pattern_key_and_defaults():
    cfg = loads_config("""
[diagram]
v_f = 28.8889
w_c = 6.6667
rho_c = 0.0249
rho_m = 0.1333
[topology]
N = 13
pattern = standard
[discretization]
l = 400
T = 1
""")
    assert cfg == highway_a()
    assert cfg.beta(3) == 0.2 and cfg.xi(2) == pytest.approx(0.5 * 6.6667)


def test_missing_section_is_config_error():
    with pytest.raises(ConfigError):
        loads_config("[diagram]\nv_f = 1\n")
