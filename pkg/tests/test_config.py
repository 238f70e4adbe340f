import pytest

from morphsim.config import load_config, parse_config
from morphsim.engine import GiB, ConfigError
from morphsim.toymodel import Precision


def test_defaults_derive_static_capacity():
    cfg = load_config()
    assert cfg.kv.block_bytes == 8 * 1024 ** 2
    assert cfg.kv.static_capacity_blocks == (22 * GiB - 32 * int(0.4 * GiB)) // cfg.kv.block_bytes
    assert cfg.profiler.num_layers == 32


def test_ini_roundtrip_preserves_fingerprint():
    cfg = parse_config("[model]\nnum_layers = 16\n[controller.performance]\nswap_step = 1\n[run]\nseed = 9\n")
    again = parse_config(cfg.to_ini())
    assert again == cfg
    assert again.fingerprint() == cfg.fingerprint()


def test_fingerprint_changes_with_settings():
    assert load_config(seed=1).fingerprint() != load_config(seed=2).fingerprint()
    assert load_config().fingerprint() == load_config().fingerprint()


def test_overrides_apply():
    cfg = load_config(seed=5, downscale=1.75)
    assert cfg.seed == 5 and cfg.downscale == 1.75


def test_shared_controller_keys_reach_both_modes():
    cfg = parse_config("[controller]\nhold_ms = 250\ntarget_bits = 8\n")
    assert cfg.accuracy.hold_ms == cfg.performance.hold_ms == 250
    assert cfg.policy("static-quant").bits == 8


def test_layer_sizes_and_costs_from_file():
    cfg = parse_config("[model]\nq4_gib = 0.125\n[cost]\ndecode_ms_q4 = 0.5\npcie_gib_per_s = 13\n")
    assert cfg.model.size(Precision.Q4) == int(0.125 * GiB)
    assert cfg.cost.decode_ms_per_layer[Precision.Q4] == 0.5
    assert cfg.cost.pcie_gib_per_s == 13


@pytest.mark.parametrize("text, fragment", [
    ("[bogus]\nx = 1\n", "unknown config section"),
    ("[model]\nlayers = 3\n", "unknown key"),
    ("[model]\nnum_layers = three\n", "not a valid int"),
    ("[kv]\nstatic_capacity_blocks = 100000\n", "device budget"),
    ("[controller.accuracy]\nmax_swapped_layers = 20\n", "accuracy mode may not"),
    ("[controller.accuracy]\ntheta_kv = 0.75\n", "theta_kv"),
    ("[profiler]\nalpha1 = 0\nalpha2 = 0\nbeta = 0\n", "not all zero"),
    ("[workload]\nburst_start_ms = 50000\n", "burst window"),
    ("[run]\nslo_ms = 0\n", "positive"),
    ("[workload]\nsource = file\n", "workload.path"),
    ("not an ini", "syntax"),
])
def test_validation_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_unknown_arm():
    with pytest.raises(ConfigError):
        load_config().policy("morph-chaos")


def test_trace_from_file_and_downscale(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("0,8,4\n10,8,4\n20,8,4\n")
    cfg = parse_config(f"[workload]\nsource = file\npath = {p}\n[run]\ndownscale = 4.75\n")
    assert cfg.trace().arrivals == [0, 48, 95]


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.ini")
