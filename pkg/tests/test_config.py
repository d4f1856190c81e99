from pathlib import Path

import pytest

from offloadsim.config import parse_config, parse_config_text, parse_size
from offloadsim.model import ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

MINIMAL = """
[model]
num_layers = 4
hidden_dim = 1024
num_heads = 8
seq_len = 512

[machine]
gpu_mem = 80GiB
cpu_usable_dram = 400GB
pcie_h2d_bw = 20GB/s
pcie_d2h_bw = 20GB/s
ssd_read_bw = 3GB/s
ssd_write_bw = 3GB/s
fwd_compute_time_per_layer_per_mb = 0.01
bwd_compute_time_per_layer_per_mb = 0.03
cpu_step_throughput = 2e9
"""


def test_minimal_config_gets_defaults():
    cfg = parse_config_text(MINIMAL)
    assert cfg.model.microbatch_size == 1
    assert cfg.model.data_parallel_degree == cfg.machine.num_gpus == 1
    assert cfg.schedule.variant == "vertical"
    assert cfg.schedule.microbatches is None and cfg.schedule.split is None
    assert cfg.output_format == "json" and cfg.output_path is None
    assert cfg.machine.gpu_mem_bytes == 80 * 2**30
    assert cfg.machine.ssd_read_bw == 3e9


def test_bundled_gpt65b_config():
    cfg = parse_config(CONFIGS / "gpt65b-a100.example")
    assert (cfg.model.num_layers, cfg.model.num_heads, cfg.model.hidden_dim) == (80, 64, 8192)
    assert cfg.model.seq_len == 2048


@pytest.mark.parametrize("name", ["gpt65b-a100", "scaled-a100", "scaled-duplex-ssd", "scaled-2gpu"])
def test_bundled_configs_parse(name):
    cfg = parse_config(CONFIGS / f"{name}.example")
    assert cfg.model.data_parallel_degree == cfg.machine.num_gpus


@pytest.mark.parametrize("text,value", [
    ("4096", 4096), ("1KB", 1000), ("1KiB", 1024), ("2.5GB", 2.5e9), ("1GiB/s", 2**30),
    ("3e9", 3e9), ("1tib", 2**40),
])
def test_parse_size(text, value):
    assert parse_size(text) == value


@pytest.mark.parametrize("text", ["fast", "3 parsecs", "", "-1GB"])
def test_parse_size_rejects(text):
    with pytest.raises(ConfigError):
        parse_size(text)


def _with(extra, section="schedule"):
    if f"[{section}]" in MINIMAL:
        return MINIMAL.replace(f"[{section}]\n", f"[{section}]\n{extra}\n")
    return MINIMAL + f"\n[{section}]\n{extra}\n"


def test_out_of_range_fraction_names_field():
    with pytest.raises(ConfigError, match="x_ckpt"):
        parse_config_text(_with("x_ckpt = 1.5"))


def test_schedule_section():
    cfg = parse_config_text(_with("schedule = horizontal\nmicrobatches = 6\nsplit = 0.5, 1, 0"))
    assert cfg.schedule.variant == "horizontal"
    assert cfg.schedule.microbatches == 6
    assert cfg.schedule.split.as_tuple() == (0.5, 1.0, 0.0)


@pytest.mark.parametrize("extra,field", [
    ("microbatches = two", "microbatches"),
    ("microbatches = 0", "microbatches"),
    ("alpha = 2", "alpha"),
    ("schedule = diagonal", "schedule"),
    ("extra_ckpt = maybe", "extra_ckpt"),
    ("colour = blue", "colour"),
])
def test_bad_schedule_fields(extra, field):
    with pytest.raises(ConfigError, match=field):
        parse_config_text(_with(extra))


def test_missing_machine_field_is_named():
    text = MINIMAL.replace("cpu_step_throughput = 2e9\n", "")
    with pytest.raises(ConfigError, match="cpu_step_throughput"):
        parse_config_text(text)


def test_bad_model_integer_names_type():
    with pytest.raises(ConfigError, match="hidden_dim: expected an integer"):
        parse_config_text(MINIMAL.replace("hidden_dim = 1024", "hidden_dim = 10.5"))


def test_data_parallel_must_match_gpus():
    with pytest.raises(ConfigError, match="data_parallel_degree"):
        parse_config_text(_with("data_parallel_degree = 2", "model"))


def test_unknown_preset():
    with pytest.raises(ConfigError, match="preset"):
        parse_config_text(_with("preset = gpt9000", "model"))


def test_missing_sections_and_files(tmp_path):
    with pytest.raises(ConfigError, match=r"\[machine\]"):
        parse_config_text("[model]\npreset = gpt65b\n")
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "nope.ini")


def test_output_section():
    cfg = parse_config_text(MINIMAL + "\n[output]\nformat = csv\npath = out.csv\n")
    assert cfg.output_format == "csv" and cfg.output_path == "out.csv"
    with pytest.raises(ConfigError, match="format"):
        parse_config_text(MINIMAL + "\n[output]\nformat = xml\n")
