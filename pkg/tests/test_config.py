import json

import pytest

from cellsched.config import ConfigError, build_workload, load_config, parse_config
from cellsched.scheduler import Policy


def write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_defaults_use_bundled_cluster(default_cfg):
    assert default_cfg.seed == 0
    assert default_cfg.scheduler.policy is Policy.CRIUS
    assert set(default_cfg.cluster.gpu_types) >= {"A100", "V100"}


def test_desk_config(desk_cfg):
    assert {t: desk_cfg.cluster.group(t).capacity for t in desk_cfg.cluster.gpu_types} == {"A40": 32, "A10": 32}
    assert desk_cfg.workload.job_count == 200
    assert desk_cfg.output_dir == "out/desk"


@pytest.mark.parametrize("data, where", [
    ({"sed": 1}, "top level"),
    ({"scheduler": {"depth": 3}}, "scheduler"),
    ({"workload": {"jobs": 3}}, "workload"),
    ({"costmodel": {"alpha": 0.9}}, "costmodel"),
])
def test_unknown_keys_rejected(data, where):
    with pytest.raises(ConfigError, match=where):
        parse_config(data)


@pytest.mark.parametrize("data", [
    {"scheduler": {"policy": "lifo"}},
    {"scheduler": {"search_depth": 0}},
    {"workload": {"model_mix": {"GPT": 1.0}}},
    {"workload": {"gpu_type_weights": {"H100": 1.0}}},
    {"workload": {"format": "yaml"}},
    {"seed": "zero"},
    {"cluster_preset": "huge"},
    {"cluster_preset": "default", "cluster": {}},
])
def test_invalid_values_rejected(data):
    with pytest.raises(ConfigError):
        parse_config(data)


def test_toml_syntax_error_reports_position(tmp_path):
    p = write(tmp_path, "seed = 1\n[scheduler\npolicy = 'crius'\n")
    with pytest.raises(ConfigError, match=r"line 2"):
        load_config(p)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")


def test_preset_and_overrides(tmp_path):
    p = write(tmp_path, 'cluster_preset = "default"\nseed = 4\n[scheduler]\npolicy = "fcfs"\n'
                        'search_depth = 2\n[workload]\ngpu_count_choices = [1, 2]\n')
    cfg = load_config(p)
    assert (cfg.seed, cfg.scheduler.policy, cfg.scheduler.search_depth) == (4, Policy.FCFS, 2)
    assert cfg.workload.gpu_count_choices == (1, 2)
    assert cfg.base_dir == tmp_path


def test_synthetic_workload_follows_seed():
    cfg = parse_config({"workload": {"job_count": 12}})
    a, b = build_workload(cfg), build_workload(cfg)
    assert len(a) == 12 and len({r.job_id for r in a}) == 12
    assert [(r.submit_time, r.model.name, r.requested_gpus) for r in a] == \
        [(r.submit_time, r.model.name, r.requested_gpus) for r in b]
    c = build_workload(cfg, seed=1)
    assert [r.submit_time for r in a] != [r.submit_time for r in c]


def test_gpu_type_weights_restrict_preference():
    cfg = parse_config({"workload": {"job_count": 20, "gpu_type_weights": {"V100": 1.0}}})
    assert {r.preferred_gpu_type for r in build_workload(cfg)} == {"V100"}


def test_trace_file_relative_to_config(tmp_path):
    rows = [{"job_id": "a", "submit_time_s": 0, "iterations": 10, "model_family": "BERT",
             "model_params_billion": 0.76, "global_batch": 512, "n_gpus": 2, "gpu_type": "A100"}]
    write(tmp_path, json.dumps(rows), "trace.json")
    cfg = load_config(write(tmp_path, '[workload]\ntrace = "trace.json"\n'))
    [rec] = build_workload(cfg)
    assert (rec.job_id, rec.requested_gpus, rec.preferred_gpu_type) == ("a", 2, "A100")
