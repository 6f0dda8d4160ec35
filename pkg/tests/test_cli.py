import json

import pytest

from patchzero_lab.cli import canonical_config_json, config_from_dict, parse_config, run_command
from patchzero_lab.errors import ConfigSchemaError, ConfigSyntaxError, MissingArtifactError
from patchzero_lab.models import AttackFamily, RunConfig

TINY_DATA = {"data": {"image_size": 8, "n_train_per_class": 2, "n_val_per_class": 1, "n_test_per_class": 1}}


def write_config(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(payload if isinstance(payload, str) else json.dumps(payload))
    return path


def test_empty_config_gives_defaults(tmp_path):
    cfg = parse_config(write_config(tmp_path, {}))
    assert cfg.defense.eps_p == 0.5
    assert cfg.defense.k == 50.0
    assert cfg.defense.dilation_radius == 2
    assert cfg.train.lr == 1e-4
    assert cfg.train.classifier_lr == 3e-3
    assert cfg.train.classifier_epochs == 20
    assert cfg.data.n_train_per_class == 500
    assert cfg.attack.restarts == 3
    assert cfg.eval.patch_fractions == [0.02, 0.09]


def test_out_of_range_value_names_its_key_path(tmp_path):
    with pytest.raises(ConfigSchemaError) as info:
        parse_config(write_config(tmp_path, {"defense": {"eps_p": 1.5}}))
    assert info.value.key_path == "defense.eps_p"


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigSchemaError) as info:
        config_from_dict({"defense": {"epsp": 0.4}})
    assert info.value.key_path == "defense.epsp"
    with pytest.raises(ConfigSchemaError):
        config_from_dict([1, 2])


def test_syntax_error_reports_the_line(tmp_path):
    with pytest.raises(ConfigSyntaxError) as info:
        parse_config(write_config(tmp_path, '{\n  "seed": ,\n}'))
    assert info.value.line == 2


def test_missing_config_file(tmp_path):
    with pytest.raises(MissingArtifactError):
        parse_config(tmp_path / "absent.json")


def test_canonical_form_round_trips(tmp_path):
    cfg = config_from_dict({"seed": 7, "attack": {"family": "MCW", "iters": 20}})
    text = canonical_config_json(cfg)
    again = parse_config(write_config(tmp_path, text))
    assert again == cfg
    assert canonical_config_json(again) == text
    assert again.attack.family == AttackFamily.MCW


def test_unknown_subcommand_is_a_usage_error():
    assert run_command(["dance"]) == 2


def test_eval_without_artifacts_exits_with_usage_error(tmp_path):
    assert run_command(["eval", "--out", str(tmp_path / "run")]) == 2


def test_gen_data_is_reproducible_and_append_only(tmp_path):
    config = str(write_config(tmp_path, TINY_DATA))
    first, second = tmp_path / "a", tmp_path / "b"
    assert run_command(["gen-data", "--config", config, "--seed", "3", "--out", str(first)]) == 0
    assert run_command(["gen-data", "--config", config, "--seed", "3", "--out", str(second)]) == 0

    manifests = [json.loads((root / "gen-data" / "manifest.json").read_text()) for root in (first, second)]
    assert manifests[0]["digests"] == manifests[1]["digests"]
    assert set(manifests[0]["digests"]) == {"train", "val", "test"}
    assert manifests[0]["seed"] == 3
    assert RunConfig.model_validate(manifests[0]["config"]).train.seed == 3
    for name in ("train.npz", "val.npz", "test.npz"):
        assert (first / "gen-data" / name).exists()

    before = (first / "gen-data" / "manifest.json").read_text()
    assert run_command(["gen-data", "--config", config, "--seed", "4", "--out", str(first)]) == 2
    assert (first / "gen-data" / "manifest.json").read_text() == before


def test_attack_needs_a_trained_classifier(tmp_path):
    config = str(write_config(tmp_path, TINY_DATA))
    out = tmp_path / "run"
    assert run_command(["gen-data", "--config", config, "--out", str(out)]) == 0
    assert run_command(["attack", "--config", config, "--out", str(out), "--attack", "mapgd", "--grad-mode", "do"]) == 2
