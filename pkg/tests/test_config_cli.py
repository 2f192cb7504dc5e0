import hashlib
import json

import numpy as np
import pytest

from flatsplat.cli import EXIT_INVALID, EXIT_IO, EXIT_NUMERIC, EXIT_OK, OUTPUT_ROOT_ENV, main
from flatsplat.config import AblationSpec, RunConfig, with_mode, with_seed
from flatsplat.errors import ConfigError
from flatsplat.imageio import decode_ppm, encode_ppm, quantize, read_f64, read_ppm, write_f64
from conftest import small_config


# -- config -----------------------------------------------------------------


def test_default_config_matches_desk_benchmark():
    cfg = RunConfig()
    assert (cfg.scene.n_gt, cfg.cameras.count, cfg.cameras.resolution, cfg.n_blocks) == (64, 40, 64, 8)
    tc = cfg.train_config()
    assert (tc.n_workers, tc.period, tc.iterations, tc.momentum) == (4, 50, 2000, 0.9)
    assert (tc.lambda_ssim, tc.lambda_consistency) == (0.2, 50.0)


def test_config_round_trip_is_identity():
    cfg = small_config(momentum=0.5, mode="independent")
    again = RunConfig.from_json(cfg.to_json())
    assert again == cfg
    assert again.to_json() == cfg.to_json()


@pytest.mark.parametrize("doc", [
    {"bogus": {}},
    {"train": {"learning_rate": 1.0}},
    {"train": {"iterations": "many"}},
    {"train": {"iterations": 1.5}},
    {"train": {"shuffle": 1}},
    {"train": {"mode": "fancy"}},
    {"scene": {"n_gt": 0}},
    {"scene": {"domain": [0, 0, 1]}},
    {"cameras": {"layout": "spiral"}},
    {"partition": {"nx": 0}},
    {"weighting": {"sigma_w": 0.0}},
    {"output": {"checkpoint_every": 0}},
    {"version": 99},
    {"train": {"n_workers": 9}},
    {"train": {"mode": "single_block"}},
])
def test_config_rejects_invalid_documents(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc)


def test_invalid_json_is_config_error():
    with pytest.raises(ConfigError):
        RunConfig.from_json("{not json")


def test_ints_are_accepted_for_float_fields():
    cfg = RunConfig.from_dict({"train": {"momentum": 0}})
    assert cfg.train.momentum == 0.0 and isinstance(cfg.train.momentum, float)


def test_overrides_and_mode_helpers():
    cfg = RunConfig().with_overrides({"train.momentum": 0.99, "partition.rho": 0.2})
    assert cfg.train.momentum == 0.99 and cfg.partition.rho == 0.2
    with pytest.raises(ConfigError):
        cfg.with_overrides({"train": 1})
    sb = with_mode(cfg, "single_block")
    assert sb.n_blocks == 1 and sb.train.n_workers == 1
    s = with_seed(cfg, 11)
    assert s.scene.seed == 11 and s.train.seed == 11


def test_ablation_spec_validation():
    ok = AblationSpec.from_dict({"variants": {"a": {}, "b": {"train.momentum": 0.5}}, "seeds": [1, 2]})
    assert ok.metric == "psnr"
    assert [(n, s) for n, s, _ in ok.configs(RunConfig())] == [("a", 1), ("a", 2), ("b", 1), ("b", 2)]
    for bad in ({"variants": {"a": {}}, "seeds": [1, 2]},
                {"variants": {"a": {}, "b": {}}, "seeds": [1]},
                {"variants": {"a": {}, "b": {}}, "seeds": [1, 2], "metric": "lpips"},
                {"variants": {"a": {}, "b": {}}, "seeds": [1, 2], "extra": 1},
                {"seeds": [1, 2]}):
        with pytest.raises(ConfigError):
            AblationSpec.from_dict(bad)


# -- image files --------------------------------------------------------------


def test_quantize_rounds_half_to_even_and_clips():
    vals = np.array([-0.5, 0.0, 0.5 / 255, 1.5 / 255, 2.5 / 255, 1.0, 2.0])
    assert quantize(vals).tolist() == [0, 0, 0, 2, 2, 255, 255]


def test_ppm_round_trip():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    buf = encode_ppm(img)
    assert buf.startswith(b"P6\n7 5\n255\n")
    assert np.array_equal(decode_ppm(buf), img)
    with_comment = b"P6\n# note\n7 5\n255\n" + img.tobytes()
    assert np.array_equal(decode_ppm(with_comment), img)


def test_f64_sidecar_is_lossless(tmp_path):
    img = np.random.default_rng(1).uniform(size=(4, 6, 3))
    write_f64(tmp_path / "x.f64", img)
    back = read_f64(tmp_path / "x.f64", 6, 4)
    assert np.array_equal(back, img)


# -- CLI ----------------------------------------------------------------------


def _hashes(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def small_cfg_file(tmp_path):
    cfg = small_config(iterations=4)
    path = tmp_path / "small.json"
    cfg.save(path)
    return path


@pytest.fixture
def generated(tmp_path, small_cfg_file):
    out = tmp_path / "data"
    assert main(["generate", "--config", str(small_cfg_file), "--out", str(out)]) == EXIT_OK
    return out


def test_generate_default_config_writes_40_views(tmp_path):
    out = tmp_path / "default"
    assert main(["generate", "--out", str(out)]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    train = [e for e in manifest["images"] if e["split"] == "train"]
    assert len(train) == 40
    assert read_ppm(out / train[0]["ppm"]).shape == (64, 64, 3)
    assert len(manifest["blocks"]) == 8
    assert all(b["views"] for b in manifest["blocks"])


def test_generate_is_reproducible(tmp_path, small_cfg_file):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["generate", "--config", str(small_cfg_file), "--out", str(out)]) == EXIT_OK
    assert _hashes(a) == _hashes(b)


def test_generate_rejects_empty_scene_before_writing(tmp_path):
    out = tmp_path / "empty"
    assert main(["generate", "--out", str(out), "--set", "scene.n_gt=0"]) == EXIT_INVALID
    assert not out.exists()


def test_unknown_override_key_is_validation_error(tmp_path):
    assert main(["generate", "--out", str(tmp_path / "x"), "--set", "train.nope=1"]) == EXIT_INVALID


def test_missing_config_file_is_io_error(tmp_path):
    assert main(["generate", "--config", str(tmp_path / "absent.json")]) == EXIT_IO


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["generate", "--out", str(blocker / "sub")]) == EXIT_IO


def test_output_root_env_var(tmp_path, monkeypatch, small_cfg_file):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert main(["generate", "--config", str(small_cfg_file), "--out", "rel"]) == EXIT_OK
    assert (tmp_path / "root" / "rel" / "manifest.json").is_file()


def test_partition_lists_blocks(generated, capsys):
    assert main(["partition", "--out", str(generated)]) == EXIT_OK
    doc = json.loads((generated / "partition.json").read_text())
    assert len(doc["blocks"]) == 2
    assert "block 0" in capsys.readouterr().out


def test_train_zero_iterations_writes_initial_checkpoint(generated):
    assert main(["train", "--out", str(generated), "--iterations", "0"]) == EXIT_OK
    ck = sorted((generated / "checkpoints").glob("*.bin"))
    assert [p.name for p in ck] == ["ckpt_000000.bin"]


def test_train_resume_matches_uninterrupted(generated):
    assert main(["train", "--out", str(generated), "--run-name", "full"]) == EXIT_OK
    assert main(["train", "--out", str(generated), "--run-name", "part", "--iterations", "2"]) == EXIT_OK
    assert main(["train", "--out", str(generated), "--run-name", "part",
                 "--resume", str(generated / "part" / "checkpoints" / "ckpt_000002.bin")]) == EXIT_OK
    full = (generated / "full" / "checkpoints" / "ckpt_000004.bin").read_bytes()
    resumed = (generated / "part" / "checkpoints" / "ckpt_000004.bin").read_bytes()
    assert full == resumed
    assert (generated / "full" / "metrics.csv").read_bytes() == (generated / "part" / "metrics.csv").read_bytes()


def test_train_single_block_mode(generated):
    assert main(["train", "--out", str(generated), "--run-name", "sb", "--mode", "single_block"]) == EXIT_OK
    cfg = RunConfig.load(generated / "sb" / "train_config.json")
    assert cfg.n_blocks == 1 and cfg.train.mode == "single_block"


def test_train_numerical_failure_exit_code(generated, capsys):
    code = main(["train", "--out", str(generated), "--run-name", "nan", "--set", "train.lr_decoder=1e300"])
    assert code == EXIT_NUMERIC
    assert "block" in capsys.readouterr().err


def test_train_without_dataset_is_io_error(tmp_path):
    assert main(["train", "--out", str(tmp_path / "nothing")]) == EXIT_IO


def test_eval_ground_truth_is_perfect(generated):
    assert main(["eval", "--out", str(generated), "--ground-truth"]) == EXIT_OK
    rep = json.loads((generated / "eval_test.json").read_text())
    assert rep["mean"]["psnr"] == 60.0 and rep["mean"]["ssim"] == 1.0


def test_eval_render_merge_on_trained_run(generated, tmp_path):
    assert main(["train", "--out", str(generated)]) == EXIT_OK
    assert main(["eval", "--out", str(generated), "--split", "train"]) == EXIT_OK
    rep = json.loads((generated / "eval_train.json").read_text())
    assert np.isfinite(rep["mean"]["psnr"]) and rep["seam"]
    dest = tmp_path / "renders"
    assert main(["render", "--out", str(generated), "--dest", str(dest)]) == EXIT_OK
    assert len(list(dest.glob("*.ppm"))) == 4
    assert main(["merge", "--out", str(generated)]) == EXIT_OK
    merged = generated / "merged.bin"
    assert merged.read_bytes()[:8] == b"FSPLTCKP"
    # a merged checkpoint evaluates identically to the training checkpoint it came from
    assert main(["eval", "--out", str(generated), "--checkpoint", str(merged),
                 "--report", str(tmp_path / "m.json")]) == EXIT_OK
    assert main(["eval", "--out", str(generated), "--report", str(tmp_path / "t.json")]) == EXIT_OK
    m = json.loads((tmp_path / "m.json").read_text())
    t = json.loads((tmp_path / "t.json").read_text())
    assert m["mean"] == t["mean"]


def test_eval_missing_checkpoint_is_io_error(generated, capsys):
    assert main(["eval", "--out", str(generated), "--checkpoint", str(generated / "nope.bin")]) == EXIT_IO
    assert "nope.bin" in capsys.readouterr().err


def test_render_unknown_camera_is_validation_error(generated):
    assert main(["train", "--out", str(generated), "--iterations", "0"]) == EXIT_OK
    assert main(["render", "--out", str(generated), "--camera", "999"]) == EXIT_INVALID


def test_gradcheck_command_passes(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "pipeline" in out and "FAIL" not in out


def test_ablate_writes_table(tmp_path, small_cfg_file):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"variants": {"m0.5": {"train.momentum": 0.5}, "m0.9": {"train.momentum": 0.9}},
                                "seeds": [1, 2]}))
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(small_cfg_file), "--out", str(out), "--spec", str(spec),
                 "--iterations", "2"]) == EXIT_OK
    table = (out / "ablation" / "table.md").read_text().splitlines()
    assert len(table) == 4
    assert table[2].startswith("| m0.5 |") and "±" in table[2]
    res = json.loads((out / "ablation" / "results.json").read_text())
    assert set(res["results"]["m0.9"]) == {"1", "2"}


def test_ablate_rejects_single_variant(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"variants": {"a": {}}, "seeds": [1, 2]}))
    assert main(["ablate", "--out", str(tmp_path / "o"), "--spec", str(spec)]) == EXIT_INVALID
