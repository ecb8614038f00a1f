import json

import numpy as np
import pytest
from scipy.stats import spearmanr

from rgdm.checkpoint import load_checkpoint
from rgdm.cli import main
from rgdm.config import ConfigError, from_dict
from rgdm.data import Dataset, load_dataset, save_dataset
from rgdm.diffusion import ddpm_loss_and_grad
from rgdm.metrics import chamfer, emd
from rgdm.train import initial_checkpoint

TINY = {
    "data": {"n_samples": 40, "points_per_cloud": 16},
    "schedule": {"kind": "linear", "T": 20, "beta_1": 1e-3, "beta_T": 0.1},
    "model": {"layer_dims": [2, 16, 2]},
    "train": {"batch_size": 8, "pretrain_steps": 30, "finetune_steps": 10, "eval_every": 5, "eval_clouds": 4},
    "reward": {"proposals": 20},
    "sample": {"n_samples": 6, "n_points": 16},
}


def write_config(tmp_path, overrides=None, name="cfg.json"):
    cfg = json.loads(json.dumps(TINY))
    for section, values in (overrides or {}).items():
        if isinstance(values, dict):
            cfg.setdefault(section, {}).update(values)
        else:
            cfg[section] = values
    cfg.setdefault("out", str(tmp_path / "run"))
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def read_log(path):
    lines = path.read_text().splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, l.split("\t"))) for l in lines[1:]]


@pytest.fixture
def pretrained(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["--config", cfg, "make-data"]) == 0
    assert main(["--config", cfg, "pretrain"]) == 0
    return cfg, tmp_path / "run"


def test_make_data_writes_dataset(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["--config", cfg, "make-data"]) == 0
    ds = load_dataset(tmp_path / "run" / "data")
    assert len(ds) == 40
    assert "label 0" in capsys.readouterr().out


def test_unknown_generator_names_the_field(tmp_path, capsys):
    cfg = write_config(tmp_path, {"data": {"kind": "spirals"}})
    assert main(["--config", cfg, "make-data"]) == 2
    assert "data.kind" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_unknown_key_is_a_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path, {"train": {"learning_rate": 0.1}})
    assert main(["--config", cfg, "pretrain"]) == 2
    assert "train.learning_rate" in capsys.readouterr().err


def test_unwritable_output_is_an_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = write_config(tmp_path, {"out": str(blocker / "sub")})
    assert main(["--config", cfg, "make-data"]) == 1


def test_pretrain_zero_steps_is_init(tmp_path):
    cfg = write_config(tmp_path, {"train": {"pretrain_steps": 0}})
    main(["--config", cfg, "make-data"])
    assert main(["--config", cfg, "pretrain"]) == 0
    ck = load_checkpoint(tmp_path / "run" / "pretrained.ckpt")
    run = from_dict(json.loads(open(cfg).read()))
    assert ck.params.tobytes() == initial_checkpoint(run.train).params.tobytes()


def test_pretrain_smoke_loss_goes_down(tmp_path):
    cfg = write_config(tmp_path, {"train": {"pretrain_steps": 300, "batch_size": 16}, "model": {"layer_dims": [2, 32, 2]}})
    main(["--config", cfg, "make-data"])
    assert main(["--config", cfg, "pretrain"]) == 0
    rows = read_log(tmp_path / "run" / "pretrain_log.tsv")
    assert len(rows) == 300 and all(np.isfinite(float(r["loss"])) for r in rows)
    # single-batch losses swing with the 1/(2 eta_t) weight of the drawn t, so score
    # the first and last parameters on one fixed batch instead
    run = from_dict(json.loads(open(cfg).read()))
    final = load_checkpoint(tmp_path / "run" / "pretrained.ckpt")
    sched = final.noise_schedule()
    X0 = np.stack(load_dataset(tmp_path / "run" / "data").clouds)
    rng = np.random.default_rng(0)
    t = rng.integers(1, sched.T + 1, size=len(X0))
    eps = rng.standard_normal(X0.shape)
    before = ddpm_loss_and_grad(initial_checkpoint(run.train).estimator(), X0, t, eps, sched)[0].sum()
    after = ddpm_loss_and_grad(final.estimator(), X0, t, eps, sched)[0].sum()
    assert after < before


def test_pretrain_corrupt_manifest(tmp_path):
    cfg = write_config(tmp_path)
    main(["--config", cfg, "make-data"])
    (tmp_path / "run" / "data" / "manifest.json").write_text("{")
    assert main(["--config", cfg, "pretrain"]) == 2


def test_pretrain_without_dataset(tmp_path):
    assert main(["--config", write_config(tmp_path), "pretrain"]) == 2


def test_finetune_constant_reward_logs_equal_rewards(pretrained):
    cfg, run = pretrained
    tmp = run.parent
    cfg2 = write_config(tmp, {"reward": {"name": "zero", "params": {}, "solver": "none"}}, "zero.json")
    assert main(["--config", cfg2, "finetune", "--checkpoint", str(run / "pretrained.ckpt")]) == 0
    rows = read_log(run / "finetune_log.tsv")
    assert len(rows) == 10 and {r["mean_reward"] for r in rows} == {"0.0"}
    ft = load_checkpoint(run / "finetuned.ckpt")
    assert ft.meta["finetune_steps"] == 10 and ft.meta["reward"]["name"] == "zero"


@pytest.mark.parametrize("override", [{"model": {"layer_dims": [2, 8, 2]}}, {"model": {"context": "time+centroid"}}])
def test_finetune_topology_mismatch(pretrained, override):
    cfg, run = pretrained
    cfg2 = write_config(run.parent, override, "other.json")
    assert main(["--config", cfg2, "finetune", "--checkpoint", str(run / "pretrained.ckpt")]) == 4


def test_finetune_missing_checkpoint(pretrained):
    cfg, run = pretrained
    assert main(["--config", cfg, "finetune", "--checkpoint", str(run / "nope.ckpt")]) == 4


def test_training_failure_exit_code(tmp_path):
    cfg = write_config(tmp_path)
    ds = Dataset([np.full((4, 2), np.nan)] * 3, [0, 0, 0], 2)
    save_dataset(ds, tmp_path / "run" / "data")
    assert main(["--config", cfg, "pretrain"]) == 3


def test_sample_is_deterministic(pretrained):
    cfg, run = pretrained
    ck = str(run / "pretrained.ckpt")
    assert main(["--config", cfg, "--out", str(run / "s1"), "sample", "--checkpoint", ck]) == 0
    assert main(["--config", cfg, "--out", str(run / "s2"), "sample", "--checkpoint", ck]) == 0
    files = sorted(p.name for p in (run / "s1").iterdir())
    assert len(files) == 7
    for name in files:
        assert (run / "s1" / name).read_bytes() == (run / "s2" / name).read_bytes()
    assert set(load_dataset(run / "s1").labels) == {-1}


def test_sample_zero(pretrained):
    cfg, run = pretrained
    assert main(["--config", cfg, "--out", str(run / "s0"), "sample", "--checkpoint", str(run / "pretrained.ckpt"), "--n-samples", "0"]) == 0
    assert len(load_dataset(run / "s0")) == 0


def test_sample_truncated_checkpoint(pretrained):
    cfg, run = pretrained
    ck = run / "pretrained.ckpt"
    ck.write_bytes(ck.read_bytes()[:-3])
    assert main(["--config", cfg, "--out", str(run / "s"), "sample", "--checkpoint", str(ck)]) == 4


def test_eval_self_comparison(tmp_path):
    rng = np.random.default_rng(0)
    save_dataset(Dataset([rng.standard_normal((8, 2)) for _ in range(4)], [0] * 4, 2), tmp_path / "d")
    assert main(["eval", "--gen", str(tmp_path / "d"), "--ref", str(tmp_path / "d"), "--grid-res", "8"]) == 0
    rows = dict(l.split("\t") for l in (tmp_path / "d" / "metrics.tsv").read_text().splitlines()[1:])
    assert float(rows["MMD-CD"]) == 0.0 and float(rows["MMD-EMD"]) == 0.0
    assert float(rows["COV-CD"]) == 1.0 and float(rows["COV-EMD"]) == 1.0 and float(rows["JSD"]) == 0.0
    assert (tmp_path / "d" / "matches.csv").read_text().startswith("gen_index,ref_CD,dist_CD,ref_EMD,dist_EMD")


def test_eval_two_sample_toy_sets(tmp_path):
    A = np.array([[-1.0, -1.0], [1.0, 1.0], [0.0, 0.5]])
    B = np.array([[-1.0, 1.0], [1.0, -1.0], [0.5, 0.0]])
    C = np.array([[-1.0, -1.0], [1.0, 1.0], [0.2, 0.5]])
    save_dataset(Dataset([A], [0], 2), tmp_path / "g")
    save_dataset(Dataset([B, C], [0, 0], 2), tmp_path / "r")
    assert main(["--out", str(tmp_path / "o"), "eval", "--gen", str(tmp_path / "g"), "--ref", str(tmp_path / "r")]) == 0
    rows = dict(l.split("\t") for l in (tmp_path / "o" / "metrics.tsv").read_text().splitlines()[1:])
    # all three clouds already span [-1, 1]^2, so normalization leaves them unchanged
    assert float(rows["MMD-CD"]) == pytest.approx((chamfer(A, B) + chamfer(A, C)) / 2, abs=1e-12)
    assert float(rows["MMD-EMD"]) == pytest.approx((emd(A, B) + emd(A, C)) / 2, abs=1e-12)
    assert float(rows["COV-CD"]) == 0.5


def test_eval_size_mismatch_names_pair(tmp_path, capsys):
    rng = np.random.default_rng(1)
    save_dataset(Dataset([rng.standard_normal((5, 2))], [0], 2), tmp_path / "g")
    save_dataset(Dataset([rng.standard_normal((5, 2)), rng.standard_normal((6, 2))], [0, 0], 2), tmp_path / "r")
    assert main(["eval", "--gen", str(tmp_path / "g"), "--ref", str(tmp_path / "r")]) == 5
    assert "gen[0] vs ref[1]" in capsys.readouterr().err


def test_eval_malformed_input(tmp_path):
    (tmp_path / "g").mkdir()
    assert main(["eval", "--gen", str(tmp_path / "g"), "--ref", str(tmp_path / "g")]) == 2


def test_eval_bad_distance_flag(tmp_path):
    save_dataset(Dataset([np.eye(2)], [0], 2), tmp_path / "d")
    assert main(["eval", "--gen", str(tmp_path / "d"), "--ref", str(tmp_path / "d"), "--distances", "HD"]) == 2


def test_bad_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("RGDM_THREADS", "many")
    assert main(["--config", write_config(tmp_path), "make-data"]) == 2


def test_threads_flag(tmp_path):
    assert main(["--threads", "1", "--config", write_config(tmp_path), "make-data"]) == 0


@pytest.mark.parametrize(
    "user,key",
    [
        ({"seed": -1}, "seed"),
        ({"schedule": {"kind": "sigmoid"}}, "schedule"),
        ({"model": {"layer_dims": [2, 8, 3]}}, "model.layer_dims"),
        ({"model": {"context": "space"}}, "model.context"),
        ({"reward": {"name": "qed"}}, "reward.name"),
        ({"reward": {"name": "region_indicator", "params": {"low": [0, 0]}}}, "reward.params.high"),
        ({"reward": {"name": "region_indicator", "params": {"low": [0, 0], "high": [1, 1]}}}, "reward"),
        ({"eval": {"grid_res": 1}}, "eval.grid_res"),
        ({"data": {"balanced": "yes"}}, "data.balanced"),
    ],
)
def test_config_errors_name_the_key(user, key):
    with pytest.raises(ConfigError) as info:
        from_dict(user)
    assert info.value.key == key


def test_halfplane_finetune_log_trends_up(tmp_path):
    cfg = write_config(
        tmp_path,
        {
            "data": {"n_samples": 200, "points_per_cloud": 32, "balanced": True},
            "model": {"layer_dims": [2, 32, 32, 2]},
            "train": {
                "batch_size": 32,
                "finetune_batch_size": 16,
                "pretrain_steps": 400,
                "finetune_steps": 60,
                "eval_every": 6,
                "eval_clouds": 16,
            },
        },
    )
    main(["--config", cfg, "make-data"])
    main(["--config", cfg, "pretrain"])
    assert main(["--config", cfg, "finetune", "--checkpoint", str(tmp_path / "run" / "pretrained.ckpt")]) == 0
    rows = read_log(tmp_path / "run" / "finetune_log.tsv")
    curve = [(int(r["step"]), float(r["sample_reward"])) for r in rows if r["sample_reward"] != "nan"]
    assert len(curve) == 10
    rho = spearmanr([s for s, _ in curve], [v for _, v in curve]).correlation
    assert rho > 0.8
