import json

import numpy as np
import pytest

from regrasp import config as C
from regrasp.cli import main
from regrasp.diffnet import ParamVector, layout_for, load_snapshot, save_snapshot
from regrasp.bc import actor_spec
from regrasp.training import evaluate

TINY = """
# small enough to run in seconds
demos.count = 4
demos.failures = 4
classifier.epochs = 40
bc.epochs = 30
rl.E = 2
rl.N = 32
rl.hidden = 16,16
rl.env_steps = 200
rl.checkpoint_every = 100
dist.param_refresh_interval = 10
eval.trials = 5
"""


def test_config_defaults_and_overrides():
    cfg = C.parse_config("rl.beta = 0.5\nenv.reset_mode = fixed  # comment\n")
    assert cfg["rl.beta"] == 0.5 and cfg["env.reset_mode"] == "fixed"
    assert cfg["rl.E"] == 10 and cfg["rl.hidden"] == (64, 64) and cfg["eval.trials"] == 100
    assert C.parse_config(C.format_config(cfg)) == cfg


@pytest.mark.parametrize("text", ["rl.nope = 1", "rl.E = ten", "just words", "rl.use_bc_term = maybe"])
def test_config_rejects_bad_lines(text):
    with pytest.raises(C.ConfigError):
        C.parse_config(text)


def test_config_validation():
    cfg = C.parse_config("rl.Z = 3")
    with pytest.raises(C.ConfigError):
        C.validate(cfg)
    with pytest.raises(C.ConfigError):
        C.validate(C.parse_config("dist.mode = cluster"))


def test_always_timing_out_policy():
    spec = actor_spec()
    still = ParamVector(np.zeros(spec.n_params), layout_for(spec))
    r = evaluate(still, spec, trials=40)
    assert r.success_rate == 0.0 and r.mean_ct is None and r.summary()["mean_ct"] == "NA"
    assert len(r.records) == 40


def _only(path, pattern):
    found = sorted(path.glob(pattern))
    assert len(found) == 1, found
    return found[0]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    out = root / "runs"
    common = ["--config", str(cfg), "--out", str(out), "--seed", "3"]
    assert main(["gen-demos", *common]) == 0
    gen = _only(out, "gen-demos-*")
    assert main(["train-classifier", *common, "--demos", str(gen / "demos.bin"),
                 "--failures", str(gen / "failures.bin")]) == 0
    assert main(["pretrain", *common, "--demos", str(gen / "demos.bin")]) == 0
    pre = _only(out, "pretrain-*")
    clf = _only(out, "train-classifier-*")
    assert main(["finetune", *common, "--demos", str(gen / "demos.bin"), "--actor", str(pre / "actor_bc.bin"),
                 "--classifier", str(clf / "classifier.bin")]) == 0
    return root, out, common, gen, pre, clf


def test_run_directories_are_complete(pipeline):
    _, out, _, gen, pre, clf = pipeline
    ft = _only(out, "finetune-*")
    for d in (gen, pre, clf, ft):
        assert (d / "config.txt").exists() and (d / "seed.txt").exists()
        assert "seed = 3" in (d / "seed.txt").read_text()
    assert (ft / "metrics.csv").read_text().splitlines()[0] == \
        "update_count,critic_loss_mean,actor_Q_term,entropy_term,bc_term,lambda,env_steps"
    assert sorted(p.name for p in (ft / "checkpoints").iterdir()) == ["ckpt_0000100.bin", "ckpt_0000200.bin"]
    _, trailer = load_snapshot(pre / "actor_bc.bin")
    assert trailer == b"pretrained"
    assert clf.joinpath("classifier_metrics.csv").read_text().startswith("accuracy,fpr,fnr,n_train,n_test")


def test_resume_matches_uninterrupted(pipeline):
    _, out, common, gen, pre, clf = pipeline
    ft = _only(out, "finetune-*")
    resumed_out = out / "resumed"
    args = ["finetune", "--config", common[1], "--out", str(resumed_out), "--seed", "3",
            "--classifier", str(clf / "classifier.bin"), "--env-steps", "100",
            "--resume", str(ft / "checkpoints" / "ckpt_0000100.bin")]
    assert main(args) == 0
    again = _only(resumed_out, "finetune-*")
    a, _ = load_snapshot(ft / "actor_final.bin")
    b, _ = load_snapshot(again / "actor_final.bin")
    assert a.values.tobytes() == b.values.tobytes()


def test_eval_and_plot(pipeline):
    _, out, common, _, pre, _ = pipeline
    assert main(["eval", *common, "--actor", str(pre / "actor_bc.bin"), "--trials", "40", "--label", "bc"]) == 0
    report = json.loads(_only(out, "eval-*").joinpath("eval.json").read_text())
    assert report["trials"] == 40 and "success_rate" in report and "mean_ct" in report
    ft = _only(out, "finetune-*")
    assert main(["plot", "--out", str(out), "--metrics", str(ft / "metrics.csv"),
                 "--eval", str(_only(out, "eval-*") / "eval.json")]) == 0
    plots = _only(out, "plot-*")
    assert (plots / "lambda_sr.png").stat().st_size > 0 and (plots / "eval_bars.png").stat().st_size > 0


def test_exit_codes(tmp_path):
    assert main(["no-such-command"]) == 1
    assert main(["eval", "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("rl.bogus = 1\n")
    assert main(["gen-demos", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert main(["eval", "--out", str(tmp_path), "--actor", str(tmp_path / "missing.bin")]) == 2
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"garbage")
    assert main(["eval", "--out", str(tmp_path), "--actor", str(junk)]) == 2


def test_distributed_mode_runs(pipeline, tmp_path):
    _, _, common, gen, pre, _ = pipeline
    args = ["finetune", "--config", common[1], "--out", str(tmp_path), "--seed", "3", "--mode", "distributed",
            "--reward", "oracle", "--env-steps", "60", "--demos", str(gen / "demos.bin"),
            "--actor", str(pre / "actor_bc.bin")]
    assert main(args) == 0
    ft = _only(tmp_path, "finetune-*")
    assert (ft / "checkpoints" / "final.bin").exists()
    rows = (ft / "metrics.csv").read_text().splitlines()
    assert len(rows) > 1
