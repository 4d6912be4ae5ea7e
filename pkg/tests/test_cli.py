import csv
import hashlib

import pytest

from pixbis.cli import main
from pixbis.config import ConfigError, RunConfig
from pixbis.metrics import read_scores

SMALL = """\
# tiny corpus and model so every command runs in seconds
subjects = 4
frames = 4
image_size = 32
input_size = 32
stem_channels = 4
growth_rate = 2
block1_layers = 2
block2_layers = 2
batch_size = 8
epochs = 1
score_frames = 4
baseline_epochs = 50
"""


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL)
    b_cfg = root / "b.cfg"
    b_cfg.write_text(SMALL + "dataset_name = synthB\nstrength_replay_moire = 0.5\n")
    c = str(cfg)
    assert main(["generate", "--config", c, "--out", str(root / "A")]) == 0
    assert main(["generate", "--config", str(b_cfg), "--seed", "8", "--out", str(root / "B")]) == 0
    assert main(["train", "--config", c, "--data", str(root / "A"), "--out", str(root / "m")]) == 0
    for split in ("dev", "eval"):
        assert main(["score", "--config", c, "--model", str(root / "m/model.pixbis"), "--data", str(root / "A"),
                     "--split", split, "--out", str(root / "s")]) == 0
    return root, c


def test_generate_summary(run, capsys, tmp_path):
    root, c = run
    assert main(["generate", "--config", c, "--out", str(tmp_path / "again")]) == 0
    out = capsys.readouterr().out
    assert "pai categories: 4" in out
    first = (root / "A" / "manifest.csv").read_bytes()
    assert (tmp_path / "again" / "manifest.csv").read_bytes() == first


def test_train_writes_artifacts(run):
    root, _ = run
    assert (root / "m/model.pixbis").exists()
    rows = (root / "m/loss_log.csv").read_text().splitlines()
    assert len(rows) == 1 + 1  # header and one epoch


def test_seed_changes_checkpoint(run, tmp_path):
    root, c = run
    assert main(["train", "--config", c, "--seed", "99", "--data", str(root / "A"), "--out", str(tmp_path)]) == 0
    assert _digest(tmp_path / "model.pixbis") != _digest(root / "m/model.pixbis")


def test_score_rows_and_determinism(run, tmp_path):
    root, c = run
    frames = read_scores(root / "s/eval_frame_scores.csv")
    videos = read_scores(root / "s/eval_video_scores.csv")
    assert len(frames) == 4 * len(videos)
    assert main(["score", "--config", c, "--model", str(root / "m/model.pixbis"), "--data", str(root / "A"),
                 "--split", "eval", "--out", str(tmp_path), "--frames", "2"]) == 0
    assert len(read_scores(tmp_path / "eval_frame_scores.csv")) == 2 * len(videos)
    assert main(["score", "--config", c, "--model", str(root / "m/model.pixbis"), "--data", str(root / "A"),
                 "--split", "eval", "--out", str(tmp_path)]) == 0
    assert _digest(tmp_path / "eval_frame_scores.csv") == _digest(root / "s/eval_frame_scores.csv")


def test_evaluate_report_and_roc(run, capsys):
    root, c = run
    s = root / "s"
    assert main(["evaluate", "--dev", str(s / "dev_video_scores.csv"), "--eval", str(s / "eval_video_scores.csv"),
                 "--out", str(root / "r")]) == 0
    text = capsys.readouterr().out
    assert "acer: " in text and "hter: " in text
    vals = dict(csv.reader((root / "r/report.csv").open()))
    assert float(vals["acer"]) == (float(vals["apcer"]) + float(vals["bpcer"])) / 2
    distinct = {r.score for r in read_scores(s / "eval_video_scores.csv")}
    roc_rows = (root / "r/report_roc.csv").read_text().splitlines()
    assert len(roc_rows) - 1 == len(distinct) + 1


def test_eval_label_permutation_keeps_threshold(run, tmp_path):
    root, _ = run
    s = root / "s"
    rows = (s / "eval_video_scores.csv").read_text().splitlines()
    body = [r.split(",") for r in rows[1:]]
    labels = [(b[1], b[2]) for b in body][::-1]
    permuted = [f"{b[0]},{lab},{pai},{b[3]}" for b, (lab, pai) in zip(body, labels)]
    (tmp_path / "perm.csv").write_text("\n".join([rows[0], *permuted]) + "\n")
    for name, evl in (("a", s / "eval_video_scores.csv"), ("b", tmp_path / "perm.csv")):
        assert main(["evaluate", "--dev", str(s / "dev_video_scores.csv"), "--eval", str(evl),
                     "--out", str(tmp_path / name)]) == 0
    ta = dict(csv.reader((tmp_path / "a/report.csv").open()))["threshold"]
    tb = dict(csv.reader((tmp_path / "b/report.csv").open()))["threshold"]
    assert ta == tb


def test_cross_both_directions(run, capsys):
    root, c = run
    model = str(root / "m/model.pixbis")
    assert main(["cross", "--config", c, "--model", model, "--data-a", str(root / "A"), "--data-b", str(root / "B"),
                 "--out", str(root / "x")]) == 0
    out = capsys.readouterr().out
    assert "cross-dataset synth->synthB" in out and "trained on: synth" in out and "hter: " in out
    assert (root / "x/cross_synth_to_synthB.txt").exists()
    assert main(["cross", "--config", c, "--model", model, "--data-a", str(root / "B"), "--data-b", str(root / "A"),
                 "--out", str(root / "x")]) == 0
    assert (root / "x/cross_synthB_to_synth.txt").exists()
    # a model crossed onto its own corpus reproduces the intra numbers
    assert main(["cross", "--config", c, "--model", model, "--data-a", str(root / "A"), "--data-b", str(root / "A"),
                 "--out", str(root / "self")]) == 0
    assert main(["evaluate", "--dev", str(root / "s/dev_video_scores.csv"),
                 "--eval", str(root / "s/eval_video_scores.csv"), "--out", str(root / "intra")]) == 0
    intra = dict(csv.reader((root / "intra/report.csv").open()))
    self_cross = dict(csv.reader((root / "self/cross_synth_to_synth.csv").open()))
    assert intra == self_cross


def test_cross_target_threshold(run):
    root, c = run
    assert main(["cross", "--config", c, "--model", str(root / "m/model.pixbis"), "--data-b", str(root / "B"),
                 "--dev-source", "B", "--out", str(root / "xt")]) == 0
    assert "(target)" in (root / "xt/cross_A_to_synthB.txt").read_text()
    assert main(["cross", "--config", c, "--model", str(root / "m/model.pixbis"), "--data-b", str(root / "B"),
                 "--out", str(root / "xt")]) == 1


@pytest.mark.parametrize("kind", ["lbp", "iqm"])
def test_baseline_reports_share_schema(run, kind):
    root, c = run
    out = root / f"bl_{kind}"
    assert main(["baseline", "--config", c, "--kind", kind, "--data", str(root / "A"), "--out", str(out),
                 "--dump-features"]) == 0
    keys = [row[0] for row in csv.reader((out / "report.csv").open())]
    main(["evaluate", "--dev", str(root / "s/dev_video_scores.csv"), "--eval", str(root / "s/eval_video_scores.csv"),
          "--out", str(root / "cnn_report")])
    assert keys == [row[0] for row in csv.reader((root / "cnn_report/report.csv").open())]
    text = (out / "report.txt").read_text()
    assert ("reduced 18-measure surrogate" in text) == (kind == "iqm")
    assert (out / f"eval_{kind}_features.csv").exists()


def test_exit_codes(run, tmp_path, capsys):
    root, c = run
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--dev", "x.csv", "--out", str(tmp_path)])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = red\n")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "g")]) == 1
    assert "unknown config key" in capsys.readouterr().err
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "t")]) == 2
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and "missing" in err
    assert main(["evaluate", "--dev", str(root / "A/manifest.csv"), "--eval", str(root / "A/manifest.csv"),
                 "--out", str(tmp_path)]) == 2
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["generate", "--config", c, "--out", str(blocker / "sub")]) == 2
    assert str(blocker) in capsys.readouterr().err
    assert main(["score", "--config", c, "--model", str(root / "m/model.pixbis"), "--data", str(root / "A"),
                 "--split", "eval", "--frames", "0", "--out", str(tmp_path)]) == 1


def test_checkpoint_config_mismatch(run, tmp_path):
    root, c = run
    assert main(["score", "--config", c, "--model", str(root / "m/model.pixbis"),
                 "--data", str(root / "A"), "--split", "dev", "--out", str(tmp_path)]) == 0
    cfg = tmp_path / "other.cfg"
    cfg.write_text(SMALL.replace("growth_rate = 2", "growth_rate = 3"))
    assert main(["score", "--config", str(cfg), "--model", str(root / "m/model.pixbis"), "--data", str(root / "A"),
                 "--split", "dev", "--out", str(tmp_path)]) == 2


def test_run_config_parsing(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nlr = 0.01  # inline\n\nlambda=0.25\n")
    cfg = RunConfig.load(p, {"seed": 3})
    assert cfg.lr == 0.01 and cfg.lam == 0.25 and cfg.seed == 3
    assert cfg.model().lam == 0.25 and cfg.train().seed == 3
    assert "lr=0.01\n" in cfg.dump()
    p.write_text("lr\n")
    with pytest.raises(ConfigError, match=":1:"):
        RunConfig.load(p)
    p.write_text("epochs = many\n")
    with pytest.raises(ConfigError, match="bad value"):
        RunConfig.load(p)
    with pytest.raises(ConfigError):
        RunConfig.load(None, {"threshold_source": "C"})


def test_defaults_are_desk_reference():
    cfg = RunConfig()
    assert cfg.generator().subjects == 12 and cfg.generator().seed == 7 and cfg.generator().image_size == 64
    assert cfg.model().block_layers == (6, 12) and cfg.train().epochs == 20
