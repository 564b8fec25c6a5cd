import csv
import json

import numpy as np
import pytest

from vtadl import cli
from vtadl import data as D
from vtadl.metrics import global_score, heatmap_from_patch_scores, pr_auc, pro_curve, read_float_grid, roc_auc
from vtadl.trainer import Network, load_checkpoint, score_samples

MODEL = {"image_height": 32, "image_width": 32, "channels": 1, "patch_size": 8, "embed_dim": 8, "depth": 1,
         "num_heads": 2, "mixture_components": 2, "recon_dim": 16, "decoder_channels": [4, 4, 4, 4],
         "ssim_window": 5}
DATA = {"kind": "synthetic", "height": 32, "width": 32, "channels": 1, "n_train": 10, "n_test_normal": 3,
        "n_test_anomalous": 3, "defect_kinds": ["blob", "scratch"], "seed": 2}
TRAIN = {"epochs": 2, "batch_size": 4, "lr": 1e-3, "val_fraction": 0.3}


def synthetic():
    return D.generate_synthetic(D.SyntheticConfig(**{k: v for k, v in DATA.items() if k != "kind"}))


def write_json(path, doc):
    path.write_text(json.dumps(doc, indent=1))
    return path


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_json(root / "synth.json", {"model": MODEL, "train": TRAIN, "data": DATA})
    code = cli.main(["train", "--config", str(cfg), "--out", str(root / "run1"), "--seed", "7"])
    assert code == 0
    write_json(root / "data.json", DATA)
    return root


def test_train_outputs(run):
    out = run / "run1"
    assert (out / "ckpt.vtadl").exists()
    rows = list(csv.reader(open(out / "loss.csv")))
    assert rows[0] == ["epoch", "nll", "mse", "ssim", "total"]
    assert [r[0] for r in rows[1:]] == ["0", "1"]
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) == {"final_loss", "epochs", "wall_time_s"}
    assert summary["epochs"] == 2 and summary["final_loss"] == float(rows[-1][4])
    ck = load_checkpoint(out / "ckpt.vtadl")
    assert ck.epoch == 2 and ck.normalizer is not None and ck.rng_state["seed"] == 7


def test_same_seed_reproduces_loss_log(run):
    cli.main(["train", "--config", str(run / "synth.json"), "--out", str(run / "run2"), "--seed", "7"])
    assert (run / "run1" / "loss.csv").read_bytes() == (run / "run2" / "loss.csv").read_bytes()
    assert (run / "run1" / "ckpt.vtadl").read_bytes() == (run / "run2" / "ckpt.vtadl").read_bytes()


def test_malformed_json_reports_position(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "model": {,\n}')
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "line 2, column" in capsys.readouterr().err


def test_unknown_keys_are_config_errors(tmp_path):
    for doc in ({"model": MODEL, "data": DATA, "extra": 1}, {"model": {**MODEL, "depthh": 2}, "data": DATA},
                {"model": MODEL, "data": {**DATA, "kind": "mystery"}}):
        cfg = write_json(tmp_path / "c.json", doc)
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_dataset_errors_exit_2(tmp_path):
    spec = {"kind": "idx", "train_images": "missing.gz", "train_labels": "missing.gz",
            "test_images": "missing.gz", "test_labels": "missing.gz"}
    cfg = write_json(tmp_path / "c.json", {"model": MODEL, "data": spec})
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    # data that does not fit the model
    cfg = write_json(tmp_path / "d.json", {"model": MODEL, "data": {**DATA, "height": 64}})
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_numeric_failure_exit_3(tmp_path, monkeypatch):
    original = Network.loss

    def poisoned(self, images, noise_rng, training=True):
        loss, parts = original(self, images, noise_rng, training)
        parts.total = float("nan")
        return loss, parts

    monkeypatch.setattr(Network, "loss", poisoned)
    cfg = write_json(tmp_path / "c.json", {"model": MODEL, "train": TRAIN, "data": DATA})
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_eval_matches_library(run):
    out = run / "eval"
    assert cli.main(["eval", "--ckpt", str(run / "run1" / "ckpt.vtadl"), "--data", str(run / "data.json"),
                     "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())

    ck = load_checkpoint(run / "run1" / "ckpt.vtadl")
    _, test = synthetic()
    r = score_samples(ck.network(), test, ck.normalizer)
    heat = [heatmap_from_patch_scores(p, (4, 4), (32, 32)) for p in r["per_patch_nll"]]
    masked = [(h, s.mask) for h, s in zip(heat, test) if s.mask is not None]
    curve = pro_curve([h for h, _ in masked], [m for _, m in masked])
    labels = [s.label for s in test]
    assert metrics == {"n_images": 6, "pro_capped_auc": curve.capped_auc,
                       "roc_auc": roc_auc(r["score"], labels), "pr_auc": pr_auc(r["score"], labels)}
    rows = list(csv.reader(open(out / "pro_curve.csv")))
    assert rows[0] == ["fpr", "overlap"]
    np.testing.assert_array_equal(np.array(rows[1:], float), curve.points)
    assert 0 <= metrics["roc_auc"] <= 1


def test_eval_is_idempotent_and_metric_selection(run):
    args = ["eval", "--ckpt", str(run / "run1" / "ckpt.vtadl"), "--data", str(run / "data.json"), "--metric", "auc"]
    cli.main(args + ["--out", str(run / "e1")])
    cli.main(args + ["--out", str(run / "e2")])
    assert (run / "e1" / "metrics.json").read_bytes() == (run / "e2" / "metrics.json").read_bytes()
    assert set(json.loads((run / "e1" / "metrics.json").read_text())) == {"roc_auc", "n_images"}
    assert not (run / "e1" / "pro_curve.csv").exists()


def test_eval_perfect_heatmaps(run):
    _, test = synthetic()
    hdir = run / "oracle"
    hdir.mkdir()
    from vtadl.metrics import write_float_grid

    for i, s in enumerate(test):
        write_float_grid(hdir / f"{i:05d}.f32", s.mask.astype(np.float32))
    assert cli.main(["eval", "--heatmaps", str(hdir), "--data", str(run / "data.json"), "--out",
                     str(run / "e3"), "--metric", "pro"]) == 0
    assert json.loads((run / "e3" / "metrics.json").read_text())["pro_capped_auc"] == 1.0


def test_eval_config_disagreement_exit_2(run):
    spec = write_json(run / "big.json", {**DATA, "height": 64, "width": 64})
    assert cli.main(["eval", "--ckpt", str(run / "run1" / "ckpt.vtadl"), "--data", str(spec),
                     "--out", str(run / "e4")]) == 2
    (run / "junk.vtadl").write_bytes(b"not a checkpoint")
    assert cli.main(["eval", "--ckpt", str(run / "junk.vtadl"), "--data", str(run / "data.json"),
                     "--out", str(run / "e5")]) == 2


def test_heatmap_command(run, capsys):
    train, _ = synthetic()
    img8 = np.rint((train[0].image + 1.0) * 127.5).astype(np.uint8)
    D.write_pnm(run / "img.pgm", img8)
    out = run / "hm" / "img_heat.pgm"
    capsys.readouterr()
    assert cli.main(["heatmap", "--ckpt", str(run / "run1" / "ckpt.vtadl"), "--image", str(run / "img.pgm"),
                     "--out", str(out)]) == 0
    printed = capsys.readouterr().out.strip().splitlines()
    assert len(printed) == 1

    raw = out.read_bytes()
    header = b"P5\n32 32\n65535\n"
    assert raw.startswith(header)
    pix = np.frombuffer(raw[len(header):], ">u2").reshape(32, 32) / 65535.0

    ck = load_checkpoint(run / "run1" / "ckpt.vtadl")
    net = ck.network()
    r = net.infer(D.to_unit_range(img8)[None])
    hm = heatmap_from_patch_scores(r["per_patch_nll"][0], (4, 4), (32, 32)).scores
    norm = (hm - hm.min()) / (hm.max() - hm.min())
    assert np.max(np.abs(pix - norm)) <= 1 / 65535
    np.testing.assert_array_equal(read_float_grid(out.with_suffix(".f32")), hm.astype(np.float32))
    assert json.loads(out.with_suffix(".f32.json").read_text()) == {"height": 32, "width": 32}
    expected = global_score((r["mse"][0], r["ssim"][0]), r["per_patch_nll"][0], ck.normalizer)
    assert float(printed[0]) == expected


def test_heatmap_dimension_mismatch(run):
    D.write_pnm(run / "small.pgm", np.zeros((16, 16), np.uint8))
    assert cli.main(["heatmap", "--ckpt", str(run / "run1" / "ckpt.vtadl"), "--image", str(run / "small.pgm"),
                     "--out", str(run / "x.pgm")]) == 2


def test_help_exits_zero(capsys):
    for argv in (["--help"], ["train", "--help"], ["eval", "--help"], ["heatmap", "--help"]):
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_thread_cap_env(run, monkeypatch):
    args = ["eval", "--ckpt", str(run / "run1" / "ckpt.vtadl"), "--data", str(run / "data.json"), "--metric", "auc"]
    assert cli.main(args + ["--out", str(run / "e6")]) == 0
    monkeypatch.setenv("VTADL_THREADS", "1")
    assert cli.main(args + ["--out", str(run / "e7")]) == 0
    assert (run / "e6" / "metrics.json").read_bytes() == (run / "e7" / "metrics.json").read_bytes()


def test_idx_spec(tmp_path):
    rng = np.random.default_rng(0)
    D.write_idx(tmp_path / "tr-img.gz", rng.integers(0, 256, (6, 28, 28)))
    D.write_idx(tmp_path / "tr-lab.gz", np.array([1, 1, 2, 1, 3, 1]))
    D.write_idx(tmp_path / "te-img.gz", rng.integers(0, 256, (6, 28, 28)))
    D.write_idx(tmp_path / "te-lab.gz", np.array([1, 2, 1, 4, 5, 1]))
    spec = {"kind": "idx", "train_images": "tr-img.gz", "train_labels": "tr-lab.gz", "test_images": "te-img.gz",
            "test_labels": "te-lab.gz", "normal_digit": 1, "pad_to": 32, "max_train": 3, "test_normal": 2,
            "test_anomalous": 2}
    train, test = cli.load_dataset(spec, tmp_path)
    assert len(train) == 3 and all(s.label == D.NORMAL and s.image.shape == (32, 32, 1) for s in train)
    assert sorted(s.label for s in test) == [0, 0, 1, 1]
