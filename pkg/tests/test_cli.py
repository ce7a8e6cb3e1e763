import csv
import json
import subprocess
import sys
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from partgan import schemas
from partgan.checkpoint import save_pair
from partgan.cli import (
    ConfigError,
    RunConfig,
    cmd_bench,
    cmd_eval,
    cmd_sample,
    cmd_train,
    draw_samples,
    load_manifest,
    main,
    save_classifier,
)
from partgan.architectures import ArchConfig
from partgan.data import SyntheticSpec, make_synthetic
from partgan.evaluation import Classifier, ClassifierConfig, inception_score, softmax_probs, train_surrogate_classifier
from partgan.gan import GanPair, LabelSpec, LatentSpec, TrainConfig, generate
from partgan.nn import Dense, Reshape, Sigmoid, build_network
from partgan.optim import AdamState
from partgan.partition import estimate_priors, mixture_sample, partition_by_label, train_distributed, train_single

TINY = {
    "dataset": {"kind": "synthetic", "synthetic": {"kind": "shape-images", "K": 4, "per_class_n": 8, "image_size": 8}},
    "d_z": 4,
    "g_width": 4,
    "d_widths": [4, 8],
    "epochs": 1,
    "batch_size": 8,
    "backend": "serial",
    "classifier": {"epochs": 2, "accuracy_floor": 0.0},
}


def tiny_config(out, **overrides):
    return RunConfig.from_dict({**TINY, "output_dir": str(out), **overrides})


def read_pnm(path):
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    w, h = map(int, dims.split())
    assert maxval == b"255"
    channels = 1 if magic == b"P5" else 3
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, channels)


def fixed_pair(pixels):
    """Generator whose output is ``pixels`` (pixel space, any shape) regardless of noise."""
    pixels = np.asarray(pixels, dtype=np.float64)
    n = pixels.size
    gen = build_network([Dense(1, n), Reshape(pixels.shape)], 0)
    gen.params[:] = np.concatenate([np.zeros(n), 2 * pixels.ravel() - 1])
    disc = build_network([Reshape((n,)), Dense(n, 1), Sigmoid()], 0, input_shape=pixels.shape)
    return GanPair(gen, disc, LatentSpec(1), LabelSpec(0), AdamState.zeros(gen.params.size), AdamState.zeros(disc.params.size))


def write_fixed_run(out, images, counts, config=None):
    """Hand-built distributed run: class k always emits ``images[k]``."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir()
    workers = []
    for k, image in enumerate(images):
        save_pair(fixed_pair(image), out / "checkpoints" / f"class_{k}.bin")
        workers.append({"class_id": k, "checkpoint": f"checkpoints/class_{k}.bin", "seed": k, "duration_s": 1.0, "steps": 0})
    manifest = {
        "schema": "partgan.manifest/1",
        "mode": "distributed-cgan",
        "K": len(images),
        "priors": (np.array(counts) / sum(counts)).tolist(),
        "counts": list(counts),
        "workers": workers,
        "config": (config or RunConfig(output_dir=str(out))).to_dict(),
        "coordinator_s": 1.0,
        "max_worker_s": 1.0,
    }
    (out / "manifest.json").write_text(json.dumps(manifest))
    return out / "manifest.json"


# --- config -------------------------------------------------------------------


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="'learning_rate'"):
        RunConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(ConfigError, match="'dataset.path'"):
        RunConfig.from_dict({"dataset": {"kind": "synthetic", "path": "x"}})
    with pytest.raises(ConfigError, match="'classifier.depth'"):
        RunConfig.from_dict({"classifier": {"depth": 3}})


def test_bad_values_rejected():
    for bad in ({"mode": "gan"}, {"backend": "mpi"}, {"betas": [0.5]}, {"bn_eps": -1.0}):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)


def test_cli_unknown_key_exit_code(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--learning-rate", "0.1", "--output-dir", str(tmp_path)])
    assert info.value.code == 2
    assert "learning_rate" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "partgan", "train", "--bogus-key", "1"], capture_output=True, text=True, cwd=tmp_path
    )
    assert proc.returncode == 2
    assert "bogus_key" in proc.stderr


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**TINY, "output_dir": str(tmp_path / "a")}))
    assert main(["train", "--config", str(path), "--mode", "unified-gan", "--output-dir", str(tmp_path / "b")]) == 0
    manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert manifest["mode"] == "unified-gan"
    assert not (tmp_path / "a").exists()


# --- train --------------------------------------------------------------------------


def test_train_distributed_layout(tmp_path):
    manifest = cmd_train(tiny_config(tmp_path))
    jsonschema.validate(manifest, schemas.MANIFEST)
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == [f"class_{k}.bin" for k in range(4)]
    assert [w["class_id"] for w in manifest["workers"]] == [0, 1, 2, 3]
    assert manifest["priors"] == [0.25] * 4
    with open(tmp_path / "losses.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == schemas.LOSSES_COLUMNS
    assert {r[0] for r in rows[1:]} == {"0", "1", "2", "3"}


@pytest.mark.parametrize("mode", ["unified-gan", "conditional-gan"])
def test_train_single_model_layout(tmp_path, mode):
    manifest = cmd_train(tiny_config(tmp_path, mode=mode))
    jsonschema.validate(manifest, schemas.MANIFEST)
    assert [p.name for p in (tmp_path / "checkpoints").iterdir()] == ["model.bin"]
    assert manifest["workers"][0]["class_id"] is None


def test_manifest_missing(tmp_path):
    assert main(["eval", str(tmp_path / "nope.json")]) == 1


# --- eval ---------------------------------------------------------------------------


def test_eval_outputs_validate(tmp_path):
    cmd_train(tiny_config(tmp_path))
    result = cmd_eval(tmp_path / "manifest.json", n_samples=40, n_splits=4)
    jsonschema.validate(json.loads((tmp_path / "scores.json").read_text()), schemas.SCORES)
    jsonschema.validate(json.loads((tmp_path / "anova.json").read_text()), schemas.ANOVA)
    assert 1 <= result["scores"]["mean"] <= 4
    assert (tmp_path / "classifier.bin").exists()
    cmd_eval(tmp_path / "manifest.json", n_samples=40, n_splits=4, classifier_path=tmp_path / "classifier.bin")
    with open(tmp_path / "results.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == schemas.RESULTS_COLUMNS
    assert [r[1] for r in rows[1:]] == ["inception_score", "anova_f_channel_0"] * 2


def test_eval_needs_enough_samples(tmp_path):
    cmd_train(tiny_config(tmp_path))
    with pytest.raises(ValueError, match="n_splits"):
        cmd_eval(tmp_path / "manifest.json", n_samples=5, n_splits=10)
    assert main(["eval", str(tmp_path / "manifest.json"), "--n-samples", "5"]) == 1


def test_perfect_generators_and_classifier_score_k(tmp_path):
    K = 4
    images = [np.eye(K)[k].reshape(1, 2, 2) for k in range(K)]
    config = RunConfig.from_dict({"dataset": {"kind": "synthetic", "synthetic": {"K": K, "per_class_n": 4, "image_size": 8}}})
    manifest_path = write_fixed_run(tmp_path, images, [1] * K, config)
    # logits 100 * (2x - 1): the lit pixel wins by a margin of 200
    net = build_network([Reshape((K,)), Dense(K, K)], 0, input_shape=(1, 2, 2))
    net.params[:] = np.concatenate([100 * np.eye(K).ravel(), np.zeros(K)])
    save_classifier(Classifier(net, K, 1.0), tmp_path / "perfect.bin")
    result = cmd_eval(manifest_path, 400, 10, classifier_path=tmp_path / "perfect.bin", sampling="stratified")
    assert all(abs(s - K) < 1e-9 for s in result["scores"]["split_scores"])
    assert result["scores"]["std"] < 1e-9


# --- sample ---------------------------------------------------------------------------


def test_single_sample_bytes(tmp_path):
    cmd_train(tiny_config(tmp_path))
    path = cmd_sample(tmp_path / "manifest.json", "2", n=1, seed=5)
    manifest, pairs = load_manifest(tmp_path / "manifest.json")
    expected, _ = draw_samples(manifest, pairs, 1, np.random.default_rng([5, 3]), class_id=2)
    grid = read_pnm(path)
    assert grid.shape == (8, 8, 1)
    np.testing.assert_array_equal(grid[:, :, 0], np.rint(255 * expected[0, 0]).astype(np.uint8))
    again = cmd_sample(tmp_path / "manifest.json", "2", n=1, grid_path=tmp_path / "again.pgm", seed=5)
    assert again.read_bytes() == path.read_bytes()


def test_mixture_grid_follows_priors(tmp_path):
    manifest_path = write_fixed_run(tmp_path, [np.zeros((1, 1, 1)), np.ones((1, 1, 1))], [1, 3])
    path = cmd_sample(manifest_path, "mixture", n=400, seed=0)
    grid = read_pnm(path)
    assert grid.shape == (20, 20, 1)
    assert set(np.unique(grid)) <= {0, 255}
    manifest, pairs = load_manifest(manifest_path)
    _, classes = draw_samples(manifest, pairs, 400, np.random.default_rng([0, 3]))
    assert np.sum(grid == 255) == np.sum(classes == 1)
    assert abs(np.mean(grid == 255) - 0.75) <= 3 * np.sqrt(0.75 * 0.25 / 400)


def test_sample_rejects_bad_class(tmp_path):
    cmd_train(tiny_config(tmp_path))
    with pytest.raises(ValueError, match="out of range"):
        cmd_sample(tmp_path / "manifest.json", "7")


def test_unified_sample_rejects_class(tmp_path):
    cmd_train(tiny_config(tmp_path, mode="unified-gan"))
    with pytest.raises(ValueError, match="unconditional"):
        cmd_sample(tmp_path / "manifest.json", "1")


def test_rgb_grid_is_ppm(tmp_path):
    manifest_path = write_fixed_run(tmp_path, [np.full((3, 2, 2), 0.2)], [1])
    path = cmd_sample(manifest_path, n=4)
    assert path.suffix == ".ppm" and path.read_bytes().startswith(b"P6\n4 4\n255\n")
    assert np.all(read_pnm(path) == 51)


# --- bench ------------------------------------------------------------------------------


def test_bench_outputs(tmp_path):
    summary = cmd_bench(tiny_config(tmp_path), [1], per_class_n=8, repeats=2)
    jsonschema.validate(json.loads((tmp_path / "bench.json").read_text()), schemas.BENCH)
    assert summary["ratios"] == {"1": 1.0}
    with open(tmp_path / "scaling.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == schemas.SCALING_COLUMNS
    assert len(rows) == 3


# --- determinism ------------------------------------------------------------------------


def run_pipeline(out, backend):
    config = tiny_config(out, backend=backend, workers=4)
    cmd_train(config)
    cmd_eval(out / "manifest.json", n_samples=40, n_splits=4)
    cmd_sample(out / "manifest.json", n=9)


def test_pipeline_byte_identical(tmp_path):
    run_pipeline(tmp_path / "a", "serial")
    run_pipeline(tmp_path / "b", "process")
    names = [f"checkpoints/class_{k}.bin" for k in range(4)]
    names += ["scores.json", "anova.json", "samples.pgm", "classifier.bin", "losses.csv"]
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_bench_repeat_spread(tmp_path):
    config = tiny_config(tmp_path, d_z=8, g_width=8, d_widths=[8, 16, 32], epochs=4)
    summary = cmd_bench(config, [1], per_class_n=32, repeats=3)
    times = np.array([r["wall_clock_s"] for r in summary["rows"]])
    assert times.std() / times.mean() < 0.2


def test_two_cluster_mixture_scores_at_least_single_gan():
    data = make_synthetic(SyntheticSpec(kind="gaussian-blobs-1d", K=2, per_class_n=128, means=[-1.0, 1.0], std=0.25))
    clf = train_surrogate_classifier(data, ClassifierConfig())
    config = TrainConfig(epochs=100, batch_size=32, lr=2e-3, arch=ArchConfig(kind="mlp", d_z=2, hidden=32, init_std=0.5))
    shards = partition_by_label(data.labels, 2)
    priors = estimate_priors(shards)
    dist, single = [], []
    for seed in range(5):
        run = train_distributed(data, shards, priors, config, seed, backend="serial")
        samples, _ = mixture_sample(run.pairs(), priors, 1000, np.random.default_rng([seed, 2]), stratified=True)
        dist.append(inception_score(softmax_probs(clf, samples), 10).mean)
        pair = train_single(data, config, False, seed).pairs()[0]
        samples = generate(pair, None, 1000, np.random.default_rng([seed, 2]))
        single.append(inception_score(softmax_probs(clf, samples), 10).mean)
    assert np.median(dist) >= np.median(single)
