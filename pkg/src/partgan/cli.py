"""Command-line driver: ``partgan train | eval | bench | sample``.

Configuration comes from an optional JSON file; every key can be overridden
with ``--key value`` (dashes or underscores). Values are parsed as JSON when
possible, so ``--betas "[0.5, 0.9]"`` and ``--bn-eps legacy`` both work.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import schemas
from .architectures import ArchConfig
from .checkpoint import CheckpointError, load_pair, network_from_bytes, network_to_bytes
from .data import Dataset, SyntheticSpec, make_synthetic, read_cifar_binary, read_idx, to_bytes
from .evaluation import (
    Classifier,
    ClassifierConfig,
    anova_per_channel,
    inception_score,
    softmax_probs,
    train_surrogate_classifier,
)
from .gan import TrainConfig, generate
from .partition import (
    ClassPrior,
    WorkerError,
    bench_weak_scaling,
    estimate_priors,
    mixture_sample,
    partition_by_label,
    physical_cores,
    stratified_classes,
    train_distributed,
    train_single,
)

MODES = ("unified-gan", "conditional-gan", "distributed-cgan")


class ConfigError(ValueError):
    pass


def _default_dataset():
    return {"kind": "synthetic", "synthetic": {"kind": "shape-images", "K": 4, "per_class_n": 64, "seed": 0}}


@dataclass
class RunConfig:
    dataset: dict = field(default_factory=_default_dataset)
    mode: str = "distributed-cgan"
    d_z: int = 100
    epochs: int = 50
    batch_size: int = 64
    lr: float = 2e-4
    betas: list = field(default_factory=lambda: [0.5, 0.999])
    adam_eps: float = 1e-8
    bn_eps: float | str = 1e-5
    clamp: float = 1e-7
    d_steps: int = 1
    arch: str = "dcgan"
    g_width: int = 128
    d_widths: list = field(default_factory=lambda: [16, 32, 64, 128])
    hidden: int = 32
    dropout: float = 0.25
    init_std: float = 0.02
    seed: int = 0
    workers: int | None = None
    backend: str = "process"
    output_dir: str = "runs/default"
    classifier: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.backend not in ("process", "thread", "serial"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if len(self.betas) != 2:
            raise ConfigError("betas must hold two values")
        kind = self.dataset.get("kind")
        allowed = {"synthetic": {"kind", "synthetic"}, "idx": {"kind", "images", "labels", "pad_to", "num_classes"}, "cifar": {"kind", "paths", "num_classes"}}
        if kind not in allowed:
            raise ConfigError(f"unknown dataset kind {kind!r}")
        for key in self.dataset:
            if key not in allowed[kind]:
                raise ConfigError(f"unknown config key 'dataset.{key}'")
        unknown = set(self.classifier) - {f.name for f in fields(ClassifierConfig)}
        if unknown:
            raise ConfigError(f"unknown config key 'classifier.{sorted(unknown)[0]}'")
        try:
            self.train_config()
            if kind == "synthetic":
                SyntheticSpec(**self.dataset.get("synthetic", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        for key in d:
            if key not in names:
                raise ConfigError(f"unknown config key '{key}'")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def train_config(self) -> TrainConfig:
        arch = ArchConfig(
            kind=self.arch,
            d_z=self.d_z,
            g_width=self.g_width,
            d_widths=tuple(self.d_widths),
            hidden=self.hidden,
            dropout=self.dropout,
            bn_eps=self.bn_eps,
            init_std=self.init_std,
        )
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            beta1=self.betas[0],
            beta2=self.betas[1],
            adam_eps=self.adam_eps,
            clamp=self.clamp,
            d_steps=self.d_steps,
            arch=arch,
        )

    def classifier_config(self) -> ClassifierConfig:
        return ClassifierConfig(**self.classifier)

    def pool_size(self) -> int:
        cores = physical_cores()
        return cores if self.workers is None else min(self.workers, cores)


def load_dataset(selector: dict) -> Dataset:
    kind = selector["kind"]
    if kind == "synthetic":
        return make_synthetic(SyntheticSpec(**selector.get("synthetic", {})))
    if kind == "idx":
        return read_idx(selector["images"], selector["labels"], selector.get("pad_to"), selector.get("num_classes"))
    return read_cifar_binary(selector["paths"], selector.get("num_classes", 10))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train(config: RunConfig) -> dict:
    """Train according to ``config.mode`` and write checkpoints, manifest and losses."""
    out = Path(config.output_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    data = load_dataset(config.dataset)
    train_cfg = config.train_config()
    shards = partition_by_label(data.labels, data.K)
    priors = estimate_priors(shards)
    if config.mode == "distributed-cgan":
        run = train_distributed(data, shards, priors, train_cfg, config.seed, config.backend, config.pool_size())
    else:
        backend = "serial" if config.backend == "serial" else config.backend
        run = train_single(data, train_cfg, config.mode == "conditional-gan", config.seed, backend)
    workers = []
    with open(out / "losses.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(schemas.LOSSES_COLUMNS)
        for w in run.workers:
            name = "model.bin" if w.class_id is None else f"class_{w.class_id}.bin"
            (out / "checkpoints" / name).write_bytes(w.checkpoint)
            workers.append(
                {
                    "class_id": w.class_id,
                    "checkpoint": f"checkpoints/{name}",
                    "seed": w.seed,
                    "duration_s": w.duration,
                    "steps": len(w.reports),
                }
            )
            label = "" if w.class_id is None else w.class_id
            for step, r in enumerate(w.reports):
                writer.writerow([label, step, repr(r.j_d), repr(r.j_g), repr(r.d_real_mean), repr(r.d_fake_mean)])
    manifest = {
        "schema": "partgan.manifest/1",
        "mode": config.mode,
        "K": data.K,
        "priors": priors.probabilities.tolist(),
        "counts": priors.counts.tolist(),
        "workers": workers,
        "config": config.to_dict(),
        "coordinator_s": run.duration,
        "max_worker_s": run.max_worker_duration,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def load_manifest(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing manifest {path}")
    manifest = json.loads(path.read_text())
    pairs = [load_pair(path.parent / w["checkpoint"])[0] for w in manifest["workers"]]
    return manifest, pairs


def draw_samples(manifest: dict, pairs, n: int, rng, stratified: bool = False, class_id=None):
    """Samples and source classes for a trained run.

    ``class_id`` restricts sampling to one class; otherwise classes follow the
    priors (randomly, or by :func:`stratified_classes`).
    """
    priors = ClassPrior.from_counts(manifest["counts"])
    K = manifest["K"]
    if class_id is not None and not 0 <= class_id < K:
        raise ValueError(f"class id {class_id} out of range [0, {K})")
    mode = manifest["mode"]
    if mode == "distributed-cgan":
        if class_id is not None:
            return generate(pairs[class_id], None, n, rng), np.full(n, class_id)
        return mixture_sample(pairs, priors, n, rng, stratified)
    pair = pairs[0]
    if mode == "unified-gan":
        if class_id is not None:
            raise ValueError("unified-gan models are unconditional; sample without a class id")
        return generate(pair, None, n, rng), np.full(n, -1)
    if class_id is not None:
        classes = np.full(n, class_id)
    elif stratified:
        classes = stratified_classes(priors.probabilities, n)
    else:
        classes = rng.choice(K, size=n, p=priors.probabilities)
    return generate(pair, classes, n, rng), classes


def load_classifier(path) -> Classifier:
    net, extra = network_from_bytes(Path(path).read_bytes())
    return Classifier(net.eval(), extra["K"], extra["accuracy"])


def save_classifier(clf: Classifier, path) -> None:
    Path(path).write_bytes(network_to_bytes(clf.network, {"K": clf.K, "accuracy": clf.accuracy}))


def cmd_eval(
    manifest_path,
    n_samples: int = 1000,
    n_splits: int = 10,
    seed: int = 0,
    classifier_path=None,
    sampling: str = "random",
    run_id: str | None = None,
) -> dict:
    """Score generated samples and the real data; write scores.json and anova.json."""
    if n_samples < n_splits:
        raise ValueError(f"n_samples={n_samples} is smaller than n_splits={n_splits}")
    manifest, pairs = load_manifest(manifest_path)
    out = Path(manifest_path).parent
    config = RunConfig.from_dict(manifest["config"])
    data = load_dataset(config.dataset)
    if classifier_path is not None:
        clf = load_classifier(classifier_path)
    else:
        clf = train_surrogate_classifier(data, config.classifier_config())
        save_classifier(clf, out / "classifier.bin")
    if clf.K != manifest["K"]:
        raise ValueError(f"classifier has {clf.K} classes, run has {manifest['K']}")
    rng = np.random.default_rng([seed, 2])
    stratified = sampling == "stratified"
    samples, _ = draw_samples(manifest, pairs, n_samples, rng, stratified)
    # stratified order is already balanced per split; shuffling would undo that
    report = inception_score(softmax_probs(clf, samples), n_splits, None if stratified else seed)
    scores = {
        "schema": "partgan.scores/1",
        "metric": "inception_score",
        "split_scores": report.split_scores,
        "mean": report.mean,
        "std": report.std,
        "n_splits": n_splits,
        "n_samples": n_samples,
        "classifier": clf.identity,
        "classifier_accuracy": clf.accuracy,
        "mode": manifest["mode"],
        "sampling": sampling,
    }
    anova = anova_per_channel(data.images, data.labels, data.K)
    anova_doc = {"schema": "partgan.anova/1", "observation": "per-image channel mean", **anova.to_dict()}
    _write_json(out / "scores.json", scores)
    _write_json(out / "anova.json", anova_doc)
    results = out / "results.csv"
    new = not results.exists()
    run_id = run_id or out.name
    with open(results, "a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(schemas.RESULTS_COLUMNS)
        params = json.dumps({"n_samples": n_samples, "n_splits": n_splits, "classifier": clf.identity}, sort_keys=True)
        writer.writerow([run_id, "inception_score", repr(report.mean), repr(report.std), params])
        for c, f_value in enumerate(anova.f):
            writer.writerow([run_id, f"anova_f_channel_{c}", repr(f_value), "", json.dumps({"K": data.K})])
    return {"scores": scores, "anova": anova_doc}


def write_grid(samples: np.ndarray, path) -> Path:
    """Tile samples (n, C, H, W) row-major into a binary PGM (C=1) or PPM (C=3)."""
    n, c, h, w = samples.shape
    if c not in (1, 3):
        raise ValueError(f"grid output needs 1 or 3 channels, got {c}")
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    grid = np.zeros((rows * h, cols * w, c), dtype=np.uint8)
    pixels = to_bytes(np.clip(samples, 0.0, 1.0))
    for i in range(n):
        r, q = divmod(i, cols)
        grid[r * h : (r + 1) * h, q * w : (q + 1) * w] = pixels[i].transpose(1, 2, 0)
    magic = b"P5" if c == 1 else b"P6"
    header = magic + f"\n{cols * w} {rows * h}\n255\n".encode()
    path = Path(path)
    path.write_bytes(header + grid.tobytes())
    return path


def cmd_sample(manifest_path, target="mixture", n: int = 16, grid_path=None, seed: int = 0) -> Path:
    manifest, pairs = load_manifest(manifest_path)
    class_id = None if target in (None, "mixture") else int(target)
    rng = np.random.default_rng([seed, 3])
    samples, _ = draw_samples(manifest, pairs, n, rng, class_id=class_id)
    if grid_path is None:
        ext = "pgm" if samples.shape[1] == 1 else "ppm"
        grid_path = Path(manifest_path).parent / f"samples.{ext}"
    return write_grid(samples, grid_path)


def cmd_bench(config: RunConfig, K_list, per_class_n: int = 32, repeats: int = 1, out_dir=None) -> dict:
    """Weak-scaling sweep; writes scaling.csv and bench.json."""
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    size = config.dataset.get("synthetic", {}).get("image_size", 16)
    rows = bench_weak_scaling(
        K_list, per_class_n, config.train_config(), size, config.seed, config.backend, config.pool_size(), repeats
    )
    with open(out / "scaling.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(schemas.SCALING_COLUMNS)
        for row in rows:
            writer.writerow([row[c] for c in schemas.SCALING_COLUMNS])
    t1 = [r["wall_clock_s"] for r in rows if r["K"] == min(K_list)]
    base = float(np.median(t1))
    ratios = {}
    for K in K_list:
        tk = float(np.median([r["wall_clock_s"] for r in rows if r["K"] == K]))
        ratios[str(K)] = tk / base
    summary = {
        "schema": "partgan.bench/1",
        "cores": config.pool_size(),
        "ratios": ratios,
        "rows": [{k: v for k, v in r.items() if k != "intervals"} for r in rows],
    }
    _write_json(out / "bench.json", summary)
    return summary


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _config_from_args(config_path, overrides: list[str]) -> RunConfig:
    base = json.loads(Path(config_path).read_text()) if config_path else {}
    if len(overrides) % 2:
        raise ConfigError(f"flag {overrides[-1]} needs a value")
    for flag, value in zip(overrides[::2], overrides[1::2]):
        if not flag.startswith("--"):
            raise ConfigError(f"expected a --key flag, got {flag!r}")
        base[flag[2:].replace("-", "_")] = _parse_value(value)
    return RunConfig.from_dict(base)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partgan", description="Label-partitioned GAN training")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model; extra --key value flags override the config")
    p.add_argument("--config", help="JSON config file")

    p = sub.add_parser("eval", help="score a trained run")
    p.add_argument("manifest")
    p.add_argument("--n-samples", type=int, default=1000)
    p.add_argument("--n-splits", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classifier", help="reuse a saved surrogate classifier")
    p.add_argument("--sampling", choices=["random", "stratified"], default="random")

    p = sub.add_parser("bench", help="weak-scaling benchmark; extra --key value flags override the config")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--k-list", default="1,2,4")
    p.add_argument("--per-class-n", type=int, default=32)
    p.add_argument("--repeats", type=int, default=1)

    p = sub.add_parser("sample", help="write a sample grid image")
    p.add_argument("manifest")
    p.add_argument("--class-id", default="mixture", help="class index or 'mixture'")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra and args.command not in ("train", "bench"):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        if args.command in ("train", "bench"):
            try:
                config = _config_from_args(args.config, extra)
            except ConfigError as exc:
                parser.error(str(exc))
            if args.command == "train":
                manifest = cmd_train(config)
                print(f"trained {len(manifest['workers'])} model(s) in {manifest['coordinator_s']:.2f}s -> {config.output_dir}")
            else:
                ks = [int(k) for k in args.k_list.split(",")]
                summary = cmd_bench(config, ks, args.per_class_n, args.repeats)
                for K, ratio in summary["ratios"].items():
                    print(f"K={K}: t(K)/t(1) = {ratio:.3f}")
        elif args.command == "eval":
            result = cmd_eval(args.manifest, args.n_samples, args.n_splits, args.seed, args.classifier, args.sampling)
            s = result["scores"]
            print(f"IS = {s['mean']:.4f} +/- {s['std']:.4f} (surrogate {s['classifier']}, acc {s['classifier_accuracy']:.3f})")
        else:
            path = cmd_sample(args.manifest, args.class_id, args.n, args.out, args.seed)
            print(f"wrote {path}")
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        if isinstance(exc, WorkerError):
            print(f"error: {exc}", file=sys.stderr)
        else:
            print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
