"""
Training and evaluation protocols for the multi-score network.

The training objective combines four L1 terms::

    2 * L1(q_global, mos_stereo) + L1(q_stereo, mos_stereo)
      + L1(q_left, mos_left) + L1(q_right, mos_right)

``no_lr_mos`` drops the two per-view terms; ``no_global_score`` drops the
global term, leaves the global head untrained and reports q_stereo as the
image quality.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import SgdConfig, Tensor
from .data import (
    DatasetManifest,
    PatchBatch,
    SplitPlan,
    StereoSample,
    aggregate_score,
    decode_ppm,
    make_split,
    tile_pair,
    tile_patches,
    write_split,
)
from .errors import ConfigError, DimensionError, NonFiniteError, TrainingError
from .metrics import EvalReport, evaluate_scores
from .model import (
    MultiScoreNet,
    ScoreQuad,
    ScoreTensors,
    build_network,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

ABLATION_MODES = ("full", "no_global_score", "no_lr_mos")
# (global, stereo, left, right)
LOSS_WEIGHTS = {
    "full": (2.0, 1.0, 1.0, 1.0),
    "no_lr_mos": (2.0, 1.0, 0.0, 0.0),
    "no_global_score": (0.0, 1.0, 1.0, 1.0),
}
PARTITIONS = (0.8, 0.7, 0.5)

Scorer = Callable[[StereoSample], ScoreQuad]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    sgd: SgdConfig = field(default_factory=SgdConfig)
    seed: int = 0
    ablation_mode: str = "full"
    lr_step_epochs: int = 0  # 0 disables step decay
    lr_step_gamma: float = 0.1

    def __post_init__(self):
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ConfigError(f"epochs must be a nonnegative integer, got {self.epochs}")
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigError(f"unknown ablation mode {self.ablation_mode!r}; choose from {', '.join(ABLATION_MODES)}")
        if self.lr_step_epochs < 0 or not 0 < self.lr_step_gamma <= 1:
            raise ConfigError("lr_step_epochs must be >= 0 and lr_step_gamma in (0, 1]")

    @property
    def loss_weights(self) -> Tuple[float, float, float, float]:
        return LOSS_WEIGHTS[self.ablation_mode]

    def learning_rate(self, epoch: int) -> float:
        if not self.lr_step_epochs:
            return self.sgd.learning_rate
        return self.sgd.learning_rate * self.lr_step_gamma ** (epoch // self.lr_step_epochs)

    def snapshot(self) -> dict:
        return {
            "lr": self.sgd.learning_rate,
            "momentum": self.sgd.momentum,
            "weight_decay": self.sgd.weight_decay,
            "batch_size": self.sgd.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "ablation": self.ablation_mode,
            "loss_weights": ",".join(f"{w:g}" for w in self.loss_weights),
            "lr_step_epochs": self.lr_step_epochs,
            "lr_step_gamma": self.lr_step_gamma,
            "reported_quality": "q_stereo" if self.ablation_mode == "no_global_score" else "q_global",
            "global_head": "untrained" if self.ablation_mode == "no_global_score" else "trained",
            "output_bias_init": "train_label_median",
        }


def multiscore_loss(scores: ScoreTensors, labels, mode: str = "full") -> Tensor:
    """Weighted sum of per-head L1 losses; ``labels`` is [N, 3] (mos_left, mos_right, mos_stereo)."""
    if mode not in ABLATION_MODES:
        raise ConfigError(f"unknown ablation mode {mode!r}")
    lab = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    n = scores.q_stereo.shape[0]
    if lab.ndim != 2 or lab.shape != (n, 3):
        raise DimensionError(f"labels must be [{n}, 3], got {lab.shape}")
    lab = lab.astype(scores.q_stereo.dtype, copy=False)
    m_l, m_r, m_s = (Tensor(lab[:, i:i + 1]) for i in range(3))
    w_g, w_s, w_l, w_r = LOSS_WEIGHTS[mode]
    terms = [(w_s, scores.q_stereo, m_s)]
    if w_g:
        if scores.q_global is None:
            raise ConfigError(f"mode {mode!r} needs the global score")
        terms.insert(0, (w_g, scores.q_global, m_s))
    if w_l:
        terms += [(w_l, scores.q_left, m_l), (w_r, scores.q_right, m_r)]
    total = None
    for w, pred, target in terms:
        term = ad.l1_loss(pred, target)
        if w != 1.0:
            term = term * w
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# run records
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    config: TrainConfig
    split: SplitPlan
    losses: List[float]
    net: MultiScoreNet
    report: Optional[EvalReport] = None
    checkpoint: Optional[Path] = None
    out_dir: Optional[Path] = None

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.out_dir = out
        snap = dict(self.config.snapshot())
        snap.update(train_fraction=self.split.train_fraction, repeat=self.split.repeat_index,
                    split_seed=self.split.seed,
                    train_scenes=";".join(self.split.train_scenes), test_scenes=";".join(self.split.test_scenes))
        (out / "config.txt").write_text("".join(f"{k}={v}\n" for k, v in snap.items()), encoding="utf-8")
        write_split(out / "split.csv", self.split)
        with open(out / "loss.csv", "w", encoding="utf-8") as fh:
            fh.write("epoch,mean_loss\n")
            for i, v in enumerate(self.losses):
                fh.write(f"{i},{v!r}\n")
        self.checkpoint = out / "model.msqa"
        save_checkpoint(self.net, self.checkpoint)
        if self.report is not None:
            self.report.write_csv(out / "report.csv")


def pool_patches(samples: Sequence[StereoSample]) -> PatchBatch:
    return PatchBatch.concatenate([tile_patches(s) for s in samples])


def _trainable(net: MultiScoreNet, mode: str):
    if mode == "no_global_score":
        return [p for n, p in net.params.items() if not n.startswith("global/")]
    return net.parameters()


def train_on_patches(net: MultiScoreNet, patches: PatchBatch, config: TrainConfig,
                     progress: Optional[Callable[[int, float], None]] = None) -> List[float]:
    """Shuffled mini-batch SGD over pooled patches; returns per-epoch mean loss."""
    if len(patches) == 0:
        raise TrainingError("empty training set")
    mode = config.ablation_mode
    params = _trainable(net, mode)
    for p in params:
        if p.grad is None:
            p.zero_grad()
    rng = np.random.default_rng([config.seed, 0x5EED])
    bs = config.sgd.batch_size
    n = len(patches)
    history = []
    for epoch in range(config.epochs):
        sgd = replace(config.sgd, learning_rate=config.learning_rate(epoch))
        perm = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, bs)):
            idx = perm[start:start + bs]
            left = patches.left[idx].astype(np.float32)
            right = patches.right[idx].astype(np.float32)
            try:
                scores = net.forward(left, right, with_global=mode != "no_global_score")
                loss = multiscore_loss(scores, patches.labels[idx], mode)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteError("loss is not finite")
                loss.backward()
                ad.sgd_step(params, sgd)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite values at epoch {epoch}, batch {b}: {exc}") from exc
            total += value * len(idx)
        history.append(total / n)
        log.info("epoch %d mean loss %.4f", epoch, history[-1])
        if progress is not None:
            progress(epoch, history[-1])
    return history


_OUTPUT_BIASES = (
    ("left/score/fc/bias", 0),
    ("right/score/fc/bias", 1),
    ("stereo/score/fc/bias", 2),
    ("global/LBconct/fc2/bias", 2),
)


def initial_network(seed: int, labels: np.ndarray) -> MultiScoreNet:
    """Seeded network whose score-head biases start at the per-column label medians.

    With zero biases an L1 objective at the default learning rate needs
    thousands of steps just to walk the outputs up to the label range.
    """
    net = build_network(seed)
    labels = np.asarray(labels)
    for name, col in _OUTPUT_BIASES:
        net[name].data[...] = np.median(labels[:, col])
    return net


def train(manifest: DatasetManifest, split: SplitPlan, config: TrainConfig,
          out_dir=None, progress=None) -> RunRecord:
    samples = manifest.by_id(split.train_ids)
    if not samples:
        raise TrainingError(f"{manifest.name}: split has an empty training set")
    patches = pool_patches(samples)
    net = initial_network(config.seed, patches.labels)
    losses = train_on_patches(net, patches, config, progress)
    record = RunRecord(config, split, losses, net)
    if out_dir is not None:
        record.write(out_dir)
    return record


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _as_net(checkpoint) -> MultiScoreNet:
    if isinstance(checkpoint, MultiScoreNet):
        return checkpoint
    return load_checkpoint(checkpoint)


def score_pair(net: MultiScoreNet, sample_id: str, left: np.ndarray, right: np.ndarray) -> Tuple[ScoreQuad, int]:
    batch = tile_pair(sample_id, left, right, (0.0, 0.0, 0.0))
    preds = net.predict(batch.left.astype(np.float32), batch.right.astype(np.float32))
    return aggregate_score(preds), len(batch)


def network_scorer(net: MultiScoreNet) -> Scorer:
    def scorer(sample: StereoSample) -> ScoreQuad:
        left, right = sample.load_images()
        return score_pair(net, sample.id, left, right)[0]
    return scorer


def reported_quality(quad: ScoreQuad, mode: str) -> float:
    return quad.q_stereo if mode == "no_global_score" else quad.q_global


def partition_label(split: Optional[SplitPlan]) -> str:
    if split is None or not split.train_fraction:
        return "all"
    pct = int(round(split.train_fraction * 100))
    return f"{pct}-{100 - pct}"


def evaluate(checkpoint, manifest: DatasetManifest, split: Optional[SplitPlan] = None, mode: str = "full",
             scorer: Optional[Scorer] = None, threads: int = 1, partition: Optional[str] = None) -> EvalReport:
    """Score every test image (all images when ``split`` is None) and compare
    the reported quality against mos_stereo.

    ``scorer`` replaces the network (used for stub predictors); otherwise
    ``checkpoint`` is a path or an in-memory network.
    """
    if mode not in ABLATION_MODES:
        raise ConfigError(f"unknown ablation mode {mode!r}")
    samples = manifest.by_id(split.test_ids) if split is not None else list(manifest.samples)
    if not samples:
        raise ConfigError(f"{manifest.name}: empty test set")
    samples = sorted(samples, key=lambda s: s.id)
    if scorer is None:
        scorer = network_scorer(_as_net(checkpoint))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            quads = list(pool.map(scorer, samples))
    else:
        quads = [scorer(s) for s in samples]
    preds = [reported_quality(q, mode) for q in quads]
    mos = [s.mos_stereo for s in samples]
    report = evaluate_scores(preds, mos, partition or partition_label(split),
                             str(split.repeat_index) if split is not None else "0",
                             ids=[s.id for s in samples])
    if split is not None:
        report.splits.append(split)
    return report


def run_protocol(manifest: DatasetManifest, train_fraction: float, repeats: int, config: TrainConfig,
                 out_dir=None, split_seed: Optional[int] = None, threads: int = 1,
                 progress=None) -> EvalReport:
    """Train/evaluate on ``repeats`` fresh scene-disjoint splits; the report's
    mean row is the arithmetic mean of the per-repeat rows."""
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    seed = config.seed if split_seed is None else split_seed
    report = EvalReport()
    for r in range(repeats):
        plan = make_split(manifest, train_fraction, r, seed)
        run_dir = Path(out_dir) / f"repeat_{r:02d}" if out_dir is not None else None
        record = train(manifest, plan, config, progress=progress)
        record.report = evaluate(record.net, manifest, plan, config.ablation_mode, threads=threads)
        if run_dir is not None:
            record.write(run_dir)
        report.extend(record.report)
        report.records.append(record)
    if out_dir is not None:
        report.write_csv(Path(out_dir) / "report.csv")
    return report


def cross_database(train_manifest: DatasetManifest, test_manifest: DatasetManifest, config: TrainConfig,
                   out_dir=None, threads: int = 1, progress=None) -> EvalReport:
    """Train on every image of one manifest, evaluate on every image of another."""
    if train_manifest.name == test_manifest.name:
        raise ConfigError(f"refusing cross-database test of {train_manifest.name} against itself")
    plan = SplitPlan(tuple(s.id for s in train_manifest.samples), (),
                     tuple(train_manifest.reference_ids), (), 0.0, 0, config.seed)
    record = train(train_manifest, plan, config, progress=progress)
    record.report = evaluate(record.net, test_manifest, None, config.ablation_mode,
                             threads=threads, partition="crossdb")
    if out_dir is not None:
        record.write(out_dir)
    record.report.records.append(record)
    return record.report


def score_image(checkpoint, left_path, right_path) -> Tuple[ScoreQuad, int]:
    """Aggregated (q_left, q_right, q_stereo, q_global) for one stereo pair plus its patch count."""
    net = _as_net(checkpoint)
    left, right = decode_ppm(left_path), decode_ppm(right_path)
    return score_pair(net, Path(left_path).stem, left, right)
