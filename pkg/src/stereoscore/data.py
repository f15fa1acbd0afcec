"""
Stereo-pair data handling: PPM codec, dataset manifests, patch tiling,
scene-disjoint splits, synthetic dataset generation, the left/right/stereo
MOS mismatch analysis and patch-score aggregation.
"""
from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import (
    DimensionError,
    EmptyBatchError,
    ImageFormatError,
    ManifestError,
    MaxvalError,
    SplitError,
    TruncatedImageError,
    UnsupportedFormatError,
)
from .model import PATCH_SIZE, ScoreQuad

MOS_MIN, MOS_MAX = 10.0, 100.0
DISTORTION_TYPES = ("awgn", "gblur", "jpeg", "pristine", "synthetic")
MANIFEST_COLUMNS = (
    "id", "left_path", "right_path", "mos_left", "mos_right", "mos_stereo",
    "reference_id", "distortion_type", "level_left", "level_right",
)
MISMATCH_COLUMNS = ("id", "mos_left", "mos_right", "mos_mean", "mos_stereo", "D")
_ID_RE = re.compile(r"^[A-Za-z0-9_-]+$")


# ---------------------------------------------------------------------------
# PPM (binary P6, maxval 255)
# ---------------------------------------------------------------------------

def _read_header_token(buf: bytes, pos: int) -> Tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise TruncatedImageError("PPM header ends prematurely")
    return buf[start:pos], pos


def decode_ppm_bytes(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if buf[:2] != b"P6":
        raise UnsupportedFormatError(f"{source}: unsupported format {buf[:2]!r}; only binary PPM (P6) is supported")
    pos = 2
    fields = []
    try:
        for _ in range(3):
            tok, pos = _read_header_token(buf, pos)
            fields.append(int(tok))
    except TruncatedImageError as exc:
        raise TruncatedImageError(f"{source}: {exc}") from None
    except ValueError:
        raise ImageFormatError(f"{source}: malformed PPM header") from None
    width, height, maxval = fields
    if maxval != 255:
        raise MaxvalError(f"{source}: maxval {maxval} not supported (need 255)")
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"{source}: invalid dimensions {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    data = buf[pos:pos + need]
    if len(data) < need:
        raise TruncatedImageError(f"{source}: pixel data truncated ({len(data)} of {need} bytes)")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3).copy()


def decode_ppm(path) -> np.ndarray:
    """Read a binary PPM into a uint8 array of shape (height, width, 3)."""
    with open(path, "rb") as fh:
        return decode_ppm_bytes(fh.read(), str(path))


def encode_ppm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected uint8 image of shape (H, W, 3), got {img.dtype} {img.shape}")
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def encode_ppm(path, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm_bytes(img))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StereoSample:
    id: str
    left_path: Path
    right_path: Path
    mos_left: float
    mos_right: float
    mos_stereo: float
    reference_id: str
    distortion_type: str = "synthetic"
    level_left: float = 0.0
    level_right: float = 0.0

    def __post_init__(self):
        if not _ID_RE.match(self.id):
            raise ManifestError(f"sample id {self.id!r} must match [A-Za-z0-9_-]+")
        for key in ("mos_left", "mos_right", "mos_stereo"):
            v = getattr(self, key)
            if not (MOS_MIN <= v <= MOS_MAX):
                raise ManifestError(f"sample {self.id}: {key}={v} outside [{MOS_MIN:g}, {MOS_MAX:g}]")
        if self.distortion_type not in DISTORTION_TYPES:
            raise ManifestError(f"sample {self.id}: unknown distortion type {self.distortion_type!r}")
        if self.level_left < 0 or self.level_right < 0:
            raise ManifestError(f"sample {self.id}: distortion levels must be nonnegative")

    @property
    def symmetric(self) -> bool:
        return self.level_left == self.level_right

    @property
    def labels(self) -> Tuple[float, float, float]:
        return (self.mos_left, self.mos_right, self.mos_stereo)

    def load_images(self) -> Tuple[np.ndarray, np.ndarray]:
        left = decode_ppm(self.left_path)
        right = decode_ppm(self.right_path)
        if left.shape != right.shape:
            raise DimensionError(
                f"sample {self.id}: left image is {left.shape[1]}x{left.shape[0]}, "
                f"right image is {right.shape[1]}x{right.shape[0]}"
            )
        return left, right


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    samples: Tuple[StereoSample, ...]
    root: Optional[Path] = None

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ManifestError(f"{self.name}: duplicate sample id {dup!r}")
        if len(self.reference_ids) < 2:
            raise ManifestError(f"{self.name}: need at least 2 distinct reference scenes, got {len(self.reference_ids)}")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def reference_ids(self) -> List[str]:
        return sorted({s.reference_id for s in self.samples})

    def by_id(self, ids: Iterable[str]) -> List[StereoSample]:
        wanted = set(ids)
        return [s for s in self.samples if s.id in wanted]

    def check_files(self) -> None:
        for s in self.samples:
            for p in (s.left_path, s.right_path):
                if not Path(p).is_file():
                    raise ManifestError(f"{self.name}: sample {s.id} references missing file {p}")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    root = path.parent
    samples = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
            rec = dict(zip(MANIFEST_COLUMNS, (c.strip() for c in row)))
            try:
                samples.append(StereoSample(
                    id=rec["id"],
                    left_path=root / rec["left_path"],
                    right_path=root / rec["right_path"],
                    mos_left=float(rec["mos_left"]),
                    mos_right=float(rec["mos_right"]),
                    mos_stereo=float(rec["mos_stereo"]),
                    reference_id=rec["reference_id"],
                    distortion_type=rec["distortion_type"],
                    level_left=float(rec["level_left"]),
                    level_right=float(rec["level_right"]),
                ))
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            except ManifestError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
    manifest = DatasetManifest(name=str(path.resolve()), samples=tuple(samples), root=root)
    if check_files:
        manifest.check_files()
    return manifest


def _fmt(x: float) -> str:
    return repr(float(x))


def write_manifest(path, manifest: DatasetManifest) -> None:
    path = Path(path)
    root = path.parent
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for s in manifest.samples:
            w.writerow([
                s.id,
                Path(os.path.relpath(s.left_path, root)).as_posix(),
                Path(os.path.relpath(s.right_path, root)).as_posix(),
                _fmt(s.mos_left), _fmt(s.mos_right), _fmt(s.mos_stereo),
                s.reference_id, s.distortion_type,
                _fmt(s.level_left), _fmt(s.level_right),
            ])


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------

@dataclass
class PatchBatch:
    """Co-located left/right patches with per-patch labels.

    ``left``/``right`` are uint8 [N, 3, 32, 32] (raw pixels, no normalization);
    ``labels`` is float32 [N, 3] holding (mos_left, mos_right, mos_stereo);
    ``origins`` holds (sample_id, row, col) of each patch's top-left pixel.
    """

    left: np.ndarray
    right: np.ndarray
    labels: np.ndarray
    origins: List[Tuple[str, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.left.shape[0]

    @staticmethod
    def concatenate(batches: Sequence["PatchBatch"]) -> "PatchBatch":
        if not batches:
            raise EmptyBatchError("no patch batches to concatenate")
        return PatchBatch(
            np.concatenate([b.left for b in batches]),
            np.concatenate([b.right for b in batches]),
            np.concatenate([b.labels for b in batches]),
            [o for b in batches for o in b.origins],
        )


def grid_shape(height: int, width: int, size: int = PATCH_SIZE) -> Tuple[int, int]:
    return height // size, width // size


def tile_image(img: np.ndarray, size: int = PATCH_SIZE) -> Tuple[np.ndarray, List[Tuple[int, int]]]:
    """Non-overlapping size x size tiles, row-major; trailing partial rows/cols dropped.

    Returns channel-first patches [N, 3, size, size] (dtype preserved) and
    their (row, col) pixel origins.
    """
    if img.ndim != 3:
        raise DimensionError(f"expected (H, W, C) image, got shape {img.shape}")
    h, w, c = img.shape
    gh, gw = grid_shape(h, w, size)
    if gh == 0 or gw == 0:
        raise EmptyBatchError(f"image of {w}x{h} is smaller than one {size}x{size} patch")
    crop = img[:gh * size, :gw * size]
    patches = crop.reshape(gh, size, gw, size, c).transpose(0, 2, 4, 1, 3).reshape(gh * gw, c, size, size)
    origins = [(i * size, j * size) for i in range(gh) for j in range(gw)]
    return np.ascontiguousarray(patches), origins


def untile(patches: np.ndarray, grid: Tuple[int, int]) -> np.ndarray:
    """Inverse of ``tile_image`` on the cropped region."""
    gh, gw = grid
    n, c, s, _ = patches.shape
    if n != gh * gw:
        raise DimensionError(f"{n} patches cannot fill a {gh}x{gw} grid")
    return patches.reshape(gh, gw, c, s, s).transpose(0, 3, 1, 4, 2).reshape(gh * s, gw * s, c)


def tile_pair(sample_id: str, left: np.ndarray, right: np.ndarray,
              labels: Tuple[float, float, float]) -> PatchBatch:
    if left.shape != right.shape:
        raise DimensionError(
            f"sample {sample_id}: left image is {left.shape[1]}x{left.shape[0]}, "
            f"right image is {right.shape[1]}x{right.shape[0]}"
        )
    lp, origins = tile_image(left)
    rp, _ = tile_image(right)
    lab = np.tile(np.asarray(labels, dtype=np.float32), (lp.shape[0], 1))
    return PatchBatch(lp, rp, lab, [(sample_id, r, c) for r, c in origins])


def tile_patches(sample: StereoSample) -> PatchBatch:
    left, right = sample.load_images()
    return tile_pair(sample.id, left, right, sample.labels)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    train_ids: Tuple[str, ...]
    test_ids: Tuple[str, ...]
    train_scenes: Tuple[str, ...]
    test_scenes: Tuple[str, ...]
    train_fraction: float
    repeat_index: int
    seed: int

    @property
    def achieved_fraction(self) -> float:
        return len(self.train_ids) / (len(self.train_ids) + len(self.test_ids))

    def rows(self) -> List[Tuple[str, str]]:
        return [(i, "train") for i in self.train_ids] + [(i, "test") for i in self.test_ids]


def make_split(manifest: DatasetManifest, train_fraction: float, repeat_index: int = 0, seed: int = 0) -> SplitPlan:
    """Scene-disjoint split.

    Reference scenes are shuffled with an RNG keyed on (seed, repeat_index)
    and moved to the training side until the cumulative sample count first
    reaches ``train_fraction`` of the manifest; the rest form the test side.
    """
    if not 0.0 < train_fraction < 1.0:
        raise SplitError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    scenes = manifest.reference_ids
    if len(scenes) < 2:
        raise SplitError(f"{manifest.name}: need at least 2 reference scenes to split")
    counts = {s: 0 for s in scenes}
    for smp in manifest.samples:
        counts[smp.reference_id] += 1
    rng = np.random.default_rng([int(seed), int(repeat_index)])
    order = [scenes[i] for i in rng.permutation(len(scenes))]
    total = len(manifest.samples)
    target = train_fraction * total - 1e-9
    train_scenes, cum = [], 0
    for s in order[:-1]:  # the last scene always goes to test
        train_scenes.append(s)
        cum += counts[s]
        if cum >= target:
            break
    test_scenes = [s for s in order if s not in set(train_scenes)]
    tr, te = set(train_scenes), set(test_scenes)
    return SplitPlan(
        train_ids=tuple(s.id for s in manifest.samples if s.reference_id in tr),
        test_ids=tuple(s.id for s in manifest.samples if s.reference_id in te),
        train_scenes=tuple(sorted(tr)),
        test_scenes=tuple(sorted(te)),
        train_fraction=float(train_fraction),
        repeat_index=int(repeat_index),
        seed=int(seed),
    )


def write_split(path, plan: SplitPlan) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "subset"])
        w.writerows(plan.rows())


def read_split(path, manifest: DatasetManifest, train_fraction: float = 0.0, seed: int = 0) -> SplitPlan:
    train, test = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            (train if row["subset"] == "train" else test).append(row["id"])
    ref = {s.id: s.reference_id for s in manifest.samples}
    unknown = [i for i in train + test if i not in ref]
    if unknown:
        raise SplitError(f"{path}: id {unknown[0]!r} not in manifest {manifest.name}")
    return SplitPlan(tuple(train), tuple(test),
                     tuple(sorted({ref[i] for i in train})), tuple(sorted({ref[i] for i in test})),
                     train_fraction, 0, seed)


# ---------------------------------------------------------------------------
# left/right vs stereo MOS mismatch
# ---------------------------------------------------------------------------

def mos_mismatch(sample) -> float:
    """|(mos_left + mos_right)/2 - mos_stereo|."""
    return abs((sample.mos_left + sample.mos_right) / 2.0 - sample.mos_stereo)


def mismatch_rows(samples: Iterable) -> List[dict]:
    """Plot-data rows for the mismatch analysis, sorted by descending D then id."""
    rows = []
    for s in samples:
        rows.append({
            "id": s.id,
            "mos_left": s.mos_left,
            "mos_right": s.mos_right,
            "mos_mean": (s.mos_left + s.mos_right) / 2.0,
            "mos_stereo": s.mos_stereo,
            "D": mos_mismatch(s),
        })
    rows.sort(key=lambda r: (-r["D"], r["id"]))
    return rows


def write_mismatch_csv(path, samples: Iterable) -> List[dict]:
    rows = mismatch_rows(samples)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MISMATCH_COLUMNS)
        for r in rows:
            w.writerow([r["id"]] + [f"{r[k]:.6g}" for k in MISMATCH_COLUMNS[1:]])
    return rows


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def aggregate_score(patch_scores) -> ScoreQuad:
    """Mean of each score channel over all patches of one image.

    Accepts a sequence of ``ScoreQuad`` or an array [N, 4] ordered
    (q_left, q_right, q_stereo, q_global).
    """
    if isinstance(patch_scores, np.ndarray):
        arr = patch_scores.astype(np.float64, copy=False)
    else:
        arr = np.array([[q.q_left, q.q_right, q.q_stereo, q.q_global] for q in patch_scores], dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise EmptyBatchError("cannot aggregate an empty list of patch scores")
    m = arr.sum(axis=0) / arr.shape[0]
    return ScoreQuad(float(m[0]), float(m[1]), float(m[2]), float(m[3]))


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------

NOISE_SIGMA_PER_LEVEL = 12.0
BLUR_RADIUS_PER_LEVEL = 2
MAX_DISPARITY = 4


def synthetic_mos(level: float, level_max: float) -> float:
    return float(np.clip(100.0 - 90.0 * (level / level_max), MOS_MIN, MOS_MAX))


def synthetic_stereo_mos(mos_left: float, mos_right: float) -> float:
    return min(mos_left, mos_right) + 0.25 * abs(mos_left - mos_right)


def _scene(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Dead-leaves texture: overlapping flat rectangles on a flat background, float [0, 255].

    Sharp edges at many scales make blur measurable in every patch.
    """
    img = np.empty((height, width, 3))
    img[:] = rng.uniform(40, 215, 3)
    for _ in range(height * width // 40):
        h, w = (int(v) for v in rng.integers(3, max(4, height // 4), 2))
        r0, c0 = int(rng.integers(-h + 1, height)), int(rng.integers(-w + 1, width))
        img[max(r0, 0):r0 + h, max(c0, 0):c0 + w] = rng.uniform(0, 255, 3)
    return img


def _distort(view: np.ndarray, kind: str, level: int, rng: np.random.Generator) -> np.ndarray:
    if level == 0:
        return view
    if kind == "awgn":
        return view + rng.normal(0.0, NOISE_SIGMA_PER_LEVEL * level, size=view.shape)
    size = 2 * BLUR_RADIUS_PER_LEVEL * level + 1
    return ndimage.uniform_filter(view, size=(size, size, 1), mode="reflect")


def _to_u8(view: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(view), 0, 255).astype(np.uint8)


def generate_synthetic(out_dir, scenes: int = 6, levels: int = 3, width: int = 96, height: int = 96,
                       seed: int = 0, name: Optional[str] = None) -> DatasetManifest:
    """Write a synthetic stereo dataset (PPM pairs + manifest.csv) and return its manifest.

    Per scene: one pristine pair, and for each of two distortion kinds
    (additive Gaussian noise, box blur) every (left level, right level)
    combination in ``range(levels)`` except (0, 0). Labels follow a fixed
    analytic model: per-eye MOS = 100 - 90 * level / (levels - 1) and stereo
    MOS = min(l, r) + 0.25 * |l - r|.
    """
    if scenes < 2:
        raise ValueError(f"need at least 2 scenes, got {scenes}")
    if levels < 2:
        raise ValueError(f"need at least 2 distortion levels, got {levels}")
    if width < PATCH_SIZE or height < PATCH_SIZE:
        raise ValueError(f"image size {width}x{height} is below the {PATCH_SIZE}x{PATCH_SIZE} patch size")
    name = name or f"synth{seed}"
    if not _ID_RE.match(name):
        raise ValueError(f"dataset name {name!r} must match [A-Za-z0-9_-]+")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    level_max = levels - 1
    samples = []
    for si in range(scenes):
        scene_rng = np.random.default_rng([seed, si])
        disparity = int(scene_rng.integers(1, MAX_DISPARITY + 1))
        base = _scene(scene_rng, height, width + disparity)
        left_view, right_view = base[:, disparity:], base[:, :width]
        ref = f"{name}_scene{si:02d}"
        variants = [("pristine", 0, 0)]
        for kind in ("awgn", "gblur"):
            variants += [(kind, a, b) for a in range(levels) for b in range(levels) if (a, b) != (0, 0)]
        for kind, ll, lr in variants:
            sid = f"{ref}_{kind}_{ll}_{lr}"
            kind_idx = ("pristine", "awgn", "gblur").index(kind)
            noise_rng = np.random.default_rng([seed, si, kind_idx, ll, lr])
            left = _to_u8(_distort(left_view, kind, ll, noise_rng))
            right = _to_u8(_distort(right_view, kind, lr, noise_rng))
            lp, rp = img_dir / f"{sid}_L.ppm", img_dir / f"{sid}_R.ppm"
            encode_ppm(lp, left)
            encode_ppm(rp, right)
            ml, mr = synthetic_mos(ll, level_max), synthetic_mos(lr, level_max)
            samples.append(StereoSample(
                id=sid, left_path=lp, right_path=rp,
                mos_left=ml, mos_right=mr, mos_stereo=synthetic_stereo_mos(ml, mr),
                reference_id=ref, distortion_type=kind,
                level_left=float(ll), level_right=float(lr),
            ))
    manifest_path = out_dir / "manifest.csv"
    manifest = DatasetManifest(name=str(manifest_path.resolve()), samples=tuple(samples), root=out_dir)
    write_manifest(manifest_path, manifest)
    return manifest
