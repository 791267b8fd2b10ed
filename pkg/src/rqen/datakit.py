"""Tracklet datasets on disk, a synthetic occlusion generator, and probe/gallery splits.

On-disk layout::

    <root>/manifest.tsv              tracklet_id, identity, camera, frame_path
    <root>/images/<camera>/<identity>/<tracklet>/<frame_index>.ppm
    <root>/landmarks.tsv             optional
    <root>/occlusion_truth.tsv       optional; frame_path, region, 0/1
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pnm
from .regions import DEFAULT_LAYOUT, N_LANDMARKS, REGION_NAMES, LandmarkSet, write_landmarks

MANIFEST_HEADER = ("tracklet_id", "identity", "camera", "frame_path")
TRUTH_HEADER = ("frame_path", "region", "occluded")
PROTOCOLS = ("fifty-fifty-cross-camera", "scene-split")


class DataError(ValueError):
    pass


@dataclass
class Tracklet:
    tracklet_id: str
    identity: str
    camera: str
    frames: np.ndarray  # (n, H, W, 3) float64 in [0, 1]
    frame_paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise DataError(f"tracklet {self.tracklet_id}: need at least one (H, W, C) frame")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class DatasetManifest:
    root: Path
    rows: list[tuple[str, str, str, str]]
    landmarks: Path | None = None
    truth: Path | None = None

    @property
    def path(self) -> Path:
        return self.root / "manifest.tsv"

    def tracklet_ids(self) -> list[str]:
        return list(dict.fromkeys(r[0] for r in self.rows))


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.tsv"
    if not path.exists():
        raise DataError(f"{path}: manifest not found")
    root = path.parent
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != MANIFEST_HEADER:
            raise DataError(f"{path}:1: expected header {MANIFEST_HEADER}")
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 4 or not all(fields):
                raise DataError(f"{path}:{lineno}: expected 4 non-empty tab-separated fields")
            rows.append((fields[0], fields[1], fields[2], fields[3]))
    if not rows:
        raise DataError(f"{path}: manifest has no rows")
    lm = root / "landmarks.tsv"
    truth = root / "occlusion_truth.tsv"
    return DatasetManifest(root, rows, lm if lm.exists() else None, truth if truth.exists() else None)


def load_dataset(path: str | Path) -> list[Tracklet]:
    """Load every tracklet of a manifest; frames keep manifest row order."""
    manifest = read_manifest(path)
    groups: dict[str, list[tuple[int, tuple[str, str, str, str]]]] = {}
    for lineno, row in enumerate(manifest.rows, 2):
        groups.setdefault(row[0], []).append((lineno, row))
    out = []
    shape = None
    for tid, rows in groups.items():
        identity, camera = rows[0][1][1], rows[0][1][2]
        frames, paths = [], []
        for lineno, (_, ident, cam, fpath) in rows:
            where = f"{manifest.path}:{lineno}"
            if (ident, cam) != (identity, camera):
                raise DataError(f"{where}: tracklet {tid} mixes identities or cameras")
            full = manifest.root / fpath
            if not full.exists():
                raise DataError(f"{where}: missing image {full}")
            try:
                img = pnm.to_float(pnm.read(full))
            except pnm.ImageFormatError as exc:
                raise DataError(f"{where}: {exc}") from None
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise DataError(f"{where}: image {fpath} is {img.shape}, expected {shape}")
            frames.append(img)
            paths.append(fpath)
        out.append(Tracklet(tid, identity, camera, np.stack(frames), paths))
    return out


def read_truth(path: str | Path) -> dict[str, dict[str, bool]]:
    """frame_path -> region -> occluded."""
    out: dict[str, dict[str, bool]] = {}
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            fpath, region, flag = line.rstrip("\n").split("\t")
            out.setdefault(fpath, {})[region] = flag == "1"
    return out


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthConfig:
    identities: int = 10
    cameras: int = 2
    tracklets_per_camera: int = 1
    frames: int = 16
    height: int = 16
    width: int = 8
    occlude_region: str | None = None
    occlude_fraction: float = 0.0
    occluder_intensity: float = 0.8
    noise: float = 0.04
    seed: int = 0

    def __post_init__(self):
        for name in ("identities", "cameras", "tracklets_per_camera", "frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.height < 7 or self.width < 2:
            raise ValueError("synthetic frames must be at least 7x2")
        if not 0.0 <= self.occlude_fraction <= 1.0:
            raise ValueError("occlusion fraction must lie in [0, 1]")
        if self.occlude_region not in (None, *REGION_NAMES):
            raise ValueError(f"occluded region must be one of {REGION_NAMES}")
        if not 0.0 <= self.occluder_intensity <= 1.0 or self.noise < 0:
            raise ValueError("occluder intensity must lie in [0, 1] and noise be non-negative")


@dataclass
class SynthFrame:
    path: str
    image: np.ndarray  # uint8 (H, W, 3)
    occluded: dict[str, bool]
    landmarks: LandmarkSet


# band templates for the 14 joints: y as fraction of height
# 1-8 head/shoulders/arms, 9-10 hips, 11-12 knees, 13-14 ankles
_JOINT_Y = np.array([0.06, 0.12, 0.15, 0.15, 0.19, 0.19, 0.245, 0.25214, 5.5 / 14, 5.5 / 14, 0.75, 0.75, 13.5 / 14, 13.5 / 14])
_JOINT_X = np.array([0.5, 0.5, 0.3, 0.7, 0.2, 0.8, 0.15, 0.85, 0.4, 0.6, 0.4, 0.6, 0.4, 0.6])

# the upper and lower bands draw solid colors from a small shared palette, so
# identities collide there; only the middle band is drawn freely
_PALETTE_SIZE = 3


def _band_texture(rng: np.random.Generator, rows: int, width: int, colors: np.ndarray, kind: int) -> np.ndarray:
    band = np.empty((rows, width, 3))
    a, b = colors
    if kind == 0:
        band[:] = a
    elif kind == 1:
        band[:] = a
        band[1::2] = b
    else:
        band[:] = a
        band[:, width // 2 :] = b
    return band


def _identity_appearance(rng, height, width, palette) -> np.ndarray:
    img = np.empty((height, width, 3))
    for r, (lo, hi) in zip(REGION_NAMES, DEFAULT_LAYOUT.rows(height)):
        if r == "m":
            colors = rng.uniform(0.1, 0.9, (2, 3))
            kind = int(rng.integers(0, 3))
        else:
            colors = palette[rng.integers(0, len(palette), 2)]
            kind = 0
        img[lo:hi] = _band_texture(rng, hi - lo, width, colors, kind)
    return img


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = img.shape[:2]
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    return padded[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]


def occluder_pattern(config: SynthConfig) -> np.ndarray:
    """Shared binary block pattern (H, W) used for every occluded region."""
    rng = np.random.default_rng([config.seed, 0x0CC1])
    blocks = rng.integers(0, 2, (math.ceil(config.height / 2), math.ceil(config.width / 2)))
    blocks[0, 0], blocks[0, -1] = 1, 0
    return np.kron(blocks, np.ones((2, 2), dtype=int))[: config.height, : config.width].astype(bool)


def synth_frames(config: SynthConfig) -> list[tuple[str, str, str, list[SynthFrame]]]:
    """Generate all tracklets in memory as (tracklet_id, identity, camera, frames)."""
    rng = np.random.default_rng(config.seed)
    h, w = config.height, config.width
    palette = rng.uniform(0.1, 0.9, (_PALETTE_SIZE, 3))
    gains = rng.uniform(0.8, 1.2, (config.cameras, 3))
    offsets = rng.uniform(-0.05, 0.05, (config.cameras, 3))
    pattern = occluder_pattern(config)[:, :, None]
    looks = [_identity_appearance(rng, h, w, palette) for _ in range(config.identities)]
    rows = dict(zip(REGION_NAMES, DEFAULT_LAYOUT.rows(h)))
    n_occ = round(config.occlude_fraction * config.frames) if config.occlude_region else 0

    out = []
    for ident in range(config.identities):
        id_name = f"id{ident:03d}"
        for cam in range(config.cameras):
            cam_name = f"c{cam}"
            for t in range(config.tracklets_per_camera):
                tid = f"{id_name}_{cam_name}_t{t}"
                occluded = np.zeros(config.frames, dtype=bool)
                occluded[rng.permutation(config.frames)[:n_occ]] = True
                # one occluding object per tracklet: shared pattern, tracklet-specific tint
                tint = rng.uniform(0.2, 1.0, 3)
                occ = np.where(pattern, tint, tint * (1.0 - config.occluder_intensity))
                frames = []
                for f in range(config.frames):
                    dy, dx = (int(v) for v in rng.integers(-1, 2, 2))
                    img = _shift(looks[ident], dy, dx) * rng.uniform(0.9, 1.1)
                    img = img * gains[cam] + offsets[cam]
                    img = img + rng.normal(0.0, config.noise, img.shape)
                    flags = {r: False for r in REGION_NAMES}
                    if occluded[f]:
                        lo, hi = rows[config.occlude_region]
                        img[lo:hi] = occ[lo:hi]
                        flags[config.occlude_region] = True
                    img8 = pnm.to_uint8(img)
                    path = f"images/{cam_name}/{id_name}/{tid}/{f:04d}.ppm"
                    jy = rng.normal(0.0, 0.01, N_LANDMARKS) + dy / h
                    jx = rng.normal(0.0, 0.01, N_LANDMARKS) + dx / w
                    pts = np.clip(np.stack([_JOINT_X + jx, _JOINT_Y + jy], axis=1), 0.0, 1.0)
                    valid = np.ones(N_LANDMARKS, dtype=bool)
                    if occluded[f]:
                        lo, hi = rows[config.occlude_region]
                        valid &= ~((pts[:, 1] * h >= lo) & (pts[:, 1] * h < hi))
                    frames.append(SynthFrame(path, img8, flags, LandmarkSet(path, pts, valid)))
                out.append((tid, id_name, cam_name, frames))
    return out


def synth_tracklets(config: SynthConfig) -> tuple[list[Tracklet], dict[str, dict[str, bool]]]:
    """In-memory equivalent of generating and loading a synthetic dataset."""
    tracklets, truth = [], {}
    for tid, ident, cam, frames in synth_frames(config):
        arr = np.stack([pnm.to_float(f.image) for f in frames])
        tracklets.append(Tracklet(tid, ident, cam, arr, [f.path for f in frames]))
        for f in frames:
            truth[f.path] = dict(f.occluded)
    return tracklets, truth


def synth_generate(config: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"{root}: output directory is not writable ({exc})") from None
    rows, truth_lines, landmarks = [], [], []
    for tid, ident, cam, frames in synth_frames(config):
        for f in frames:
            full = root / f.path
            full.parent.mkdir(parents=True, exist_ok=True)
            pnm.write(full, f.image)
            rows.append((tid, ident, cam, f.path))
            truth_lines += [f"{f.path}\t{r}\t{int(f.occluded[r])}" for r in REGION_NAMES]
            landmarks.append(f.landmarks)
    with open(root / "manifest.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(MANIFEST_HEADER) + "\n")
        fh.writelines("\t".join(r) + "\n" for r in rows)
    with open(root / "occlusion_truth.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(TRUTH_HEADER) + "\n")
        fh.writelines(line + "\n" for line in truth_lines)
    write_landmarks(root / "landmarks.tsv", landmarks)
    return DatasetManifest(root, rows, root / "landmarks.tsv", root / "occlusion_truth.tsv")


# ---------------------------------------------------------------------------
# protocols


@dataclass
class Split:
    train: list[Tracklet]
    probe: list[Tracklet]
    gallery: list[Tracklet]

    @property
    def test_identities(self) -> set[str]:
        return {t.identity for t in self.probe} | {t.identity for t in self.gallery}


def scene_of(camera: str) -> str:
    """Scene prefix of a camera name such as ``s1-view2``; plain names form one scene."""
    return camera.split("-", 1)[0] if "-" in camera else ""


def _probe_gallery(test: Sequence[Tracklet], probe_camera: str) -> tuple[list[Tracklet], list[Tracklet]]:
    probe = [t for t in test if t.camera == probe_camera]
    gallery = [t for t in test if t.camera != probe_camera]
    both = {t.identity for t in probe} & {t.identity for t in gallery}
    return [t for t in probe if t.identity in both], [t for t in gallery if t.identity in both]


def split_protocol(
    tracklets: Sequence[Tracklet],
    protocol: str = "fifty-fifty-cross-camera",
    seed: int = 0,
    probe_camera: str | None = None,
    test_scene: str | None = None,
) -> Split:
    """Identity-disjoint train/test split with cross-camera probe and gallery.

    ``fifty-fifty-cross-camera`` draws half of the identities (rounded down) for
    training.  ``scene-split`` tests on every identity seen in ``test_scene``
    and trains on the remaining scenes.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    cameras = sorted({t.camera for t in tracklets})
    if protocol == "fifty-fifty-cross-camera":
        if len(cameras) < 2:
            raise DataError("cross-camera protocol needs at least two cameras")
        identities = sorted({t.identity for t in tracklets})
        if len(identities) < 2:
            raise DataError("need at least two identities to split")
        order = np.random.default_rng(seed).permutation(len(identities))
        train_ids = {identities[i] for i in order[: len(identities) // 2]}
        train = [t for t in tracklets if t.identity in train_ids]
        test = [t for t in tracklets if t.identity not in train_ids]
        probe_camera = probe_camera or cameras[0]
    else:
        scenes = sorted({scene_of(c) for c in cameras})
        test_scene = test_scene if test_scene is not None else scenes[0]
        test = [t for t in tracklets if scene_of(t.camera) == test_scene]
        test_ids = {t.identity for t in test}
        train = [t for t in tracklets if scene_of(t.camera) != test_scene and t.identity not in test_ids]
        test_cams = sorted({t.camera for t in test})
        if len(test_cams) < 2:
            raise DataError(f"scene {test_scene!r} needs at least two cameras")
        probe_camera = probe_camera or test_cams[0]
    probe, gallery = _probe_gallery(test, probe_camera)
    if not probe or not gallery:
        raise DataError("split left an empty probe or gallery set")
    return Split(train, probe, gallery)
