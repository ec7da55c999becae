"""Scene ingestion, band reduction, patch extraction, stratified splits, and
a synthetic-scene generator for desk-scale experiments.

A scene lives on disk as a directory: ``scene.json`` header plus raw
little-endian float32 band-major radiance and uint16 labels (0 = unlabeled,
1..K = classes).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import NumericsError

SCENE_HEADER = "scene.json"


@dataclass
class HsiCube:
    """A hyperspectral scene: radiance (bands, H, W) plus a label raster."""

    data: np.ndarray       # (bands, H, W) float
    labels: np.ndarray     # (H, W) int, 0 = unlabeled
    class_names: list[str]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.data.ndim != 3:
            raise ValueError(f"radiance must be (bands, H, W), got shape {self.data.shape}")
        if self.labels.shape != self.data.shape[1:]:
            raise ValueError(
                f"labels {self.labels.shape} do not match scene extent {self.data.shape[1:]}"
            )
        k = len(self.class_names)
        if self.labels.min() < 0 or self.labels.max() > k:
            raise ValueError(
                f"labels must lie in [0, {k}], found range "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def class_count(self) -> int:
        return len(self.class_names)


def save_scene(cube: HsiCube, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "bands": cube.bands,
        "height": cube.data.shape[1],
        "width": cube.data.shape[2],
        "classes": list(cube.class_names),
        "dtype": "f32le",
        "data_file": "data.bin",
        "labels_file": "labels.bin",
    }
    (directory / SCENE_HEADER).write_text(json.dumps(header, indent=2) + "\n")
    cube.data.astype("<f4").tofile(directory / "data.bin")
    cube.labels.astype("<u2").tofile(directory / "labels.bin")
    return directory


def load_scene(directory) -> HsiCube:
    directory = Path(directory)
    header_path = directory / SCENE_HEADER
    if not header_path.exists():
        raise FileNotFoundError(f"no {SCENE_HEADER} in {directory}")
    header = json.loads(header_path.read_text())
    if header.get("dtype") != "f32le":
        raise ValueError(f"unsupported scene dtype {header.get('dtype')!r}")
    shape = (header["bands"], header["height"], header["width"])
    data = np.fromfile(directory / header["data_file"], dtype="<f4").reshape(shape)
    labels = np.fromfile(directory / header["labels_file"], dtype="<u2").reshape(shape[1:])
    return HsiCube(data=data, labels=labels, class_names=list(header["classes"]))


def normalize_bands(cube: HsiCube) -> HsiCube:
    """Min-max scale every band to [0, 1]; constant bands map to zero."""
    scaled = np.empty_like(cube.data)
    for b in range(cube.bands):
        lo, hi = cube.data[b].min(), cube.data[b].max()
        scaled[b] = 0.0 if hi == lo else (cube.data[b] - lo) / (hi - lo)
    return HsiCube(data=scaled, labels=cube.labels.copy(), class_names=list(cube.class_names))


# ---------------------------------------------------------------------------
# band reduction: deflated power iteration on the pixel covariance
# ---------------------------------------------------------------------------

@dataclass
class PcaModel:
    mean: np.ndarray                 # (bands,)
    components: np.ndarray           # (bands, c), orthonormal columns
    explained_variance: np.ndarray   # (c,), non-increasing

    def __post_init__(self):
        gram = self.components.T @ self.components
        if np.max(np.abs(gram - np.eye(self.components.shape[1]))) > 1e-8:
            raise ValueError("component columns are not orthonormal")
        diffs = np.diff(self.explained_variance)
        if diffs.size and diffs.max() > 1e-9:
            raise ValueError("explained variances must be non-increasing")

    def transform(self, pixels: np.ndarray) -> np.ndarray:
        """Project (N, bands) pixels onto the components."""
        return (pixels - self.mean) @ self.components

    def transform_cube(self, data: np.ndarray) -> np.ndarray:
        """Project a (bands, H, W) scene to (c, H, W)."""
        bands, height, width = data.shape
        flat = data.reshape(bands, height * width).T
        return self.transform(flat).T.reshape(-1, height, width)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "PcaModel":
        return cls(
            mean=np.asarray(payload["mean"], dtype=np.float64),
            components=np.asarray(payload["components"], dtype=np.float64),
            explained_variance=np.asarray(payload["explained_variance"], dtype=np.float64),
        )


def fit_pca(cube: HsiCube, components: int, tol: float = 1e-10,
            max_iter: int = 10_000, seed: int = 0) -> PcaModel:
    """Top eigenpairs of the population pixel covariance by power iteration
    with deflation; component signs fixed so the largest-magnitude entry is
    positive.
    """
    bands = cube.bands
    if not 1 <= components <= bands:
        raise ValueError(f"component count {components} outside [1, {bands}]")
    pixels = cube.data.reshape(bands, -1).T
    if pixels.shape[0] < components + 1:
        raise ValueError(
            f"need at least {components + 1} pixels to fit {components} components"
        )
    mean = pixels.mean(axis=0)
    centered = pixels - mean
    cov = centered.T @ centered / pixels.shape[0]

    rng = np.random.default_rng(seed)
    deflated = cov.copy()
    vecs = np.zeros((bands, components))
    vals = np.zeros(components)
    for j in range(components):
        vec = rng.normal(size=bands)
        vec -= vecs[:, :j] @ (vecs[:, :j].T @ vec)
        vec /= np.linalg.norm(vec)
        converged = False
        for _ in range(max_iter):
            nxt = deflated @ vec
            nxt -= vecs[:, :j] @ (vecs[:, :j].T @ nxt)  # re-orthogonalize against found pairs
            norm = np.linalg.norm(nxt)
            if norm < 1e-30:
                converged = True  # remaining spectrum is numerically zero
                break
            nxt /= norm
            delta = min(np.linalg.norm(nxt - vec), np.linalg.norm(nxt + vec))
            vec = nxt
            if delta < tol:
                converged = True
                break
        lam = float(vec @ deflated @ vec)
        if not converged:
            residual = float(np.linalg.norm(deflated @ vec - lam * vec))
            raise NumericsError(
                f"power iteration for component {j} did not converge within "
                f"{max_iter} iterations (residual {residual:.3e}, tolerance {tol:.1e})"
            )
        vecs[:, j] = vec
        vals[j] = lam
        deflated -= lam * np.outer(vec, vec)

    for j in range(components):
        peak = np.argmax(np.abs(vecs[:, j]))
        if vecs[peak, j] < 0:
            vecs[:, j] = -vecs[:, j]
    return PcaModel(mean=mean, components=vecs, explained_variance=vals)


# ---------------------------------------------------------------------------
# patches and splits
# ---------------------------------------------------------------------------

@dataclass
class Patches:
    """One patch per labeled pixel, in row-major scan order.

    ``class_ids`` keep the raster's 1..K convention; training subtracts one.
    """

    cubes: np.ndarray      # (N, c, w, w)
    class_ids: np.ndarray  # (N,)
    pixels: np.ndarray     # (N, 2) raster coordinates (row, col)


def extract_patches(data: np.ndarray, labels: np.ndarray, width: int) -> Patches:
    """Cut a mirror-padded ``width x width`` patch around every labeled pixel.

    The patch center sits at offset (width-1)//2, so even widths bias one
    pixel toward the top-left; mirror padding reflects without repeating the
    border pixel.
    """
    if width < 1:
        raise ValueError(f"patch width must be >= 1, got {width}")
    channels, height, w_ext = data.shape
    pad = width // 2
    center = (width - 1) // 2
    if pad > 0 and (height < pad + 1 or w_ext < pad + 1):
        raise ValueError(
            f"scene {height}x{w_ext} too small to mirror-pad by {pad} pixels"
        )
    padded = np.pad(data, ((0, 0), (pad, pad), (pad, pad)), mode="reflect") if pad else data
    rows, cols = np.nonzero(labels > 0)
    count = rows.size
    cubes = np.empty((count, channels, width, width))
    for idx in range(count):
        top = rows[idx] + pad - center
        left = cols[idx] + pad - center
        cubes[idx] = padded[:, top:top + width, left:left + width]
    return Patches(
        cubes=cubes,
        class_ids=labels[rows, cols].astype(np.int64),
        pixels=np.stack([rows, cols], axis=1),
    )


@dataclass
class SplitSpec:
    """Per-class training-sample budget and the seed that draws it."""

    per_class: int
    seed: int = 0

    def __post_init__(self):
        if self.per_class < 1:
            raise ValueError(f"per-class count must be >= 1, got {self.per_class}")


def stratified_split(class_ids: np.ndarray, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint, exhaustive train/test indices with exactly ``per_class``
    training samples drawn per class without replacement."""
    class_ids = np.asarray(class_ids)
    rng = np.random.default_rng(spec.seed)
    train: list[np.ndarray] = []
    test: list[np.ndarray] = []
    for label in np.unique(class_ids):
        members = np.flatnonzero(class_ids == label)
        if members.size < spec.per_class + 1:
            raise ValueError(
                f"class {label} has only {members.size} samples; "
                f"needs at least {spec.per_class + 1}"
            )
        picked = rng.permutation(members.size)
        train.append(members[picked[: spec.per_class]])
        test.append(members[picked[spec.per_class:]])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def synth_scene(classes: int, bands: int, height: int, width: int,
                noise: float, seed: int) -> HsiCube:
    """Fully labeled scene of rectangular tiles cycling through the classes;
    every class gets a smooth random spectral signature and pixels add white
    Gaussian noise on top."""
    if classes < 2 or bands < 1:
        raise ValueError("need at least 2 classes and 1 band")
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.0, 1.0, bands)
    signatures = np.zeros((classes, bands))
    for k in range(classes):
        spectrum = np.zeros(bands)
        for _ in range(3):
            amp = rng.uniform(0.3, 1.0)
            freq = rng.uniform(0.5, 2.5)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            spectrum += amp * np.sin(2.0 * np.pi * freq * grid + phase)
        lo, hi = spectrum.min(), spectrum.max()
        span = hi - lo if hi > lo else 1.0
        signatures[k] = 0.2 + 0.6 * (spectrum - lo) / span

    tile_h = max(1, height // 4)
    tile_w = max(1, width // 4)
    labels = np.zeros((height, width), dtype=np.int64)
    for row in range(height):
        for col in range(width):
            tile = (row // tile_h) * ((width + tile_w - 1) // tile_w) + (col // tile_w)
            labels[row, col] = tile % classes + 1
    data = signatures[labels - 1].transpose(2, 0, 1).copy()
    if noise > 0:
        data += rng.normal(scale=noise, size=data.shape)
    names = [f"class_{k + 1}" for k in range(classes)]
    return HsiCube(data=data, labels=labels, class_names=names)
