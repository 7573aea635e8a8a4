"""Scene bundles, dataset manifests, patch tiling and the synthetic scene generator.

Grids: image and LCZ labels at 10 m, HSE density at 20 m (half resolution).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import core, mtlt
from .core import IGNORE, ConfigError, FormatError, SampleBatch, ValidationError

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")

# LCZ rule thresholds on neighbourhood built coverage
COMPACT_COVERAGE = 0.65
OPEN_COVERAGE = 0.3
SPARSE_COVERAGE = 0.05

NOISE_SIGMA = 0.02
_SUB = 4  # sub-cells per 10 m cell edge (2.5 m rasterization grid)
_LOT = 4  # cells per building lot edge


@dataclass
class SceneBundle:
    image: np.ndarray  # [bands, H, W] float32
    hse_ref: np.ndarray  # [H/2, W/2] float32
    lcz_ref: np.ndarray  # [H, W] uint8
    seed: int = 0
    coverage: Optional[np.ndarray] = None  # [H, W] built fraction per 10 m cell

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    def save(self, directory) -> dict:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        mtlt.write(d / "image.mtlt", self.image)
        mtlt.write(d / "hse.mtlt", self.hse_ref)
        mtlt.write(d / "lcz.mtlt", self.lcz_ref)
        return {"image": str(d / "image.mtlt"), "hse": str(d / "hse.mtlt"), "lcz": str(d / "lcz.mtlt")}

    @classmethod
    def load(cls, image_path, hse_path, lcz_path, seed: int = 0) -> "SceneBundle":
        image = mtlt.read(image_path)
        hse = mtlt.read(hse_path)
        lcz = mtlt.read(lcz_path)
        if image.ndim != 3 or hse.shape != (image.shape[1] // 2, image.shape[2] // 2):
            raise FormatError(f"inconsistent scene dims: image {image.shape}, hse {hse.shape}", 7)
        if lcz.shape != image.shape[1:] or lcz.dtype != np.uint8:
            raise FormatError(f"LCZ grid {lcz.shape}/{lcz.dtype} does not match image", 7)
        return cls(image=image.astype(np.float32), hse_ref=hse.astype(np.float32), lcz_ref=lcz, seed=seed)


def normalize(image_raw) -> np.ndarray:
    """Sentinel-2 L2A digital numbers to reflectance in [0, 1]."""
    return np.clip(np.asarray(image_raw, dtype=np.float32) / 10000.0, 0.0, 1.0)


# --------------------------------------------------------------------------
# Synthetic scenes
# --------------------------------------------------------------------------

# Reflectance curves sampled at the ten 10/20 m Sentinel-2 bands
# (B2, B3, B4, B5, B6, B7, B8, B8A, B11, B12).
_MATERIALS = {
    "concrete": [0.20, 0.22, 0.24, 0.26, 0.27, 0.28, 0.29, 0.29, 0.31, 0.28],
    "tile": [0.07, 0.09, 0.17, 0.21, 0.23, 0.25, 0.26, 0.27, 0.33, 0.27],
    "metal": [0.34, 0.36, 0.37, 0.38, 0.38, 0.39, 0.39, 0.40, 0.36, 0.33],
    "asphalt": [0.07, 0.08, 0.09, 0.10, 0.10, 0.11, 0.11, 0.12, 0.13, 0.12],
    "grass": [0.04, 0.08, 0.05, 0.12, 0.30, 0.38, 0.42, 0.43, 0.24, 0.13],
    "trees": [0.02, 0.05, 0.03, 0.08, 0.22, 0.29, 0.32, 0.33, 0.15, 0.07],
    "shrub": [0.05, 0.08, 0.08, 0.13, 0.22, 0.26, 0.28, 0.29, 0.26, 0.17],
    "crops": [0.05, 0.09, 0.07, 0.16, 0.34, 0.44, 0.48, 0.49, 0.28, 0.16],
    "rock": [0.15, 0.17, 0.19, 0.20, 0.21, 0.22, 0.22, 0.23, 0.25, 0.22],
    "soil": [0.10, 0.14, 0.19, 0.23, 0.26, 0.28, 0.29, 0.30, 0.38, 0.33],
    "water": [0.06, 0.05, 0.03, 0.02, 0.01, 0.01, 0.01, 0.01, 0.005, 0.003],
}

# class -> (roof material, ground material, shadow factor)
_CLASS_MATERIALS = {
    core.COMPACT_HIGH: ("concrete", "asphalt", 0.60),
    core.COMPACT_MID: ("concrete", "asphalt", 0.78),
    core.COMPACT_LOW: ("tile", "asphalt", 0.92),
    core.OPEN_HIGH: ("concrete", "grass", 0.65),
    core.OPEN_MID: ("concrete", "grass", 0.82),
    core.OPEN_LOW: ("tile", "grass", 0.95),
    core.LIGHTWEIGHT_LOW: ("metal", "soil", 1.0),
    core.LARGE_LOW: ("metal", "asphalt", 0.97),
    core.SPARSELY_BUILT: ("tile", "trees", 1.0),
    core.HEAVY_INDUSTRY: ("metal", "soil", 0.9),
    core.DENSE_TREES: ("concrete", "trees", 1.0),
    core.SCATTERED_TREES: ("concrete", "shrub", 1.0),
    core.BUSH: ("concrete", "crops", 0.9),
    core.LOW_PLANTS: ("concrete", "grass", 1.0),
    core.BARE_ROCK_PAVED: ("concrete", "rock", 1.0),
    core.BARE_SOIL: ("concrete", "soil", 1.0),
    core.WATER: ("concrete", "water", 1.0),
}


def _band_table(name: str, bands: int) -> np.ndarray:
    curve = np.asarray(_MATERIALS[name])
    if bands == curve.size:
        return curve
    return np.interp(np.linspace(0, curve.size - 1, bands), np.arange(curve.size), curve)


def _value_noise(rng: np.random.Generator, shape, scales=(48, 12), weights=(0.75, 0.25)) -> np.ndarray:
    """Smooth noise in [0, 1]: bicubic-upsampled random lattices summed over octaves."""
    h, w = shape
    out = np.zeros(shape)
    for scale, weight in zip(scales, weights):
        gh, gw = h // scale + 3, w // scale + 3
        lattice = rng.random((gh, gw))
        up = ndimage.zoom(lattice, scale, order=3, mode="nearest")
        oy, ox = rng.integers(0, scale, size=2)
        out += weight * up[oy : oy + h, ox : ox + w]
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros(shape)


def _rasterize_buildings(rng, target, industrial, large) -> np.ndarray:
    """Built mask on the 2.5 m grid, with lot coverage following ``target``."""
    h, w = target.shape
    fine = np.zeros((h * _SUB, w * _SUB), dtype=bool)
    lot = _LOT * _SUB
    for ly in range(0, h, _LOT):
        for lx in range(0, w, _LOT):
            cells = (slice(ly, ly + _LOT), slice(lx, lx + _LOT))
            t = float(target[cells].mean())
            if t <= 0.02:
                continue
            y0, x0 = ly * _SUB, lx * _SUB
            if industrial[cells].mean() > 0.5 or large[cells].mean() > 0.5:
                side = min(lot, int(round(np.sqrt(t) * lot)))
                subs = [(y0, x0, lot, side)]
            else:
                half = lot // 2
                side = min(half, int(round(np.sqrt(t) * half)))
                subs = [(y0 + dy, x0 + dx, half, side) for dy in (0, half) for dx in (0, half)]
            for sy, sx, extent, side in subs:
                if side <= 0:
                    continue
                oy, ox = rng.integers(0, extent - side + 1, size=2)
                fine[sy + oy : sy + oy + side, sx + ox : sx + ox + side] = True
    # road lattice inside settlements, 10 m wide every 160 m
    road = np.zeros_like(fine)
    spacing = 16 * _SUB
    for k in range(_SUB):
        road[k::spacing, :] = True
        road[:, k::spacing] = True
    settled = np.kron(target > SPARSE_COVERAGE, np.ones((_SUB, _SUB), dtype=bool))
    return fine | (road & settled)


def _height_class(height: np.ndarray, base: int) -> np.ndarray:
    # base is the high-rise index; mid and low follow it
    return np.where(height > 0.62, base, np.where(height > 0.38, base + 1, base + 2))


def generate_scene(
    seed: int, H: int = 256, W: int = 256, bands: int = 10, urban_fraction: float = 0.5
) -> SceneBundle:
    """Procedural scene with exactly consistent HSE density and LCZ references.

    Both references derive from one rasterized building/road set, so the
    2x2 block average of the per-cell coverage is the HSE map and LCZ
    classes follow the neighbourhood coverage.
    """
    if H < 20 or W < 20 or H % 2 or W % 2:
        raise ConfigError(f"scene dims must be even and at least 20, got {(H, W)}")
    if bands < 1:
        raise ConfigError("bands >= 1")
    if not 0.0 <= urban_fraction <= 1.0:
        raise ConfigError("urban_fraction in [0, 1]")
    rng = np.random.default_rng(seed)
    shape = (H, W)
    density = _value_noise(rng, shape)
    height = _value_noise(rng, shape, scales=(32, 8))
    vegetation = _value_noise(rng, shape, scales=(40, 10))
    waterness = _value_noise(rng, shape, scales=(64, 16))
    zones = _value_noise(rng, shape, scales=(40,), weights=(1.0,))

    water = waterness > 0.82
    if urban_fraction > 0:
        target = np.clip((density - (1.0 - urban_fraction)) / 0.45, 0.0, 1.0)
    else:
        target = np.zeros(shape)
    target[ndimage.binary_dilation(water, iterations=3)] = 0.0
    industrial = (zones > 0.8) & (target > 0.2)
    large = (zones < 0.15) & (target > 0.2)

    fine = _rasterize_buildings(rng, target, industrial, large)
    coverage = fine.reshape(H, _SUB, W, _SUB).mean(axis=(1, 3)).astype(np.float32)
    hse = fine.reshape(H // 2, 2 * _SUB, W // 2, 2 * _SUB).mean(axis=(1, 3)).astype(np.float32)

    neigh = ndimage.uniform_filter(coverage.astype(np.float64), size=5, mode="nearest")
    lcz = np.full(shape, core.BARE_ROCK_PAVED, dtype=np.uint8)
    lcz[vegetation > 0.1] = core.BARE_SOIL
    lcz[vegetation > 0.2] = core.LOW_PLANTS
    lcz[vegetation > 0.42] = core.BUSH
    lcz[vegetation > 0.55] = core.SCATTERED_TREES
    lcz[vegetation > 0.7] = core.DENSE_TREES
    lcz[water] = core.WATER

    # complete 100 m blocks that are mostly built count as compact as a whole,
    # so they never carry natural or open labels
    by, bx = H // 10, W // 10
    block_mean = hse[: by * 5, : bx * 5].reshape(by, 5, bx, 5).mean(axis=(1, 3))
    dense_block = np.zeros(shape, dtype=bool)
    dense_block[: by * 10, : bx * 10] = np.kron(block_mean >= COMPACT_COVERAGE, np.ones((10, 10), dtype=bool))

    built = (neigh > SPARSE_COVERAGE) | dense_block
    lcz[built] = core.SPARSELY_BUILT
    is_open = built & (neigh > OPEN_COVERAGE)
    lcz[is_open] = _height_class(height, core.OPEN_HIGH)[is_open]
    compact = (neigh > COMPACT_COVERAGE) | dense_block
    lcz[compact] = _height_class(height, core.COMPACT_HIGH)[compact]
    lcz[built & large] = core.LARGE_LOW
    lcz[built & industrial] = core.HEAVY_INDUSTRY

    image = _render_image(rng, lcz, coverage, bands)
    return SceneBundle(image=image, hse_ref=hse, lcz_ref=lcz, seed=int(seed), coverage=coverage)


def _render_image(rng, lcz, coverage, bands) -> np.ndarray:
    roof = np.zeros((core.NUM_LCZ_CLASSES, bands))
    ground = np.zeros_like(roof)
    shadow = np.ones(core.NUM_LCZ_CLASSES)
    for cls, (r, g, s) in _CLASS_MATERIALS.items():
        roof[cls], ground[cls], shadow[cls] = _band_table(r, bands), _band_table(g, bands), s
    cov = coverage[None].astype(np.float64)
    mix = cov * roof[lcz].transpose(2, 0, 1) + (1.0 - cov) * ground[lcz].transpose(2, 0, 1)
    mix *= shadow[lcz][None]
    mix += rng.normal(0.0, NOISE_SIGMA, size=mix.shape)
    return np.clip(mix, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# Tiling
# --------------------------------------------------------------------------


class Patch(NamedTuple):
    image: np.ndarray  # [bands, p, p]
    hse_ref: np.ndarray  # [p/2, p/2]
    lcz_ref: np.ndarray  # [p, p]
    origin: tuple


def tile_origins(length: int, patch: int, stride: int) -> list[int]:
    return list(range(0, length - patch + 1, stride))


def tile_scene(bundle: SceneBundle, patch: int = 128, stride: Optional[int] = None) -> list[Patch]:
    """Co-cropped patches in row-major order; partial edge patches are dropped."""
    stride = patch if stride is None else stride
    h, w = bundle.shape
    if patch < 2 or patch % 2:
        raise ConfigError("patch must be a positive even size")
    if stride < 1 or stride % 2:
        raise ConfigError("stride must be a positive even step (keeps the 20 m grid aligned)")
    if patch > h or patch > w:
        raise ConfigError(f"patch {patch} larger than scene {(h, w)}")
    out = []
    half = patch // 2
    for y in tile_origins(h, patch, stride):
        for x in tile_origins(w, patch, stride):
            out.append(
                Patch(
                    image=bundle.image[:, y : y + patch, x : x + patch],
                    hse_ref=bundle.hse_ref[y // 2 : y // 2 + half, x // 2 : x // 2 + half],
                    lcz_ref=bundle.lcz_ref[y : y + patch, x : x + patch],
                    origin=(y, x),
                )
            )
    return out


def collate(patches: Sequence[Patch]) -> SampleBatch:
    return SampleBatch(
        images=np.stack([p.image for p in patches]).astype(np.float32),
        hse_ref=np.stack([p.hse_ref for p in patches]).astype(np.float32),
        lcz_ref=np.stack([p.lcz_ref for p in patches]),
    )


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    scene_id: str
    image: str
    hse: str
    lcz: str
    split: str
    seed: int = 0


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION
    root: Optional[Path] = None

    def validate(self, check_files: bool = True) -> "DatasetManifest":
        seen: dict[str, str] = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValidationError(f"scene {e.scene_id}: unknown split {e.split!r}")
            for key in (e.scene_id, self.resolve(e.image)):
                prev = seen.get(str(key))
                if prev is not None and prev != e.split:
                    raise ValidationError(f"scene {e.scene_id} appears in splits {prev!r} and {e.split!r}")
                seen[str(key)] = e.split
            if check_files:
                for p in (e.image, e.hse, e.lcz):
                    if not self.resolve(p).exists():
                        raise ValidationError(f"missing file {p}")
        return self

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def load_scene(self, entry: ManifestEntry) -> SceneBundle:
        return SceneBundle.load(
            self.resolve(entry.image), self.resolve(entry.hse), self.resolve(entry.lcz), seed=entry.seed
        )

    def load_patches(self, split: str, patch: int, stride: Optional[int] = None) -> list[Patch]:
        out = []
        for e in self.split(split):
            out.extend(tile_scene(self.load_scene(e), patch, stride))
        return out

    def to_json(self) -> dict:
        return {
            "format_version": self.version,
            "config": self.config,
            "scenes": [
                {"id": e.scene_id, "image": e.image, "hse": e.hse, "lcz": e.lcz, "split": e.split, "seed": e.seed}
                for e in self.entries
            ],
        }

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest is not valid JSON: {exc.msg}", exc.pos) from exc
        if raw.get("format_version") != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest version {raw.get('format_version')}", 0)
        entries = [
            ManifestEntry(s["id"], s["image"], s["hse"], s["lcz"], s["split"], int(s.get("seed", 0)))
            for s in raw.get("scenes", [])
        ]
        m = cls(entries=entries, config=raw.get("config", {}), root=path.parent)
        return m.validate(check_files=check_files)


def write_synthetic_dataset(
    out_dir,
    seed: int,
    scenes: int,
    size: int,
    bands: int = 10,
    urban_fraction: float = 0.5,
    splits: Optional[Sequence[str]] = None,
) -> DatasetManifest:
    """Generate ``scenes`` bundles under ``out_dir`` and write ``manifest.json``.

    Without explicit ``splits`` the last scene is validation when there are
    at least two scenes, everything else is training.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if splits is None:
        splits = ["train"] * scenes
        if scenes >= 2:
            splits[-1] = "val"
    if len(splits) != scenes:
        raise ConfigError("one split per scene")
    seeds = np.random.SeedSequence(seed).generate_state(scenes)
    entries = []
    for i in range(scenes):
        bundle = generate_scene(int(seeds[i]), size, size, bands, urban_fraction)
        sid = f"scene_{i:03d}"
        bundle.save(out / sid)
        entries.append(
            ManifestEntry(sid, f"{sid}/image.mtlt", f"{sid}/hse.mtlt", f"{sid}/lcz.mtlt", splits[i], int(seeds[i]))
        )
    manifest = DatasetManifest(
        entries=entries,
        config={"seed": seed, "size": size, "bands": bands, "urban_fraction": urban_fraction},
        root=out,
    )
    manifest.save(out / "manifest.json")
    return manifest


__all__ = [
    "IGNORE",
    "SceneBundle",
    "Patch",
    "DatasetManifest",
    "ManifestEntry",
    "generate_scene",
    "tile_scene",
    "collate",
    "normalize",
    "write_synthetic_dataset",
]
