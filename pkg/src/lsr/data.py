"""Synthetic pseudo-volume corpus: generation, anomalies, augmentation, IO.

A pseudo-volume is a stack of 2-D slices of soft elliptical "organs" whose
radii and intensities vary smoothly with slice position (mapped to
[-0.5, 0.5]).  Volumes are normalized subject-wise to zero mean / unit
variance; synthetic anomalies are injected *after* normalization as additive
intensity deltas on a disk or square footprint, clamped to the volume's
pre-injection value range.

The on-disk corpus layout is a ``manifest.json`` plus one tensor file per
slice (and per anomaly mask) in the sibling ``slices/`` and ``masks/`` trees.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import affine_transform, gaussian_filter, map_coordinates
from scipy.special import expit

from .config import DataConfig, AugmentConfig, RunConfig, config_hash
from .errors import DataError, MissingDependencyError, ShapeError
from .formats import read_tensor, write_tensor
from .rng import numpy_rng

EDGE_SOFTNESS_PX = 0.8   # sigmoid width of organ boundaries, in pixels
NOISE_SIGMA = 0.02       # smooth texture field amplitude (pre-normalization)
NOISE_SMOOTH_PX = 3.0    # gaussian smoothing of the texture field


@dataclass(eq=False)
class PseudoVolume:
    """One synthetic subject: slices (n, side, side) and their positions."""

    subject_id: int
    slices: np.ndarray             # (n_slices, side, side) float64
    slice_positions: np.ndarray    # (n_slices,) in [-0.5, 0.5]

    def copy(self) -> "PseudoVolume":
        return PseudoVolume(self.subject_id, self.slices.copy(),
                            self.slice_positions.copy())


@dataclass
class AnomalySpec:
    """Placement and intensity of one injected anomaly.

    ``slice_index`` / ``center`` may be None, in which case
    :func:`inject_anomaly` draws them from the rng it is given.
    """

    shape: str                     # "disk" | "square"
    radius: int
    intensity_delta: float
    slice_index: Optional[int] = None
    center: Optional[tuple[int, int]] = None   # (row, col)

    def footprint(self, side: int) -> np.ndarray:
        if self.center is None:
            raise DataError("anomaly center is unresolved")
        cy, cx = self.center
        yy, xx = np.mgrid[0:side, 0:side]
        if self.shape == "disk":
            return (yy - cy) ** 2 + (xx - cx) ** 2 <= self.radius ** 2
        if self.shape == "square":
            return np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= self.radius
        raise DataError(f"unknown anomaly shape {self.shape!r}")

    def to_json(self) -> dict:
        return {
            "shape": self.shape,
            "radius": int(self.radius),
            "intensity_delta": float(self.intensity_delta),
            "slice_index": int(self.slice_index),
            "center": [int(self.center[0]), int(self.center[1])],
        }


def slice_positions(n_slices: int) -> np.ndarray:
    """Evenly spaced through-axis coordinates in [-0.5, 0.5]."""
    if n_slices < 1:
        raise DataError("a volume needs at least one slice")
    if n_slices == 1:
        return np.zeros(1)
    return np.arange(n_slices) / (n_slices - 1) - 0.5


def generate_volume(seed: int, subject_id: int, n_slices: int,
                    side: int) -> PseudoVolume:
    """Deterministically synthesize one pseudo-volume in [0, 1]."""
    rng = numpy_rng(seed, "volume", subject_id)
    n_organs = int(rng.integers(2, 5))
    background = rng.uniform(0.05, 0.12)
    organs = []
    for _ in range(n_organs):
        organs.append({
            "center": rng.uniform(0.30, 0.70, size=2) * side,   # (cy, cx)
            "drift_amp": rng.uniform(0.0, 0.06, size=2) * side,
            "drift_phase": rng.uniform(0.0, 2 * np.pi, size=2),
            "radii": rng.uniform(0.10, 0.26, size=2) * side,    # (ry, rx)
            "axis_center": rng.uniform(-0.15, 0.15),
            "axis_extent": rng.uniform(0.55, 0.90),
            "intensity": rng.uniform(0.35, 0.85),
            "intensity_amp": rng.uniform(0.0, 0.15),
            "intensity_phase": rng.uniform(0.0, 2 * np.pi),
        })
    positions = slice_positions(n_slices)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    slices = np.empty((n_slices, side, side))
    for k, p in enumerate(positions):
        img = np.full((side, side), background)
        for organ in organs:
            # Ellipsoid cross-section: radii shrink away from the organ's
            # own axial center and vanish beyond its extent.
            rel = (p - organ["axis_center"]) / organ["axis_extent"]
            shrink = 1.0 - rel * rel
            if shrink <= 0.0:
                continue
            scale = np.sqrt(shrink)
            ry, rx = np.maximum(organ["radii"] * scale, 1.0)
            cy = organ["center"][0] + organ["drift_amp"][0] * np.sin(
                2 * np.pi * p + organ["drift_phase"][0])
            cx = organ["center"][1] + organ["drift_amp"][1] * np.sin(
                2 * np.pi * p + organ["drift_phase"][1])
            q = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
            # Approximate signed distance (px) to the ellipse boundary.
            sdf = (1.0 - q) * min(ry, rx)
            level = organ["intensity"] + organ["intensity_amp"] * np.sin(
                2 * np.pi * p + organ["intensity_phase"])
            img = img + level * expit(sdf / EDGE_SOFTNESS_PX)
        texture = numpy_rng(seed, "texture", subject_id, k).standard_normal(
            (side, side))
        texture = gaussian_filter(texture, NOISE_SMOOTH_PX, mode="nearest")
        std = texture.std()
        if std > 0:
            img = img + NOISE_SIGMA * texture / std
        slices[k] = np.clip(img, 0.0, 1.0)
    return PseudoVolume(subject_id, slices, positions)


def normalize(volume: PseudoVolume) -> PseudoVolume:
    """Zero-mean / unit-variance normalization over the whole subject."""
    mean = volume.slices.mean()
    std = volume.slices.std()
    if std < 1e-12:
        raise DataError(
            f"subject {volume.subject_id} has zero intensity variance")
    return PseudoVolume(volume.subject_id, (volume.slices - mean) / std,
                        volume.slice_positions.copy())


def inject_anomaly(volume: PseudoVolume, spec: AnomalySpec,
                   rng: Optional[np.random.Generator] = None,
                   ) -> tuple[PseudoVolume, np.ndarray, AnomalySpec]:
    """Paint a homogeneous lesion on the spec's footprint of one slice.

    The footprint is overwritten with a flat value: the footprint's own
    mean displaced by ``spec.intensity_delta``, clamped to the volume's
    pre-injection [min, max]. A textureless plateau with a hard rim is
    foreign to the corpus at any intensity, so the label stays valid even
    where the displaced level lands near healthy values. Unset
    ``slice_index`` / ``center`` fields are drawn from ``rng`` (required in
    that case) such that the footprint stays inside the image. Returns the
    modified volume, the boolean anomaly mask (the geometric footprint,
    even where the fill happens to match a pixel), and the resolved spec.
    """
    n_slices, side = volume.slices.shape[0], volume.slices.shape[1]
    if not 0 <= spec.radius <= (side - 1) // 2:
        raise DataError(f"radius {spec.radius} does not fit side {side}")
    slice_index = spec.slice_index
    if slice_index is None:
        if rng is None:
            raise DataError("rng required to draw a slice index")
        slice_index = int(rng.integers(n_slices))
    if not 0 <= slice_index < n_slices:
        raise DataError(f"slice index {slice_index} out of range")
    center = spec.center
    if center is None:
        if rng is None:
            raise DataError("rng required to draw a center")
        lo, hi = spec.radius, side - 1 - spec.radius
        center = (int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))
    cy, cx = center
    r = spec.radius
    if cy - r < 0 or cx - r < 0 or cy + r >= side or cx + r >= side:
        raise DataError(f"footprint at {center} radius {r} leaves the image")
    resolved = dataclasses.replace(spec, slice_index=slice_index,
                                   center=(int(cy), int(cx)))
    mask = resolved.footprint(side)
    lo, hi = volume.slices.min(), volume.slices.max()
    out = volume.copy()
    target = out.slices[slice_index]
    target[mask] = np.clip(target[mask].mean() + spec.intensity_delta,
                           lo, hi)
    return out, mask, resolved


def augment(image: np.ndarray, rng: np.random.Generator,
            cfg: AugmentConfig) -> np.ndarray:
    """Stochastic training augmentation; each transform behind its own gate.

    Gates are drawn first (fixed order), then parameters for the active
    transforms, so the draw sequence is a pure function of the rng state.
    With every gate off the input is returned unchanged (modulo copy).
    """
    out = np.asarray(image, dtype=np.float64).copy()
    if out.ndim != 2:
        raise ShapeError(f"augment expects a 2-D image, got {out.shape}")
    if not cfg.enabled:
        return out
    gates = rng.random(6) < cfg.gate_prob
    if gates[0]:  # rotation + scale about the image center
        angle = np.deg2rad(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg))
        scale = rng.uniform(cfg.scale_min, cfg.scale_max)
        c, s = np.cos(angle), np.sin(angle)
        matrix = np.array([[c, -s], [s, c]]) / scale   # output -> input
        centre = (np.array(out.shape) - 1) / 2.0
        offset = centre - matrix @ centre
        out = affine_transform(out, matrix, offset=offset, order=1,
                               mode="nearest")
    if gates[1]:  # gaussian blur
        sigma = rng.uniform(0.0, cfg.blur_sigma_max)
        out = gaussian_filter(out, sigma, mode="nearest")
    if gates[2]:  # brightness shift
        out = out + rng.uniform(-cfg.brightness_max, cfg.brightness_max)
    if gates[3]:  # contrast about the image mean
        factor = rng.uniform(cfg.contrast_min, cfg.contrast_max)
        mean = out.mean()
        out = mean + (out - mean) * factor
    if gates[4]:  # additive gaussian noise
        out = out + cfg.noise_sigma * rng.standard_normal(out.shape)
    if gates[5]:  # elastic warp with a smooth displacement field
        amplitude = rng.uniform(0.0, cfg.elastic_max_px)
        field = rng.uniform(-1.0, 1.0, size=(2,) + out.shape)
        field = gaussian_filter(field, (0, cfg.elastic_field_sigma,
                                        cfg.elastic_field_sigma),
                                mode="nearest")
        peak = np.abs(field).max()
        if peak > 0:
            field = field * (amplitude / peak)
        yy, xx = np.mgrid[0:out.shape[0], 0:out.shape[1]].astype(np.float64)
        out = map_coordinates(out, [yy + field[0], xx + field[1]], order=1,
                              mode="nearest")
    return out


# ---------------------------------------------------------------------------
# Corpus assembly and IO
# ---------------------------------------------------------------------------

def _slice_id(subject_id: int, slice_index: int) -> str:
    return f"{subject_id:04d}_{slice_index:02d}"


TISSUE_MIN_FRACTION = 0.6       # target tissue coverage of a footprint
EFFECTIVE_CONTRAST_MIN = 0.8    # realized / nominal |delta| after clamping
_CENTER_DRAWS = 64              # fixed draw count keeps rng use content-free


def _tissue_center(slice_img: np.ndarray, proto: AnomalySpec,
                   rng: np.random.Generator,
                   bounds: tuple[float, float]) -> tuple[int, int]:
    """Pick an anomaly center that is mostly on tissue and keeps contrast.

    Tissue is anything brighter than the subject mean (zero after
    normalization). An anomaly dropped on background or straddling an organ
    boundary just reads as ordinary inter-subject shape variation, which
    makes the detection target ill-posed; lesions belong inside tissue.
    Injection also clamps to ``bounds`` (the volume's value range), so a
    footprint over near-saturated tissue can silently lose most of its
    nominal contrast; such centers mislabel the injected magnitude and are
    skipped. The first candidate meeting both constraints wins, falling
    back to the least-bad candidate (tissue shortfall first) on slices
    where nothing qualifies.
    """
    side = slice_img.shape[0]
    lo, hi = proto.radius, side - 1 - proto.radius
    tissue = slice_img > 0.0
    delta = proto.intensity_delta
    candidates = rng.integers(lo, hi + 1, size=(_CENTER_DRAWS, 2))
    best, best_key = None, (-1.0, -1.0)
    for cy, cx in candidates:
        footprint = dataclasses.replace(
            proto, center=(int(cy), int(cx))).footprint(side)
        fraction = float(tissue[footprint].mean())
        values = slice_img[footprint]
        fill = np.clip(values.mean() + delta, *bounds)
        contrast = float(np.abs(fill - values).mean() / abs(delta))
        if fraction >= TISSUE_MIN_FRACTION and \
                contrast >= EFFECTIVE_CONTRAST_MIN:
            return int(cy), int(cx)
        key = (min(fraction / TISSUE_MIN_FRACTION, 1.0), contrast)
        if key > best_key:
            best, best_key = (int(cy), int(cx)), key
    return best


def build_corpus(cfg: DataConfig, seed: int):
    """Build normalized train/val volumes plus injected validation anomalies.

    Returns ``(train_volumes, val_volumes, val_masks)`` where ``val_masks``
    maps ``(subject_id, slice_index)`` to ``(mask, resolved_spec)``. The
    first ``val_clean_volumes`` validation subjects stay anomaly-free; the
    configured magnitude list is dealt round-robin over the rest with
    alternating sign and shape at a fixed mid-range radius, one anomaly
    per slice, centered on tissue (see :func:`_tissue_center`).
    """
    train = [normalize(generate_volume(seed, sid, cfg.slices_per_volume,
                                       cfg.side))
             for sid in range(cfg.train_volumes)]
    val = [normalize(generate_volume(seed, cfg.train_volumes + i,
                                     cfg.slices_per_volume, cfg.side))
           for i in range(cfg.val_volumes)]
    rng = numpy_rng(seed, "anomalies")
    anomalous = val[cfg.val_clean_volumes:]
    if cfg.anomaly_magnitudes and not anomalous:
        raise DataError("no anomalous validation volumes configured")
    val_masks: dict[tuple[int, int], tuple[np.ndarray, AnomalySpec]] = {}
    used: dict[int, set[int]] = {}
    for i, magnitude in enumerate(cfg.anomaly_magnitudes):
        volume = anomalous[i % len(anomalous)]
        taken = used.setdefault(volume.subject_id, set())
        if len(taken) >= cfg.slices_per_volume:
            raise DataError("more anomalies than free slices in a volume")
        while True:
            k = int(rng.integers(cfg.slices_per_volume))
            if k not in taken:
                break
        taken.add(k)
        # Fixed mid-range radius: per-group pixel metrics compare anomaly
        # magnitudes, and a random footprint size would confound that
        # comparison (area, not contrast, dominates at small group sizes).
        spec = AnomalySpec(
            shape="disk" if i % 2 == 0 else "square",
            radius=(cfg.anomaly_radius_min + cfg.anomaly_radius_max) // 2,
            intensity_delta=float(magnitude if i % 2 == 0 else -magnitude),
            slice_index=k,
        )
        spec = dataclasses.replace(
            spec, center=_tissue_center(
                volume.slices[k], spec, rng,
                (float(volume.slices.min()), float(volume.slices.max()))))
        injected, mask, resolved = inject_anomaly(volume, spec, rng)
        for j, v in enumerate(val):
            if v.subject_id == volume.subject_id:
                val[j] = injected
                break
        anomalous[i % len(anomalous)] = injected
        val_masks[(volume.subject_id, k)] = (mask, resolved)
    return train, val, val_masks


def write_corpus(out_dir: str, cfg: RunConfig) -> str:
    """Generate the corpus under ``out_dir`` and return the manifest path."""
    data_cfg, seed = cfg.data, cfg.seed
    train, val, val_masks = build_corpus(data_cfg, seed)
    os.makedirs(out_dir, exist_ok=True)
    volumes_json = []
    for split, volumes in (("train", train), ("val", val)):
        for volume in volumes:
            sid = volume.subject_id
            slice_entries = []
            for k in range(volume.slices.shape[0]):
                rel = f"slices/{_slice_id(sid, k)}.lsrt"
                path = os.path.join(out_dir, rel)
                os.makedirs(os.path.dirname(path), exist_ok=True)
                write_tensor(path, volume.slices[k].astype(np.float32),
                             {"kind": "slice", "subject_id": sid,
                              "slice_index": k})
                entry = {
                    "id": _slice_id(sid, k),
                    "path": rel,
                    "slice_index": k,
                    "slice_position": float(volume.slice_positions[k]),
                    "mask_path": None,
                    "anomalies": [],
                }
                if (sid, k) in val_masks:
                    mask, spec = val_masks[(sid, k)]
                    mask_rel = f"masks/{_slice_id(sid, k)}.lsrt"
                    mask_path = os.path.join(out_dir, mask_rel)
                    os.makedirs(os.path.dirname(mask_path), exist_ok=True)
                    write_tensor(mask_path, mask.astype(np.int32),
                                 {"kind": "mask", "subject_id": sid,
                                  "slice_index": k})
                    entry["mask_path"] = mask_rel
                    entry["anomalies"] = [spec.to_json()]
                slice_entries.append(entry)
            volumes_json.append({"subject_id": sid, "split": split,
                                 "slices": slice_entries})
    manifest = {
        "schema_version": 1,
        "kind": "dataset_manifest",
        "seed": seed,
        "config_hash": config_hash(cfg),
        "side": data_cfg.side,
        "slices_per_volume": data_cfg.slices_per_volume,
        "volumes": volumes_json,
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def load_manifest(manifest_path: str) -> dict:
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise MissingDependencyError(
            f"missing dataset manifest: {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path} is not valid JSON: {exc}") from exc
    if manifest.get("kind") != "dataset_manifest":
        raise DataError(f"{manifest_path} is not a dataset manifest")
    return manifest


def manifest_sha256(manifest_path: str) -> str:
    with open(manifest_path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@dataclass
class SliceCorpus:
    """A flat, ordered view over one split of a corpus on disk."""

    images: np.ndarray           # (M, side, side) float32
    positions: np.ndarray        # (M,) float32
    subject_ids: np.ndarray      # (M,) int64
    records: list                # manifest slice entries, same order

    def __len__(self) -> int:
        return self.images.shape[0]


def load_slices(manifest_path: str, split: str) -> SliceCorpus:
    """Load every slice of ``split`` in manifest order."""
    manifest = load_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    images, positions, subjects, records = [], [], [], []
    for volume in manifest["volumes"]:
        if volume["split"] != split:
            continue
        for entry in volume["slices"]:
            arr = read_tensor(os.path.join(base, entry["path"]))
            if arr.ndim != 2:
                raise DataError(f"slice {entry['id']} is not 2-D")
            images.append(arr.astype(np.float32))
            positions.append(entry["slice_position"])
            subjects.append(volume["subject_id"])
            records.append(entry)
    if not images:
        raise DataError(f"manifest has no slices for split {split!r}")
    return SliceCorpus(np.stack(images), np.asarray(positions, np.float32),
                       np.asarray(subjects, np.int64), records)


def load_mask(manifest_path: str, entry: dict) -> Optional[np.ndarray]:
    """Load a slice entry's anomaly mask as bool, or None if clean."""
    if not entry.get("mask_path"):
        return None
    base = os.path.dirname(os.path.abspath(manifest_path))
    arr = read_tensor(os.path.join(base, entry["mask_path"]))
    return arr.astype(bool)
