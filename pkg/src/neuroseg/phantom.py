"""Deterministic multi-modality phantom generator with ground-truth labels.

Anatomy is a fixed set of ellipsoids (hemispheric white matter inside a grey
matter shell, lateral ventricles, putamen, hippocampus, brainstem) defined in
world millimetres and rasterized onto each modality's voxel grid, so the
anatomy of one subject is identical across modalities up to grid resolution.
Subjects vary by a small random affine (rotation/scale/translation) and by
per-structure radius jitter. Modalities differ in contrast profile, noise
level and voxel spacing; grey/white contrast is large for the T1-like
profile and buried in noise for the CT-like profile, with

    michelson(mprage) > michelson(flair) ~ michelson(dwi) > michelson(ct)

on the generated means. Everything is reproducible from (spec.seed,
subject_seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import NUM_CLASSES, LabelMap, Volume
from .io import ManifestRecord, write_manifest, write_volume

# structure label indices used by the default phantom
WM_LEFT, GM_LEFT, WM_RIGHT, GM_RIGHT = 1, 2, 3, 4
VENT_LEFT, VENT_RIGHT = 5, 18
PUTAMEN_LEFT, PUTAMEN_RIGHT = 10, 23
BRAINSTEM = 14
HIPPO_LEFT, HIPPO_RIGHT = 15, 25

GM_WM_PAIRS = ((WM_LEFT, GM_LEFT), (WM_RIGHT, GM_RIGHT))


@dataclass(frozen=True)
class PaintStep:
    """One ellipsoid painted into the label grid; later steps overwrite."""

    label: int
    center: Tuple[float, float, float]  # fractions of world extent
    radii: Tuple[float, float, float]  # fractions of world extent


@dataclass(frozen=True)
class ModalityProfile:
    spacing: Tuple[float, float, float]
    contrast: Dict[int, Tuple[float, float]]  # label -> (mean, noise sigma)


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int]  # reference grid (first modality)
    structures: Tuple[PaintStep, ...]
    modalities: Dict[str, ModalityProfile]
    reference_modality: str
    radius_jitter: float = 0.06  # fractional, per structure
    rotation_jitter_deg: float = 3.0
    scale_jitter: float = 0.03
    translation_jitter_mm: float = 0.8
    seed: int = 0

    def __post_init__(self):
        labels = {step.label for step in self.structures}
        if not labels or max(labels) >= NUM_CLASSES or min(labels) < 1:
            raise ValueError("phantom structure labels must lie in 1..27")
        for name, profile in self.modalities.items():
            missing = labels - set(profile.contrast) - {0}
            if 0 not in profile.contrast:
                missing.add(0)
            if missing:
                raise ValueError(
                    f"modality {name!r} contrast table missing labels {sorted(missing)}"
                )
        if self.reference_modality not in self.modalities:
            raise ValueError(f"unknown reference modality {self.reference_modality!r}")
        extent = self.world_extent()
        # two voxels of the coarsest grid, per axis
        margin = 2.0 * np.max(
            [p.spacing for p in self.modalities.values()], axis=0
        )
        slack = (1.0 + self.radius_jitter) * (1.0 + self.scale_jitter)
        worst_shift = (
            self.translation_jitter_mm
            + np.deg2rad(self.rotation_jitter_deg) * float(np.linalg.norm(extent)) / 8
        )
        for step in self.structures:
            c = np.asarray(step.center) * extent
            r = np.asarray(step.radii) * extent * slack
            if np.any(c - r - worst_shift < margin) or np.any(c + r + worst_shift > extent - margin):
                raise ValueError(
                    f"structure {step.label} cannot keep a 2-voxel margin under jitter"
                )

    def world_extent(self) -> np.ndarray:
        ref = self.modalities[self.reference_modality]
        return np.asarray(self.dims, dtype=np.float64) * np.asarray(ref.spacing)

    def modality_dims(self, name: str) -> Tuple[int, int, int]:
        extent = self.world_extent()
        sp = np.asarray(self.modalities[name].spacing, dtype=np.float64)
        return tuple(int(round(e / s)) for e, s in zip(extent, sp))


_DEFAULT_STRUCTURES = (
    # outer grey shells first, white matter overwrites their interior
    PaintStep(GM_LEFT, (0.305, 0.50, 0.53), (0.185, 0.315, 0.270)),
    PaintStep(GM_RIGHT, (0.695, 0.50, 0.53), (0.185, 0.315, 0.270)),
    PaintStep(WM_LEFT, (0.305, 0.50, 0.53), (0.130, 0.245, 0.205)),
    PaintStep(WM_RIGHT, (0.695, 0.50, 0.53), (0.130, 0.245, 0.205)),
    # interior structures carve into white matter
    PaintStep(VENT_LEFT, (0.335, 0.46, 0.56), (0.060, 0.145, 0.105)),
    PaintStep(VENT_RIGHT, (0.665, 0.46, 0.56), (0.060, 0.145, 0.105)),
    PaintStep(PUTAMEN_LEFT, (0.38, 0.615, 0.50), (0.060, 0.090, 0.075)),
    PaintStep(PUTAMEN_RIGHT, (0.62, 0.615, 0.50), (0.060, 0.090, 0.075)),
    PaintStep(HIPPO_LEFT, (0.345, 0.355, 0.445), (0.058, 0.105, 0.068)),
    PaintStep(HIPPO_RIGHT, (0.655, 0.355, 0.445), (0.058, 0.105, 0.068)),
    PaintStep(BRAINSTEM, (0.50, 0.44, 0.27), (0.085, 0.100, 0.095)),
)

_DEFAULT_CONTRAST = {
    # label -> mean intensity per tissue, per modality; sigma is one noise
    # level per modality. Grey/white Michelson contrast: 0.281 (mprage),
    # 0.120 (flair), 0.118 (dwi), 0.018 (ct).
    "mprage": ({0: 2, "wm": 80, "gm": 45, "csf": 10, "put": 58, "hip": 52, "stem": 71}, 4.0),
    "flair": ({0: 2, "wm": 46, "gm": 58.5, "csf": 7, "put": 53, "hip": 55, "stem": 48}, 5.0),
    "dwi": ({0: 2, "wm": 45, "gm": 57, "csf": 16, "put": 50, "hip": 53, "stem": 47}, 5.0),
    "ct": ({0: 2, "wm": 40, "gm": 41.5, "csf": 11, "put": 43, "hip": 42, "stem": 40.5}, 8.0),
}

_TISSUE_OF = {
    0: 0,
    WM_LEFT: "wm",
    WM_RIGHT: "wm",
    GM_LEFT: "gm",
    GM_RIGHT: "gm",
    VENT_LEFT: "csf",
    VENT_RIGHT: "csf",
    PUTAMEN_LEFT: "put",
    PUTAMEN_RIGHT: "put",
    HIPPO_LEFT: "hip",
    HIPPO_RIGHT: "hip",
    BRAINSTEM: "stem",
}

_DEFAULT_SPACING = {
    "mprage": (1.0, 1.0, 1.0),
    "flair": (1.0, 1.0, 1.0),
    "dwi": (1.0, 1.0, 2.0),  # thick slices
    "ct": (1.0, 1.0, 1.0),
}


def default_phantom_spec(
    dims: Tuple[int, int, int] = (32, 32, 32),
    modalities: Sequence[str] = ("mprage", "flair", "dwi", "ct"),
    seed: int = 0,
    isotropic: bool = False,
) -> PhantomSpec:
    """Desk-scale four-modality phantom family."""
    profiles = {}
    for name in modalities:
        means, sigma = _DEFAULT_CONTRAST[name]
        contrast = {
            label: (float(means[tissue]), sigma)
            for label, tissue in _TISSUE_OF.items()
        }
        spacing = (1.0, 1.0, 1.0) if isotropic else _DEFAULT_SPACING[name]
        profiles[name] = ModalityProfile(spacing=spacing, contrast=contrast)
    return PhantomSpec(
        dims=tuple(int(d) for d in dims),
        structures=_DEFAULT_STRUCTURES,
        modalities=profiles,
        reference_modality=modalities[0],
        seed=seed,
    )


@dataclass(frozen=True)
class _SubjectGeometry:
    rotation: np.ndarray  # (3, 3)
    scale: float
    translation: np.ndarray  # (3,)
    radius_factors: np.ndarray  # per structure


def _subject_geometry(spec: PhantomSpec, rng: np.random.Generator) -> _SubjectGeometry:
    angles = np.deg2rad(rng.uniform(-spec.rotation_jitter_deg, spec.rotation_jitter_deg, 3))
    cx, sx = np.cos(angles[0]), np.sin(angles[0])
    cy, sy = np.cos(angles[1]), np.sin(angles[1])
    cz, sz = np.cos(angles[2]), np.sin(angles[2])
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return _SubjectGeometry(
        rotation=rz @ ry @ rx,
        scale=float(rng.uniform(1 - spec.scale_jitter, 1 + spec.scale_jitter)),
        translation=rng.uniform(-spec.translation_jitter_mm, spec.translation_jitter_mm, 3),
        radius_factors=rng.uniform(
            1 - spec.radius_jitter, 1 + spec.radius_jitter, len(spec.structures)
        ),
    )


def _rasterize(spec: PhantomSpec, modality: str, geom: _SubjectGeometry) -> np.ndarray:
    extent = spec.world_extent()
    world_center = extent / 2
    dims = spec.modality_dims(modality)
    sp = np.asarray(spec.modalities[modality].spacing)
    # voxel-center world coordinates
    ax = [
        ((np.arange(dims[d]) + 0.5) * sp[d])
        for d in range(3)
    ]
    grids = np.meshgrid(*ax, indexing="ij")
    labels = np.zeros(dims, dtype=np.uint8)
    rot_inv = geom.rotation.T
    for step, rfac in zip(spec.structures, geom.radius_factors):
        center = np.asarray(step.center) * extent
        center = geom.scale * (geom.rotation @ (center - world_center)) + world_center + geom.translation
        radii = np.asarray(step.radii) * extent * rfac * geom.scale
        # inside test in the ellipsoid's own rotated frame
        dx = grids[0] - center[0]
        dy = grids[1] - center[1]
        dz = grids[2] - center[2]
        ux = rot_inv[0, 0] * dx + rot_inv[0, 1] * dy + rot_inv[0, 2] * dz
        uy = rot_inv[1, 0] * dx + rot_inv[1, 1] * dy + rot_inv[1, 2] * dz
        uz = rot_inv[2, 0] * dx + rot_inv[2, 1] * dy + rot_inv[2, 2] * dz
        inside = (
            (ux / radii[0]) ** 2 + (uy / radii[1]) ** 2 + (uz / radii[2]) ** 2
        ) <= 1.0
        labels[inside] = step.label
    return labels


def generate_subject(
    spec: PhantomSpec, subject_seed: int
) -> Tuple[LabelMap, Dict[str, Volume]]:
    """One subject: ground-truth labels on the reference grid plus one
    intensity volume per modality, geometrically consistent across
    modalities and bitwise deterministic given (spec.seed, subject_seed)."""
    root = np.random.SeedSequence([spec.seed, int(subject_seed)])
    geom_seed, *noise_seeds = root.spawn(1 + len(spec.modalities))
    geom = _subject_geometry(spec, np.random.default_rng(geom_seed))
    volumes = {}
    reference_labels = None
    for (name, profile), nseed in zip(spec.modalities.items(), noise_seeds):
        labels = _rasterize(spec, name, geom)
        if name == spec.reference_modality:
            reference_labels = labels
        means = np.zeros(NUM_CLASSES, dtype=np.float64)
        sigmas = np.zeros(NUM_CLASSES, dtype=np.float64)
        for label, (mean, sigma) in profile.contrast.items():
            means[label] = mean
            sigmas[label] = sigma
        rng = np.random.default_rng(nseed)
        data = means[labels]
        noise = rng.standard_normal(labels.shape)
        data = data + noise * sigmas[labels]
        volumes[name] = Volume(data.astype(np.float32), profile.spacing)
    ref_profile = spec.modalities[spec.reference_modality]
    label_map = LabelMap(reference_labels, ref_profile.spacing)
    return label_map, volumes


def subject_labels(spec: PhantomSpec, subject_seed: int, modality: str) -> LabelMap:
    """Ground-truth labels rasterized on one modality's own grid."""
    root = np.random.SeedSequence([spec.seed, int(subject_seed)])
    geom_seed = root.spawn(1)[0]
    geom = _subject_geometry(spec, np.random.default_rng(geom_seed))
    profile = spec.modalities[modality]
    return LabelMap(_rasterize(spec, modality, geom), profile.spacing)


# -- corruption modes for the quality-control experiments --


def corrupt_noise(v: Volume, level: float, rng: np.random.Generator) -> Volume:
    """Additive Gaussian noise with sigma = level * intensity range."""
    span = float(v.data.max() - v.data.min())
    noisy = v.data + rng.standard_normal(v.dims) * (level * span)
    return Volume(noisy.astype(np.float32), v.spacing, v.affine)


def corrupt_occlusion(v: Volume, fraction: float, rng: np.random.Generator) -> Volume:
    """Zero out a random cuboid covering ``fraction`` of each axis."""
    data = np.array(v.data)
    slices = []
    for n in v.dims:
        w = max(1, int(round(fraction * n)))
        start = int(rng.integers(0, max(1, n - w + 1)))
        slices.append(slice(start, start + w))
    data[tuple(slices)] = 0.0
    return Volume(data, v.spacing, v.affine)


def corrupt_contrast_swap(
    spec: PhantomSpec, volumes: Dict[str, Volume], modality: str
) -> Volume:
    """Stand in a same-grid volume from another modality (wrong contrast)."""
    dims = spec.modality_dims(modality)
    for other, vol in volumes.items():
        if other != modality and vol.dims == dims:
            return Volume(vol.data, volumes[modality].spacing, volumes[modality].affine)
    raise ValueError(f"no same-grid partner modality for {modality!r}")


_CORRUPTIONS = ("noise-0.3", "noise-0.5", "noise-0.7", "occlude-0.4", "swap")


def apply_corruption(
    spec: PhantomSpec,
    volumes: Dict[str, Volume],
    modality: str,
    mode: str,
    rng: np.random.Generator,
) -> Volume:
    kind, _, level = mode.partition("-")
    if kind == "noise":
        return corrupt_noise(volumes[modality], float(level), rng)
    if kind == "occlude":
        return corrupt_occlusion(volumes[modality], float(level), rng)
    if kind == "swap":
        return corrupt_contrast_swap(spec, volumes, modality)
    raise ValueError(f"unknown corruption mode {mode!r}")


def _split_counts(n: int, test_fraction: float, val_fraction: float) -> Tuple[int, int]:
    n_test = int(np.floor(n * test_fraction + 0.5))  # round half up
    n_val = int(np.floor(n * val_fraction + 0.5))
    return n_test, n_val


def generate_dataset(
    spec: PhantomSpec,
    n_subjects: int,
    out_dir,
    test_fraction: float = 0.1,
    validation_fraction: float = 0.0,
    modalities: Optional[Sequence[str]] = None,
    n_corrupt: int = 0,
    corruption_modes: Sequence[str] = _CORRUPTIONS,
) -> Path:
    """Write MVOX volume/label pairs plus a manifest with train/validation/
    test split tags; the last ``n_corrupt`` test subjects get corrupted
    volumes (labels stay truthful) and a corruption note in the manifest.
    Returns the manifest path.
    """
    if n_subjects < 5:
        raise ValueError(f"need at least 5 subjects, got {n_subjects}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    modalities = list(modalities or spec.modalities)
    n_test, n_val = _split_counts(n_subjects, test_fraction, validation_fraction)
    if n_corrupt > n_test:
        raise ValueError(f"cannot corrupt {n_corrupt} of {n_test} test subjects")
    rng_split = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC0FFEE]))
    order = rng_split.permutation(n_subjects)
    split_of = {}
    for pos, subject in enumerate(order):
        if pos < n_test:
            split_of[int(subject)] = "test"
        elif pos < n_test + n_val:
            split_of[int(subject)] = "validation"
        else:
            split_of[int(subject)] = "train"
    corrupt_subjects = {int(s) for s in order[max(0, n_test - n_corrupt) : n_test]}

    records = []
    for subject in range(n_subjects):
        _, volumes = generate_subject(spec, subject)
        split = split_of[subject]
        for modality in modalities:
            labels = subject_labels(spec, subject, modality)
            note = ""
            vol = volumes[modality]
            if subject in corrupt_subjects:
                mode = corruption_modes[subject % len(corruption_modes)]
                rng = np.random.default_rng(
                    np.random.SeedSequence([spec.seed, subject, 0xBAD])
                )
                try:
                    vol = apply_corruption(spec, volumes, modality, mode, rng)
                except ValueError:
                    mode = "noise-0.5"
                    vol = corrupt_noise(vol, 0.5, rng)
                note = f"corrupt:{mode}"
            vol_name = f"subject{subject:03d}_{modality}.mvx"
            lab_name = f"subject{subject:03d}_{modality}_labels.mvx"
            write_volume(vol, out_dir / vol_name)
            write_volume(labels, out_dir / lab_name)
            records.append(
                ManifestRecord(
                    volume_path=Path(vol_name),
                    labels_path=Path(lab_name),
                    modality=modality,
                    split=split,
                    note=note,
                )
            )
    manifest_path = out_dir / "manifest.csv"
    write_manifest(records, manifest_path)
    return manifest_path


def load_phantom_spec(path) -> PhantomSpec:
    """Read a PhantomSpec from its JSON config form."""
    cfg = json.loads(Path(path).read_text())
    structures = tuple(
        PaintStep(int(s["label"]), tuple(s["center"]), tuple(s["radii"]))
        for s in cfg["structures"]
    )
    modalities = {
        name: ModalityProfile(
            spacing=tuple(p["spacing"]),
            contrast={int(k): tuple(v) for k, v in p["contrast"].items()},
        )
        for name, p in cfg["modalities"].items()
    }
    return PhantomSpec(
        dims=tuple(cfg["dims"]),
        structures=structures,
        modalities=modalities,
        reference_modality=cfg["reference_modality"],
        radius_jitter=cfg.get("radius_jitter", 0.08),
        rotation_jitter_deg=cfg.get("rotation_jitter_deg", 4.0),
        scale_jitter=cfg.get("scale_jitter", 0.04),
        translation_jitter_mm=cfg.get("translation_jitter_mm", 1.0),
        seed=cfg.get("seed", 0),
    )


def save_phantom_spec(spec: PhantomSpec, path) -> None:
    cfg = {
        "dims": list(spec.dims),
        "structures": [
            {"label": s.label, "center": list(s.center), "radii": list(s.radii)}
            for s in spec.structures
        ],
        "modalities": {
            name: {
                "spacing": list(p.spacing),
                "contrast": {str(k): list(v) for k, v in p.contrast.items()},
            }
            for name, p in spec.modalities.items()
        },
        "reference_modality": spec.reference_modality,
        "radius_jitter": spec.radius_jitter,
        "rotation_jitter_deg": spec.rotation_jitter_deg,
        "scale_jitter": spec.scale_jitter,
        "translation_jitter_mm": spec.translation_jitter_mm,
        "seed": spec.seed,
    }
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True))
