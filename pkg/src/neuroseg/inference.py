"""Segmentation inference: argmax labeling, MC-dropout fusion and the
coefficient-of-variation quality check.

MC sampling runs the trained network N times with eval-mode batch norm and
active dropout; the fused map is the voxelwise argmax of the summed softmax
fields (equivalently their mean). Per-sample anatomical volumes are the
voxel counts of each sample's hard segmentation; their dispersion across
samples yields CV_s = sigma_s / mu_s and the aggregate CV is the mean over
structures present in every statistic's denominator sense (mu_s > 0).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .core import NUM_CLASSES, LabelMap, StructureTable, Volume
from .unet import UNet3D

DEFAULT_MC_SAMPLES = 15
DEFAULT_DROPOUT_RATE = 0.2
CV_THRESHOLDS = {"mprage": 0.01, "flair": 0.025, "dwi": 0.025, "ct": 0.025}


@dataclass
class McSampleSet:
    """Per-sample structure volumes (voxel counts) from N stochastic passes."""

    n: int
    volumes: np.ndarray  # (N, num_classes) int64
    seeds: List[int]
    fields: Optional[List[np.ndarray]] = None  # per-sample softmax, optional


@dataclass
class UncertaintyReport:
    mean_volume: Dict[int, float]  # mu_s over MC samples
    std_volume: Dict[int, float]  # population sigma_s
    cv_per_structure: Dict[int, float]
    excluded: List[int]  # structures with mu_s == 0 (flagged, not scored)
    cv: float
    threshold: float
    verdict: str  # "pass" | "warn"


def hard_segment(P, like: Optional[Volume] = None) -> LabelMap:
    """Voxelwise argmax labeling of a probability field (C, x, y, z) or
    (1, C, x, y, z); ties break toward the lowest class index. Geometry is
    copied from ``like`` when given."""
    arr = P.data if isinstance(P, ad.Tensor) else np.asarray(P)
    if arr.ndim == 5:
        if arr.shape[0] != 1:
            raise ad.ShapeError("hard_segment expects a single-volume field")
        arr = arr[0]
    labels = np.argmax(arr, axis=0).astype(np.uint8)
    if like is not None:
        return LabelMap(labels, like.spacing, like.affine)
    return LabelMap(labels)


def _structure_volumes(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.bincount(labels.reshape(-1), minlength=num_classes)[:num_classes]


def mc_segment(
    model: UNet3D,
    v: Volume,
    n: int = DEFAULT_MC_SAMPLES,
    seed: int = 0,
    keep_fields: bool = False,
):
    """Monte Carlo dropout segmentation of a preprocessed volume.

    ``v`` must already be on the model grid and intensity-normalized. Each of
    the ``n`` passes uses an independent rng derived from ``seed``, so the
    fused result does not depend on evaluation order. Returns the fused
    LabelMap and the sample set for the CV computation.
    """
    if n < 1:
        raise ValueError(f"need at least 1 MC sample, got {n}")
    if v.dims != model.spec.input_dims:
        raise ad.ShapeError(
            f"volume dims {v.dims} do not match model input {model.spec.input_dims}"
        )
    x = np.asarray(v.data, dtype=model.dtype)[None, None]
    children = np.random.SeedSequence(seed).spawn(n)
    num_classes = model.spec.num_classes
    total = np.zeros((num_classes,) + v.dims, dtype=np.float64)
    volumes = np.zeros((n, num_classes), dtype=np.int64)
    fields = [] if keep_fields else None
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        with ad.no_grad():
            P = model.forward(x, mode="eval", dropout_active=True, rng=rng)
        sample = P.data[0]
        total += sample
        volumes[i] = _structure_volumes(np.argmax(sample, axis=0), num_classes)
        if fields is not None:
            fields.append(sample.copy())
    fused = LabelMap(np.argmax(total, axis=0).astype(np.uint8), v.spacing, v.affine)
    sample_set = McSampleSet(
        n=n,
        volumes=volumes,
        seeds=[int(c.generate_state(1)[0]) for c in children],
        fields=fields,
    )
    return fused, sample_set


def uncertainty(
    samples: McSampleSet,
    structures: StructureTable,
    threshold: float,
) -> UncertaintyReport:
    """Coefficient-of-variation report over MC samples.

    CV_s = sigma_s / mu_s with population standard deviation; structures with
    mu_s = 0 are excluded from the aggregate and flagged (a missing structure
    is itself a quality signal). Verdict is 'warn' iff the aggregate CV
    exceeds the threshold.
    """
    if samples.n < 2:
        raise ValueError(f"CV needs at least 2 MC samples, got {samples.n}")
    mean_volume = {}
    std_volume = {}
    cv_per_structure = {}
    excluded = []
    for s in (entry.index for entry in structures):
        vols = samples.volumes[:, s].astype(np.float64)
        mu = float(vols.mean())
        sigma = float(vols.std())  # population
        mean_volume[s] = mu
        std_volume[s] = sigma
        if mu > 0:
            cv_per_structure[s] = sigma / mu
        else:
            excluded.append(s)
    if not cv_per_structure:
        raise ValueError("no structure present in any MC sample")
    cv = float(np.mean(list(cv_per_structure.values()), dtype=np.float64))
    verdict = "warn" if cv > threshold else "pass"
    return UncertaintyReport(
        mean_volume=mean_volume,
        std_volume=std_volume,
        cv_per_structure=cv_per_structure,
        excluded=excluded,
        cv=cv,
        threshold=threshold,
        verdict=verdict,
    )


def write_uncertainty_report(
    report: UncertaintyReport, structures: StructureTable, path
) -> None:
    """One row per structure (mu, sigma, CV or 'absent'), then a summary row
    with the aggregate CV, threshold and verdict."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["structure", "name", "mean_volume", "std_volume", "cv"])
        for entry in structures:
            s = entry.index
            if s in report.cv_per_structure:
                writer.writerow(
                    [
                        s,
                        entry.name,
                        repr(report.mean_volume[s]),
                        repr(report.std_volume[s]),
                        repr(report.cv_per_structure[s]),
                    ]
                )
            else:
                writer.writerow([s, entry.name, "0.0", "0.0", "absent"])
        writer.writerow(
            ["summary", "", repr(report.cv), repr(report.threshold), report.verdict]
        )
