"""Quantitative evaluation: Chamfer/Metro distances, normal-angle statistics,
rendering error, and report emission."""

import csv
import hashlib
import json
from importlib import resources

import numpy as np
from scipy.spatial import cKDTree

from .bvh import AccelIndex
from .errors import DataError
from .mesh import TriangleMesh, sample_surface
from .optics import NormalMapPair, angular_errors_deg


def chamfer_metrics(mesh_a: TriangleMesh, mesh_b: TriangleMesh, samples=20000, seed=0):
    """Sample both meshes uniformly; CD is the symmetric mean of squared
    nearest-sample distances, CDN the angle to the nearest counterpart's
    normal (mean and median over both directions, degrees)."""
    for m in (mesh_a, mesh_b):
        if m.face_areas().sum() <= 0:
            raise DataError("cannot evaluate a zero-area mesh")
    pa, na = sample_surface(mesh_a, samples, seed=seed)
    pb, nb = sample_surface(mesh_b, samples, seed=seed + 1)
    ia = cKDTree(pb).query(pa, k=1)[1]
    ib = cKDTree(pa).query(pb, k=1)[1]
    d_ab = np.sum((pa - pb[ia]) ** 2, axis=1)
    d_ba = np.sum((pb - pa[ib]) ** 2, axis=1)
    ang = np.concatenate([angular_errors_deg(na, nb[ia]), angular_errors_deg(nb, na[ib])])
    return {
        "cd": float(0.5 * (d_ab.mean() + d_ba.mean())),
        "cdn_mean_deg": float(ang.mean()),
        "cdn_med_deg": float(np.median(ang)),
    }


def metro(mesh_a: TriangleMesh, mesh_b: TriangleMesh, samples=20000, seed=0):
    """Symmetric mean of unsquared sampled point-to-surface distances."""
    pa, _ = sample_surface(mesh_a, samples, seed=seed)
    pb, _ = sample_surface(mesh_b, samples, seed=seed + 1)
    d_ab = AccelIndex(mesh_b).closest_point_batch(pa)["distance"]
    d_ba = AccelIndex(mesh_a).closest_point_batch(pb)["distance"]
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def normal_error_stats(pred: NormalMapPair, gt: NormalMapPair, error_image=None, silhouette=None):
    """Angular statistics over the intersection of valid masks, plus the mean
    rendering error over the silhouette when an error map is supplied."""
    m = pred.valid & gt.valid
    a1 = angular_errors_deg(pred.n_first[m], gt.n_first[m])
    a2 = angular_errors_deg(pred.n_second[m], gt.n_second[m])
    out = {
        "n1_median_deg": float(np.median(a1)) if a1.size else 0.0,
        "n1_mean_deg": float(np.mean(a1)) if a1.size else 0.0,
        "n2_median_deg": float(np.median(a2)) if a2.size else 0.0,
        "n2_mean_deg": float(np.mean(a2)) if a2.size else 0.0,
    }
    if error_image is not None:
        sil = np.asarray(silhouette, dtype=bool) if silhouette is not None else m
        err = np.asarray(error_image, dtype=np.float64)
        if err.ndim == 3:
            err = err.mean(axis=-1)
        out["render_err_mean"] = float(err[sil].mean()) if sil.any() else 0.0
    return out


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def emit_report(path_json, metrics, config=None, seeds=None, timings=None, path_csv=None):
    """Write the metrics report; stable schema, validated by the shipped
    JSON schema file. Returns the report dict."""
    report = {
        "schema_version": 1,
        "config_hash": config_hash(config or {}),
        "seeds": {str(k): int(v) for k, v in (seeds or {}).items()},
        "timings_sec": {str(k): float(v) for k, v in (timings or {}).items()},
        "metrics": {str(k): float(v) for k, v in metrics.items()},
    }
    with open(path_json, "w", encoding="ascii") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    if path_csv is not None:
        with open(path_csv, "w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for k in sorted(report["metrics"]):
                writer.writerow([k, repr(report["metrics"][k])])
    return report


def report_schema():
    with resources.files("refracta").joinpath("schemas/metrics.schema.json").open() as fh:
        return json.load(fh)
