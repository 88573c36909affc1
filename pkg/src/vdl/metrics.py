"""Similarity metrics, baseline comparison and history files."""
import csv
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import MissingLabels, SchemaError
from .sampler import clipgen_sample, lafite_sample, svdl_sample


@dataclass
class MetricsReport:
    iteration: int
    sim_txt: float
    sim_img: float
    loss_adv_d: float
    loss_adv_g: float
    loss_recon: float
    loss_rkd: float
    loss_semi: float
    loss_r1: float
    d_mean_real: float
    d_mean_fake: float
    degenerate_txt: int = 0
    degenerate_img: int = 0
    skipped_triplets: int = 0

    def to_dict(self):
        return asdict(self)


REPORT_FIELDS = tuple(f.name for f in fields(MetricsReport))
_INT_FIELDS = {"iteration", "degenerate_txt", "degenerate_img", "skipped_triplets"}
SUMMARY_FIELDS = ("record", "evaluations", "final", "best_sim_txt", "config")


def _truth(z):
    if z is None:
        raise MissingLabels("true text embeddings are required")
    z = np.atleast_2d(z)
    if not np.isfinite(z).all():
        raise MissingLabels("true text embeddings contain missing values")
    return z


def sim_txt(z_txt_hat, z_txt):
    """Mean cosine between predicted and true text embeddings."""
    return float(np.mean(nx.cosine(np.atleast_2d(z_txt_hat), _truth(z_txt))))


def sim_img(model, dataset, from_sampled=False):
    """Mean cosine between image embeddings and their reconstructions.

    By default reconstructions come from the true text through F, as at
    inference.  ``from_sampled`` reconstructs from G's text samples instead.
    """
    z_txt = _truth(dataset.z_txt)
    src = svdl_sample(dataset.z_img, model.G, model.r_txt) if from_sampled else z_txt
    z_img_hat = svdl_sample(src, model.F, model.r_img)
    return float(np.mean(nx.cosine(z_img_hat, dataset.z_img)))


def compare_baselines(model, dataset, xi=0.75, seed=0):
    """Sim_txt of VDL, the identity proxy and the LAFITE perturbation on one dataset."""
    z_txt = _truth(dataset.z_txt)
    rng = nx.Rng(seed).child("lafite")
    rows = {}
    if model is not None:
        rows["VDL"] = sim_txt(svdl_sample(dataset.z_img, model.G, model.r_txt), z_txt)
    rows["CLIP-GEN"] = sim_txt(clipgen_sample(dataset.z_img), z_txt)
    rows["LAFITE"] = sim_txt(lafite_sample(dataset.z_img, xi, rng), z_txt)
    return rows


# history files ----------------------------------------------------------------

def summary_record(history, config=None):
    final = history[-1].to_dict() if history else None
    best = max((h.sim_txt for h in history), default=None)
    return {"record": "summary", "evaluations": len(history), "final": final,
            "best_sim_txt": best, "config": config or {}}


def write_report(path, history, config=None, csv_path=None):
    """Newline-delimited JSON: one record per evaluation, then a summary record."""
    lines = [json.dumps(h.to_dict(), allow_nan=False) for h in history]
    lines.append(json.dumps(summary_record(history, config), allow_nan=False, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")
    if csv_path is not None:
        write_csv(csv_path, history)


def write_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for h in history:
            w.writerow([repr(getattr(h, f)) if isinstance(getattr(h, f), float) else getattr(h, f)
                        for f in REPORT_FIELDS])


def _to_report(obj, strict):
    keys = set(obj)
    missing = set(REPORT_FIELDS) - keys
    extra = keys - set(REPORT_FIELDS)
    if missing:
        raise SchemaError(f"record missing fields {sorted(missing)}")
    if extra and strict:
        raise SchemaError(f"unknown fields {sorted(extra)}")
    vals = {}
    for f in REPORT_FIELDS:
        v = obj[f]
        if f in _INT_FIELDS:
            if not isinstance(v, int) or isinstance(v, bool):
                raise SchemaError(f"{f} must be an integer")
        elif not isinstance(v, (int, float)) or isinstance(v, bool):
            raise SchemaError(f"{f} must be a number")
        vals[f] = v
    return MetricsReport(**vals)


def read_report(path, strict=True):
    """Parse a history file into (list of MetricsReport, summary dict)."""
    history, summary = [], None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"line {lineno}: {exc}") from exc
        if not isinstance(obj, dict):
            raise SchemaError(f"line {lineno}: expected an object")
        if obj.get("record") == "summary":
            extra = set(obj) - set(SUMMARY_FIELDS)
            if extra and strict:
                raise SchemaError(f"line {lineno}: unknown summary fields {sorted(extra)}")
            summary = obj
        else:
            history.append(_to_report(obj, strict))
    if summary is None and strict:
        raise SchemaError("history file has no summary record")
    return history, summary
