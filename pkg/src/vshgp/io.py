"""Model archives, trace files and metric reports.

An archive is a single ``.npz`` file. Besides the arrays it holds a format
tag, the model kind and a JSON manifest, so it can be inspected without this
package (``np.load(path)["manifest"]``).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import VshgpModel
from .data import Normalizer
from .distributed import DvshgpModel, ExpertModel, Partition
from .kernels import KernelParams
from .stochastic import ExplicitVariational, SvshgpModel

FORMAT_TAG = "vshgp-archive/1"
KINDS = ("vshgp", "svshgp", "dvshgp")


class ArchiveError(ValueError):
    pass


@dataclass
class Archive:
    kind: str
    model: object
    normalizer: Normalizer
    manifest: dict = field(default_factory=dict)


def model_kind(model):
    if isinstance(model, SvshgpModel):
        return "svshgp"
    if isinstance(model, DvshgpModel):
        return "dvshgp"
    if isinstance(model, VshgpModel):
        return "vshgp"
    raise TypeError(f"not a model: {type(model).__name__}")


def _base_arrays(m: VshgpModel, prefix=""):
    return {f"{prefix}X": m.X, f"{prefix}y": m.y, f"{prefix}Xm": m.Xm, f"{prefix}Xu": m.Xu,
            f"{prefix}lambda_log": m.lambda_log}


def save_model(path, model, normalizer: Normalizer | None = None, manifest: dict | None = None):
    """Write ``model`` (VSHGP, SVSHGP or DVSHGP) plus normalization statistics."""
    kind = model_kind(model)
    manifest = dict(manifest or {})
    manifest.update(format=FORMAT_TAG, kind=kind)
    arrays = {}
    if kind == "dvshgp":
        kf, kg, mu0, nugget = model.kf, model.kg, model.mu0, model.nugget
        d = model.d
        n = sum(e.index.size for e in model.experts)
        X = np.empty((n, d))
        y = np.empty(n)
        for i, e in enumerate(model.experts):
            X[e.index], y[e.index] = e.X, e.y
            arrays.update({f"e{i}_index": e.index, f"e{i}_Xm": e.Xm, f"e{i}_Xu": e.Xu,
                           f"e{i}_lambda_log": e.lambda_log})
        arrays.update(X=X, y=y, assignments=model.partition.assignments, centroids=model.partition.centroids)
        manifest.update({k: v for k, v in model.manifest.items() if k not in manifest})
        manifest["effective_M"] = model.M
    else:
        base = model.model if kind == "svshgp" else model
        kf, kg, mu0, nugget = base.kf, base.kg, base.mu0, base.nugget
        arrays.update(_base_arrays(base))
        if kind == "svshgp":
            q = model.q
            arrays.update(q_mu_m=q.mu_m, q_L_m=q.L_m, q_mu_u=q.mu_u, q_L_u=q.L_u)
    arrays.update(kf=kf.to_vector(), kg=kg.to_vector(), mu0=np.array(mu0), nugget=np.array(nugget))
    nz = normalizer or Normalizer.identity(arrays["X"].shape[1])
    arrays.update({f"norm_{k}": v for k, v in nz.to_dict().items()})
    arrays["format"] = np.array(FORMAT_TAG)
    arrays["kind"] = np.array(kind)
    arrays["manifest"] = np.array(json.dumps(manifest, sort_keys=True, default=_json_default))
    path = Path(path)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def load_model(path) -> Archive:
    path = Path(path)
    if not path.exists():
        raise ArchiveError(f"no such archive: {path}")
    try:
        z = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ArchiveError(f"{path}: not a model archive ({exc})") from None
    with z:
        if "format" not in z.files or str(z["format"]) != FORMAT_TAG:
            found = str(z["format"]) if "format" in z.files else "none"
            raise ArchiveError(f"{path}: unsupported archive format {found!r}, expected {FORMAT_TAG!r}")
        kind = str(z["kind"])
        if kind not in KINDS:
            raise ArchiveError(f"{path}: unknown model kind {kind!r}")
        a = {k: z[k] for k in z.files}
    manifest = json.loads(str(a["manifest"]))
    nz = Normalizer.from_dict({k[5:]: v for k, v in a.items() if k.startswith("norm_")})
    kf, kg = KernelParams.from_vector(a["kf"]), KernelParams.from_vector(a["kg"])
    mu0, nugget = float(a["mu0"]), float(a["nugget"])
    if kind == "dvshgp":
        part = Partition(a["assignments"], a["centroids"], manifest.get("M", 0))
        experts = []
        for i in range(int(manifest["effective_M"])):
            idx = a[f"e{i}_index"]
            experts.append(ExpertModel(idx, a["X"][idx], a["y"][idx], a[f"e{i}_Xm"], a[f"e{i}_Xu"],
                                       a[f"e{i}_lambda_log"]))
        man = {k: manifest[k] for k in ("M", "n0", "m0", "u0", "effective_M") if k in manifest}
        model = DvshgpModel(kf, kg, mu0, experts, part, man, nugget)
    else:
        model = VshgpModel(a["X"], a["y"], kf, kg, mu0, a["Xm"], a["Xu"], a["lambda_log"], nugget)
        if kind == "svshgp":
            model = SvshgpModel(model, ExplicitVariational(a["q_mu_m"], a["q_L_m"], a["q_mu_u"], a["q_L_u"]))
    return Archive(kind, model, nz, manifest)


def write_table(path, header, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_table(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_trace(path, rows):
    """ELBO trace: iteration, objective value, wall time in seconds."""
    write_table(path, ["iteration", "elbo", "wall_time"], rows)


def write_report(path, values: dict):
    """Key-value report, one ``key = value`` pair per line."""
    lines = []
    for k, v in values.items():
        if isinstance(v, (float, np.floating)):
            v = repr(float(v))
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        k, _, v = line.partition("=")
        v = v.strip()
        try:
            out[k.strip()] = int(v)
        except ValueError:
            try:
                out[k.strip()] = float(v)
            except ValueError:
                out[k.strip()] = v
    return out
