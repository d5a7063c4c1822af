"""Deterministic CSV and JSON serialization for every artifact.

All floats are written with %.17g (shortest exact round trip), rows in
fixed order, JSON with sorted keys, and no timestamps, so identical
inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from tarco.compdata import CountTable, LogRatioMatrix
from tarco.correction import ProjectionReport
from tarco.cv import CvResult
from tarco.mecov import ErrorCov
from tarco.simulate import SimDataset
from tarco.solver import FitResult
from tarco.tree import TaxTree

__all__ = [
    "fmt_float",
    "write_fit",
    "write_cv",
    "write_projection_report",
    "write_sigma_csv",
    "read_sigma_csv",
    "write_replicates_csv",
    "read_replicates_csv",
    "read_counts_csv",
    "read_response_csv",
    "write_sim_bundle",
    "write_metrics_csv",
    "write_summary_csv",
]

FLOAT_FMT = "%.17g"


def fmt_float(x) -> str:
    return FLOAT_FMT % float(x)


def _open_w(path):
    return open(path, "w", newline="", encoding="utf-8")


def _write_json(path, payload) -> None:
    with _open_w(path) as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _floats(arr) -> list:
    return [float(v) for v in np.asarray(arr, dtype=float)]


def write_fit(
    out_dir: str, fit: FitResult, tree: TaxTree | None = None,
    prefix: str = "fit",
) -> list[str]:
    """FitResult as JSON plus node- and leaf-level coefficient CSVs."""
    paths = []
    payload = {
        "lam": float(fit.lam),
        "objective": float(fit.objective),
        "kkt_residual": float(fit.kkt_residual),
        "iterations": int(fit.iterations),
        "converged": bool(fit.converged),
        "polished": bool(fit.polished),
        "penalty": {
            "variant": fit.penalty.variant,
            "alpha": None if fit.penalty.alpha is None else float(fit.penalty.alpha),
        },
        "gamma": _floats(fit.gamma),
        "beta": None if fit.beta is None else _floats(fit.beta),
    }
    jpath = os.path.join(out_dir, f"{prefix}.json")
    _write_json(jpath, payload)
    paths.append(jpath)

    npath = os.path.join(out_dir, f"{prefix}_nodes.csv")
    with _open_w(npath) as fh:
        w = csv.writer(fh)
        w.writerow(["node", "label", "leaf_count", "gamma"])
        for k, g in enumerate(fit.gamma):
            label = tree.labels[k] if tree is not None else str(k)
            count = tree.leaf_count(k) if tree is not None else ""
            w.writerow([k, label, count, fmt_float(g)])
    paths.append(npath)

    if fit.beta is not None:
        lpath = os.path.join(out_dir, f"{prefix}_leaves.csv")
        with _open_w(lpath) as fh:
            w = csv.writer(fh)
            w.writerow(["leaf", "label", "beta"])
            for j, b in enumerate(fit.beta):
                label = tree.labels[j] if tree is not None else str(j)
                w.writerow([j, label, fmt_float(b)])
        paths.append(lpath)
    return paths


def write_cv(
    out_dir: str, result: CvResult, tree: TaxTree | None = None
) -> list[str]:
    """Selection curve CSV, summary JSON, and the refit files."""
    payload = {
        "k": int(result.k),
        "lam_star": float(result.lam_star),
        "lam_grid": _floats(result.lam_grid),
        "mean_loss": _floats(result.mean_loss),
        "se_loss": _floats(result.se_loss),
    }
    jpath = os.path.join(out_dir, "cv.json")
    _write_json(jpath, payload)
    cpath = os.path.join(out_dir, "cv_curve.csv")
    with _open_w(cpath) as fh:
        w = csv.writer(fh)
        w.writerow(["lam", "mean_loss", "se_loss"])
        for lam, m, s in zip(result.lam_grid, result.mean_loss, result.se_loss):
            w.writerow([fmt_float(lam), fmt_float(m), fmt_float(s)])
    return [jpath, cpath] + write_fit(out_dir, result.fit, tree)


def write_projection_report(out_dir: str, report: ProjectionReport) -> str:
    path = os.path.join(out_dir, "projection.json")
    _write_json(path, {
        "iterations": int(report.iterations),
        "primal_residual": float(report.primal_residual),
        "dual_residual": float(report.dual_residual),
        "max_weighted_deviation": float(report.max_weighted_deviation),
        "min_eigenvalue": float(report.min_eigenvalue),
        "converged": bool(report.converged),
    })
    return path


def write_sigma_csv(path: str, sigma: ErrorCov) -> str:
    """Covariance matrix with reference and provenance header comments."""
    with _open_w(path) as fh:
        fh.write(f"# ref={'' if sigma.ref is None else sigma.ref}\n")
        fh.write(f"# tau={'' if sigma.tau is None else fmt_float(sigma.tau)}\n")
        fh.write(f"# provenance={sigma.provenance}\n")
        w = csv.writer(fh)
        for row in sigma.sigma:
            w.writerow([fmt_float(v) for v in row])
    return path


def read_sigma_csv(path: str) -> ErrorCov:
    meta = {"ref": "", "tau": "", "provenance": "known"}
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
                continue
            rows.append([float(v) for v in line.split(",")])
    if not rows:
        raise ValueError(f"{path}: no covariance rows found")
    sigma = np.array(rows)
    ref = int(meta["ref"]) if meta["ref"] != "" else None
    tau = float(meta["tau"]) if meta["tau"] != "" else None
    return ErrorCov(
        sigma=sigma, ref=ref, tau=tau, provenance=meta["provenance"]
    )


def write_replicates_csv(path: str, reps: np.ndarray, ref: int, taxa) -> str:
    """Replicate log-ratio measurements in long form, one row per copy."""
    n, t, p = reps.shape
    with _open_w(path) as fh:
        fh.write(f"# ref={ref}\n")
        w = csv.writer(fh)
        w.writerow(["sample", "replicate"] + list(taxa))
        for i in range(n):
            for r in range(t):
                w.writerow(
                    [i, r] + [fmt_float(v) for v in reps[i, r]]
                )
    return path


def read_replicates_csv(path: str):
    """Returns (reps array (n, t, p), ref, taxa); groups must be balanced."""
    ref = None
    header = None
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("#"):
                key, _, value = stripped[1:].strip().partition("=")
                if key.strip() == "ref":
                    ref = int(value)
                continue
            cells = next(csv.reader([stripped]))
            if header is None:
                header = cells
                continue
            rows.append(cells)
    if header is None or header[:2] != ["sample", "replicate"]:
        raise ValueError(f"{path}: expected header sample,replicate,<taxa>")
    if ref is None:
        raise ValueError(f"{path}: missing '# ref=' header line")
    taxa = header[2:]
    by_sample: dict[int, list] = {}
    for lineno, cells in enumerate(rows, start=2):
        if len(cells) != len(header):
            raise ValueError(f"{path}: row {lineno} has {len(cells)} fields")
        by_sample.setdefault(int(cells[0]), []).append(
            [float(v) for v in cells[2:]]
        )
    counts = {len(v) for v in by_sample.values()}
    if len(counts) != 1:
        raise ValueError(f"{path}: unbalanced replicate groups {sorted(counts)}")
    order = sorted(by_sample)
    reps = np.array([by_sample[i] for i in order])
    return reps, ref, taxa


def read_counts_csv(path: str) -> CountTable:
    """Counts or compositions: header sample_id,<taxa>, one row per sample."""
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if len(header) < 2:
            raise ValueError(f"{path}: need sample_id plus at least one taxon")
        taxa = tuple(header[1:])
        ids = []
        values = []
        for lineno, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != len(header):
                raise ValueError(
                    f"{path}: row {lineno} has {len(cells)} fields, "
                    f"expected {len(header)}"
                )
            ids.append(cells[0])
            try:
                values.append([float(v) for v in cells[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}: row {lineno}: {exc}") from None
    if not values:
        raise ValueError(f"{path}: no data rows")
    return CountTable(
        values=np.array(values), sample_ids=tuple(ids), taxa=taxa
    )


def read_response_csv(path: str):
    """Header sample_id,y; returns (ids, y array)."""
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if header != ["sample_id", "y"]:
            raise ValueError(f"{path}: expected header sample_id,y")
        ids = []
        y = []
        for lineno, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != 2:
                raise ValueError(f"{path}: row {lineno} has {len(cells)} fields")
            ids.append(cells[0])
            try:
                y.append(float(cells[1]))
            except ValueError as exc:
                raise ValueError(f"{path}: row {lineno}: {exc}") from None
    if not y:
        raise ValueError(f"{path}: no data rows")
    return ids, np.array(y)


def _write_matrix_csv(path, values, taxa, ids) -> str:
    with _open_w(path) as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id"] + list(taxa))
        for sid, row in zip(ids, values):
            w.writerow([sid] + [fmt_float(v) for v in row])
    return path


def _write_vector_csv(path, values, name, ids=None) -> str:
    with _open_w(path) as fh:
        w = csv.writer(fh)
        w.writerow(["index" if ids is None else "sample_id", name])
        keys = range(len(values)) if ids is None else ids
        for key, v in zip(keys, values):
            w.writerow([key, fmt_float(v)])
    return path


def write_sim_bundle(out_dir: str, ds: SimDataset) -> list[str]:
    """Counts-free dataset bundle: log-ratio CSVs, truth, tree, config.

    ``composition.csv`` carries the softmax inverse of the contaminated
    coordinates so the fit and cv commands can consume the bundle as a
    table input with the recorded reference.
    """
    from tarco.compdata import alr_inverse  # local to avoid cycle at import

    os.makedirs(out_dir, exist_ok=True)
    taxa = list(ds.tree.leaf_labels)
    ids = [f"s{i}" for i in range(ds.config.n)]
    paths = [
        _write_matrix_csv(os.path.join(out_dir, "z.csv"), ds.z.values, taxa, ids),
        _write_matrix_csv(
            os.path.join(out_dir, "ztilde.csv"), ds.ztilde.values, taxa, ids
        ),
        _write_matrix_csv(
            os.path.join(out_dir, "composition.csv"),
            alr_inverse(ds.ztilde, sample_ids=ids, taxa=taxa).values,
            taxa, ids,
        ),
        _write_vector_csv(os.path.join(out_dir, "y.csv"), ds.y, "y", ids),
        _write_vector_csv(
            os.path.join(out_dir, "beta_star.csv"), ds.beta_star, "beta"
        ),
        _write_vector_csv(
            os.path.join(out_dir, "gamma_star.csv"), ds.gamma_star, "gamma"
        ),
        write_replicates_csv(
            os.path.join(out_dir, "replicates.csv"),
            ds.replicates, ds.z.ref, taxa,
        ),
        write_sigma_csv(os.path.join(out_dir, "sigma_u.csv"), ds.sigma),
    ]
    tpath = os.path.join(out_dir, "tree.nwk")
    with _open_w(tpath) as fh:
        fh.write(newick_text(ds.tree) + "\n")
    paths.append(tpath)
    cfg = ds.config
    cpath = os.path.join(out_dir, "config.json")
    _write_json(cpath, {
        "n": cfg.n, "p": cfg.p, "rho": cfg.rho, "tau": cfg.tau,
        "sigma": cfg.sigma, "t_replicates": cfg.t_replicates,
        "misspecified": cfg.misspecified, "seed": cfg.seed,
        "newick": cfg.newick,
    })
    paths.append(cpath)
    return paths


def newick_text(tree: TaxTree) -> str:
    """Serialize a tree to Newick, preserving the leaf indexing.

    Children are emitted in order of their smallest leaf index; clades
    cover contiguous leaf ranges, so re-parsing the text reproduces the
    identical node numbering.
    """

    def quote(label: str) -> str:
        if label and all(ch.isalnum() or ch in "_.-" for ch in label):
            return label
        return "'" + label.replace("'", "''") + "'"

    def ordered(nodes) -> list:
        return sorted(nodes, key=lambda k: min(tree.leaf_sets[k]))

    def render(node: int) -> str:
        kids = tree.children[node]
        if not kids:
            return quote(tree.labels[node])
        inner = ",".join(render(k) for k in ordered(kids))
        return f"({inner}){quote(tree.labels[node])}"

    top = [k for k in range(tree.n_nodes) if tree.parent[k] == -1]
    inner = ",".join(render(k) for k in ordered(top))
    return f"({inner});"


def write_metrics_csv(
    path: str, rows, include_gr: bool = True
) -> str:
    """Per-replicate metrics, one row per (method, replicate)."""
    cols = ["method", "replicate", "mspe", "ae"] + (
        ["gr"] if include_gr else []
    )
    with _open_w(path) as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            out = [row["method"], row["replicate"],
                   fmt_float(row["mspe"]), fmt_float(row["ae"])]
            if include_gr:
                out.append(fmt_float(row["gr"]))
            w.writerow(out)
    return path


def write_summary_csv(
    path: str, summary, include_gr: bool = True, failures: int = 0
) -> str:
    """Mean and sd per method and metric, plus the failure count."""
    metrics = ["mspe", "ae"] + (["gr"] if include_gr else [])
    cols = ["method", "replicates"]
    for m in metrics:
        cols += [f"{m}_mean", f"{m}_sd"]
    with _open_w(path) as fh:
        fh.write(f"# excluded_failures={failures}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for row in summary:
            out = [row["method"], row["replicates"]]
            for m in metrics:
                out += [fmt_float(row[f"{m}_mean"]), fmt_float(row[f"{m}_sd"])]
            w.writerow(out)
    return path
