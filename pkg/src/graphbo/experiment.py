"""Repeated BO runs, performance metrics and CSV/SVG artifacts."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .bo import BoConfig, EuclideanFamily, KernelFamily, RunRecord, SpdeFamily, maximin_design, run
from .metric_graph import Mesh, build_mesh, load_graph
from .objectives import BENCHMARKS, AnchorField, BenchmarkObjective, InverseProblem, Objective, load_anchors

log = logging.getLogger(__name__)

FAMILIES = ("SPDE", "Euclidean")


def fixture_path(name: str) -> Path:
    """Path of a bundled graph fixture (``open_rectangle``, ``synthetic_telecom``) or a plain path."""
    p = Path(name)
    if p.exists():
        return p
    stem = name if name.endswith(".json") else name + ".json"
    bundled = Path(str(resources.files("graphbo") / "data" / stem))
    if not bundled.exists():
        raise FileNotFoundError(f"no graph file or bundled fixture named {name!r}")
    return bundled


@dataclass(frozen=True)
class ExperimentConfig:
    graph: str
    objective: Mapping[str, Any]
    bo: BoConfig = field(default_factory=BoConfig)
    families: tuple[str, ...] = FAMILIES
    n_rep: int = 20
    tol: float = 1e-6
    mesh_h: float | None = None
    alpha: float = 1.0
    outdir: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_rep < 1:
            raise ValueError("n_rep must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        bad = [f for f in self.families if f not in FAMILIES]
        if bad:
            raise ValueError(f"unknown kernel families {bad}; choose from {FAMILIES}")
        kind = str(self.objective.get("kind", "")).lower()
        if kind not in BENCHMARKS and kind != "inverse":
            raise ValueError(f"objective kind must be one of {sorted(BENCHMARKS) + ['inverse']}, got {kind!r}")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> ExperimentConfig:
        doc = dict(doc)
        bo = dict(doc.pop("bo", {}) or {})
        unknown = set(bo) - {f.name for f in dataclasses.fields(BoConfig)}
        if unknown:
            raise ValueError(f"unknown bo settings {sorted(unknown)}")
        if "stop_tol" not in bo and doc.get("early_stop", True):
            bo["stop_tol"] = float(doc.get("tol", cls.tol))
        doc.pop("early_stop", None)
        if "families" in doc:
            doc["families"] = tuple(doc["families"])
        return cls(bo=BoConfig(**bo), **doc)

    @classmethod
    def from_yaml(cls, path: str | Path) -> ExperimentConfig:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def with_seed(self, seed: int) -> ExperimentConfig:
        return dataclasses.replace(self, seed=int(seed))


@dataclass
class MetricsReport:
    """Aggregates over repetitions for one kernel family; index ``t - 1`` holds round ``t``."""

    family: str
    n_rep: int
    tol: float
    mean: np.ndarray
    median: np.ndarray
    q25: np.ndarray
    q75: np.ndarray
    reach_rate: float
    iters_to_tol: list[tuple[int, int]]  # (repetition, first t with r_t <= tol)
    initial_regret: float = math.nan

    @property
    def T(self) -> int:
        return len(self.mean)

    @property
    def final_median(self) -> float:
        return float(self.median[-1]) if self.T else self.initial_regret

    @property
    def mean_iters(self) -> float:
        return float(np.mean([n for _, n in self.iters_to_tol])) if self.iters_to_tol else math.nan


def nearest_rank(values: np.ndarray, q: float, axis: int = 0) -> np.ndarray:
    """Nearest-rank quantile: the ceil(q n)-th smallest value (1-based), no interpolation."""
    v = np.sort(values, axis=axis)
    n = v.shape[axis]
    k = max(int(math.ceil(q * n - 1e-12)), 1) - 1
    return np.take(v, k, axis=axis)


def compute_metrics(records: Sequence[RunRecord], tol: float, T: int | None = None, family: str = "") -> MetricsReport:
    if not records:
        raise ValueError("compute_metrics needs at least one record")
    if T is None:
        T = max(sum(1 for t in r.t if t > 0) for r in records)
    R = np.vstack([r.regrets(T) for r in records]) if T > 0 else np.zeros((len(records), 0))
    hits = []
    for j, row in enumerate(R):
        idx = np.flatnonzero(row <= tol)
        if idx.size:
            hits.append((j, int(idx[0]) + 1))
    if T == 0:
        init = np.array([r.initial_regret for r in records])
        reach = float(np.mean(init <= tol))
    else:
        reach = len(hits) / len(records)
    return MetricsReport(
        family=family or records[0].family,
        n_rep=len(records),
        tol=tol,
        mean=R.mean(axis=0),
        median=nearest_rank(R, 0.5),
        q25=nearest_rank(R, 0.25),
        q75=nearest_rank(R, 0.75),
        reach_rate=reach,
        iters_to_tol=hits,
        initial_regret=float(np.mean([r.initial_regret for r in records])),
    )


# -- problem setup --------------------------------------------------------------


def build_problem(cfg: ExperimentConfig, rng: np.random.Generator | None = None) -> tuple[Mesh, Objective]:
    path = fixture_path(cfg.graph)
    graph = load_graph(path)
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    h = cfg.mesh_h if cfg.mesh_h is not None else doc.get("mesh_h")
    if h is None:
        raise ValueError("mesh_h must be given in the config or the graph fixture")
    mesh = build_mesh(graph, float(h))
    odoc = dict(cfg.objective)
    kind = str(odoc["kind"]).lower()
    if kind == "inverse":
        ip = InverseProblem(mesh, float(odoc.get("chi", 0.2)), float(odoc.get("sigma_eta", 0.1)))
        source = odoc.get("source", "random")
        data_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xDA7A]))
        if source == "random":
            source = int(data_rng.integers(mesh.N))
        elif isinstance(source, Mapping):
            src = graph.point(source["edge"], float(source["s"]))
            source = int(np.argmin(graph.pairwise_distances([src], mesh.nodes)[0]))
        return mesh, ip.objective(int(source), data_rng, normalize=bool(odoc.get("normalize", True)),
                                  sigma=odoc.get("sigma"))
    if "anchors" in odoc:
        anchors = AnchorField(graph, {k: float(v) for k, v in odoc["anchors"].items()})
    else:
        anchors = load_anchors(path, graph, kind)
    return mesh, BenchmarkObjective(kind, anchors, mesh)


def make_family(name: str, mesh: Mesh, alpha: float = 1.0) -> KernelFamily:
    if name == "SPDE":
        return SpdeFamily(mesh, alpha=alpha)
    if name == "Euclidean":
        return EuclideanFamily(mesh)
    raise ValueError(f"unknown kernel family {name!r}")


def _rep_seeds(seed: int, j: int) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    design, runs = np.random.SeedSequence([seed, j]).spawn(2)
    return design, runs


def _run_repetition(args) -> list[RunRecord]:
    cfg, j, mesh, objective = args
    design_ss, run_ss = _rep_seeds(cfg.seed, j)
    rng = np.random.default_rng(design_ss)
    design = maximin_design(mesh, cfg.bo.N_init, rng)
    f = objective.values
    sd = cfg.bo.noise_std
    y0 = [float(f[i] + sd * rng.standard_normal()) if sd > 0 else float(f[i]) for i in design]
    out = []
    for name, ss in zip(cfg.families, run_ss.spawn(len(cfg.families))):
        fam = make_family(name, mesh, cfg.alpha)
        rec = run(objective, fam, cfg.bo, design, y0, np.random.default_rng(ss))
        out.append(rec)
    return out


def n_workers() -> int:
    raw = os.environ.get("GRAPHBO_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"GRAPHBO_THREADS must be an integer, got {raw!r}") from None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    objective: Objective
    records: dict[str, list[RunRecord]]
    reports: dict[str, MetricsReport]


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> ExperimentResult:
    """All repetitions; repetition ``j`` shares its initial design and initial data across families."""
    mesh, objective = build_problem(cfg)
    workers = n_workers() if workers is None else workers
    jobs = [(cfg, j, mesh, objective) for j in range(cfg.n_rep)]
    if workers > 1 and cfg.n_rep > 1:
        with ProcessPoolExecutor(max_workers=min(workers, cfg.n_rep)) as pool:
            per_rep = list(pool.map(_run_repetition, jobs))
    else:
        per_rep = [_run_repetition(a) for a in jobs]
    records = {name: [rep[k] for rep in per_rep] for k, name in enumerate(cfg.families)}
    T = cfg.bo.horizon
    reports = {name: compute_metrics(recs, cfg.tol, T, name) for name, recs in records.items()}
    for name, rep in reports.items():
        log.info("%s: reach %.2f, final median regret %.3g, mean iters %.1f", name, rep.reach_rate,
                 rep.final_median, rep.mean_iters)
    return ExperimentResult(cfg, objective, records, reports)


# -- artifacts ------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def regret_csv(reports: Mapping[str, MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["family", "t", "mean", "median", "q25", "q75"])
    for name, rep in reports.items():
        for t in range(rep.T):
            w.writerow([name, t + 1, _fmt(rep.mean[t]), _fmt(rep.median[t]), _fmt(rep.q25[t]), _fmt(rep.q75[t])])
    return buf.getvalue()


def reach_rate_csv(reports: Mapping[str, MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["family", "tol", "n_rep", "n_success", "reach_rate"])
    for name, rep in reports.items():
        w.writerow([name, _fmt(rep.tol), rep.n_rep, len(rep.iters_to_tol), _fmt(rep.reach_rate)])
    return buf.getvalue()


def iters_csv(reports: Mapping[str, MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["family", "rep", "iterations"])
    for name, rep in reports.items():
        for j, n in rep.iters_to_tol:
            w.writerow([name, j, n])
    return buf.getvalue()


def _svg(fig) -> bytes:
    import matplotlib

    buf = io.BytesIO()
    with matplotlib.rc_context({"svg.hashsalt": "graphbo", "svg.fonttype": "none"}):
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    return buf.getvalue()


def _figures(reports: Mapping[str, MetricsReport]) -> dict[str, bytes]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = {}
    names = list(reports)
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, name in enumerate(names):
        rep = reports[name]
        t = np.arange(1, rep.T + 1)
        color = f"C{k}"
        ax.fill_between(t, rep.q25, rep.q75, color=color, alpha=0.25, label=f"{name} central 50%", gid=f"band-{name}")
        ax.plot(t, rep.mean, color=color, label=f"{name} mean", gid=f"line-{name}")
    ax.set_yscale("symlog", linthresh=1e-6)
    ax.set_xlabel("iteration t")
    ax.set_ylabel("simple regret")
    ax.legend()
    out["regret.svg"] = _svg(fig)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(names, [reports[n].reach_rate for n in names], color=[f"C{k}" for k in range(len(names))])
    ax.set_ylim(0, 1)
    ax.set_ylabel("reach rate")
    out["reach_rate.svg"] = _svg(fig)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 4))
    if any(reports[n].iters_to_tol for n in names):
        means = [reports[n].mean_iters if reports[n].iters_to_tol else 0.0 for n in names]
        ax.bar(names, means, color=[f"C{k}" for k in range(len(names))])
        for k, n in enumerate(names):
            pts = [i for _, i in reports[n].iters_to_tol]
            ax.plot([k] * len(pts), pts, "k.", alpha=0.5)
            if not pts:
                ax.text(k, 0.5, "no successful runs", ha="center")
        ax.set_ylabel("iterations to Tol")
    else:
        ax.text(0.5, 0.5, "no successful runs", ha="center", va="center", transform=ax.transAxes)
        ax.set_axis_off()
    out["iters_to_tol.svg"] = _svg(fig)
    plt.close(fig)
    return out


def emit_artifacts(reports: Mapping[str, MetricsReport], outdir: str | Path,
                   records: Mapping[str, Sequence[RunRecord]] | None = None, svg: bool = True) -> list[Path]:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"regret.csv": regret_csv(reports), "reach_rate.csv": reach_rate_csv(reports),
             "iters_to_tol.csv": iters_csv(reports)}
    written = []
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8")
        written.append(out / name)
    if records:
        runs = out / "runs"
        runs.mkdir(exist_ok=True)
        for fam, recs in records.items():
            for j, rec in enumerate(recs):
                p = runs / f"{fam}_rep{j:03d}.csv"
                p.write_text(rec.to_csv(), encoding="utf-8")
                written.append(p)
    if svg:
        for name, data in _figures(reports).items():
            (out / name).write_bytes(data)
            written.append(out / name)
    return written
