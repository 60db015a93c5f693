"""File-backed experiment steps behind the command-line verbs.

Every step is a pure function of its configuration and seed. Numeric results
go to CSV files with a header row; wall-clock information only goes to the
``*.meta.json`` sidecars.
"""

from __future__ import annotations

import csv
import json
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import ablation_label, parse_ablation
from .coupling import CouplingPlan
from .datasets import gen_toy, mixture_for
from .denoiser import Mlp, TrainConfig, train
from .estimators import DualBridgeTranslator, SchrodingerBridgeTranslator, SDEditTranslator
from .metrics import EvalReport, evaluate, write_reports

METHODS = ("lsb", "sdedit", "dual-bridge")
DATA_FILES = {
    "source": ("source.csv", "source", "source/train"),
    "target": ("target.csv", "target", "target/train"),
    "source_test": ("source_test.csv", "source", "source/test"),
    "target_test": ("target_test.csv", "target", "target/test"),
}


class MissingPrerequisiteError(FileNotFoundError):
    pass


def write_points(path, X):
    X = np.asarray(X, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{k}" for k in range(X.shape[1])])
        for row in X:
            w.writerow([repr(float(v)) for v in row])


def read_points(path):
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisiteError(f"{path} not found; run gen-data first")
    X = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return X


def write_meta(path, cfg, command, started, **extra):
    meta = {
        "command": command,
        "started": started.isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "config": cfg.values,
        **extra,
    }
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _now():
    return datetime.now(timezone.utc)


def make_data(cfg, seed):
    """Train and held-out batches for both domains, keyed as in ``DATA_FILES``."""
    names = {"source": cfg.get_str("data.source"), "target": cfg.get_str("data.target")}
    sizes = {"train": cfg.get_int("data.n_train"), "test": cfg.get_int("data.n_test")}
    out = {}
    for key, (_, domain, stream) in DATA_FILES.items():
        out[key] = gen_toy(names[domain], sizes[stream.split("/")[1]], seed, stream=stream)
    return out


def gen_data(cfg, out_dir, seed):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    data = make_data(cfg, seed)
    for key, (fname, _, _) in DATA_FILES.items():
        write_points(out_dir / fname, data[key])
    write_meta(out_dir / "gen-data.meta.json", cfg, "gen-data", started, seed=seed)
    return data


def load_data(out_dir):
    return {key: read_points(Path(out_dir) / fname) for key, (fname, _, _) in DATA_FILES.items()}


def train_config(cfg, seed):
    return TrainConfig(steps=cfg.get_int("train.steps"),
                       batch_size=cfg.get_int("train.batch_size"),
                       lr=cfg.get_float("train.lr"),
                       cond_dropout=cfg.get_float("train.cond_dropout"),
                       hidden=tuple(cfg.get_list("train.hidden", int)), seed=seed)


def checkpoint_path(cfg, out_dir):
    return Path(cfg.get_str("train.checkpoint") or Path(out_dir) / "model.ckpt")


def train_model(cfg, out_dir, seed, data=None):
    """Train on the domain files in ``out_dir``; writes the checkpoint and ``loss.csv``."""
    out_dir = Path(out_dir)
    started = _now()
    data = load_data(out_dir) if data is None else data
    model, history = train(data["source"], data["target"], train_config(cfg, seed),
                           return_history=True)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.save(checkpoint_path(cfg, out_dir))
    with open(out_dir / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(history, 1):
            w.writerow([i, repr(float(v))])
    write_meta(out_dir / "train.meta.json", cfg, "train", started, seed=seed)
    return model, history


def load_model(cfg, out_dir):
    path = checkpoint_path(cfg, out_dir)
    if not path.exists():
        raise MissingPrerequisiteError(f"{path} not found; run train first")
    return Mlp.load(path)


def _cached_plan(path, X0, X1, reg):
    if not path.exists():
        return None
    plan = CouplingPlan.load(path)
    pot = plan.log_potentials
    if (pot is None or not np.isclose(pot[2], reg) or plan.x0_atoms.shape != X0.shape
            or plan.x1_atoms.shape != X1.shape or not np.array_equal(plan.x0_atoms, X0)
            or not np.array_equal(plan.x1_atoms, X1)):
        return None
    return plan


def build_translator(cfg, method, seed, nfe=None, omega=None, ablate=(), model=None):
    """Unfitted estimator for ``method`` with config values and overrides applied."""
    nfe = cfg.get_int("bridge.nfe") if nfe is None else int(nfe)
    omega = cfg.get_float("bridge.omega") if omega is None else float(omega)
    sqrt_tau = float(np.sqrt(cfg.tau))
    t0 = cfg.get_float("sb.t0")
    if "cfg" in ablate:
        omega = 1.0
    if method == "lsb":
        backend = cfg.get_str("bridge.backend")
        mixtures = None
        if backend == "analytic":
            p0 = mixture_for(cfg.get_str("data.source"))
            p1 = mixture_for(cfg.get_str("data.target"))
            mixtures = (p0, p1) if p0 is not None and p1 is not None else None
        return SchrodingerBridgeTranslator(
            backend=backend, sqrt_tau=sqrt_tau, t0=t0, t_clamp=cfg.get_float("sb.t_clamp"),
            omega=omega, nfe=nfe,
            final_denoise=cfg.get_bool("bridge.final_denoise") and "denoise" not in ablate,
            snr_matching="snr" not in ablate, time_dependent_eps="tdeps" not in ablate,
            mixtures=mixtures, sinkhorn_tol=cfg.get_float("sinkhorn.tol"),
            sinkhorn_max_iter=cfg.get_int("sinkhorn.max_iter"), denoiser=model, seed=seed)
    if set(ablate) - {"cfg"}:
        raise ValueError(f"{method} only supports the cfg ablation")
    if method == "sdedit":
        return SDEditTranslator(sqrt_tau=sqrt_tau, t0=t0, omega=omega, nfe=nfe,
                                denoiser=model, seed=seed)
    if method == "dual-bridge":
        return DualBridgeTranslator(omega=omega, nfe=nfe, denoiser=model,
                                    alpha_bar_min=cfg.get_float("baseline.alpha_bar_min"))
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def _fit_translator(cfg, est, data, out_dir):
    X = np.vstack([data["source"], data["target"]])
    y = np.r_[np.zeros(len(data["source"]), int), np.ones(len(data["target"]), int)]
    if isinstance(est, SchrodingerBridgeTranslator) and est.backend == "oracle" and out_dir:
        path = Path(out_dir) / "plan.npz"
        plan = _cached_plan(path, data["source"], data["target"], 2 * est.tau)
        est.set_params(plan=plan).fit(X, y)
        if plan is None:
            est.plan_.save(path)
        return est
    return est.fit(X, y)


def run_one(cfg, method, seed, data, nfe=None, omega=None, ablate=(), model=None,
            out_dir=None, keep_states=False):
    """Fit, translate the held-out source batch and evaluate it.

    Returns ``(report, translated, trajectory_or_None)``.
    """
    est = build_translator(cfg, method, seed, nfe, omega, ablate, model)
    _fit_translator(cfg, est, data, out_dir)
    start = time.perf_counter()
    traj = None
    if method == "lsb":
        traj = est.translate(data["source_test"], keep_states=keep_states)
        out = traj.final
        steps = est._config().n_steps
    else:
        out = est.transform(data["source_test"])
        steps = est.nfe
    values = evaluate(data["source_test"], out, data["target_test"], seed=seed,
                      n_proj=cfg.get_int("eval.n_proj"))
    report = EvalReport(method=method, nfe=est.nfe, seed=seed, flags=ablation_label(ablate),
                        omega=est.omega, values=values, n_source=len(out),
                        n_target=len(data["target_test"]), nfe_used=est.nfe_used_,
                        euler_steps=steps, runtime=time.perf_counter() - start)
    return report, out, traj


def needs_model(cfg, method):
    return method != "lsb" or cfg.get_str("bridge.backend") == "learned"


def translate(cfg, out_dir, seed, method=None, keep_states=None):
    """Translate ``source_test.csv``; writes translated, report and optional trajectory CSVs."""
    out_dir = Path(out_dir)
    started = _now()
    method = cfg.get_str("bridge.method") if method is None else method
    keep = cfg.get_bool("bridge.save_trajectory") if keep_states is None else keep_states
    data = load_data(out_dir)
    model = load_model(cfg, out_dir) if needs_model(cfg, method) else None
    ablate = parse_ablation(cfg.get_str("bridge.ablate"))
    report, out, traj = run_one(cfg, method, seed, data, ablate=ablate, model=model,
                                out_dir=out_dir, keep_states=keep and method == "lsb")
    if not all(np.isfinite(v) for v in report.values.values()):
        report.status = "non-finite metric"
    write_points(out_dir / "translated.csv", out)
    write_reports(out_dir / "report.csv", [report])
    if traj is not None and keep:
        traj.to_csv(out_dir / "trajectory.csv")
    write_meta(out_dir / "translate.meta.json", cfg, "translate", started, seed=seed,
               runtime=report.runtime)
    return report


def sweep(cfg, out_dir, nfe_list=None, methods=None, seeds=None, ablations=None):
    """One report row per (method, nfe, omega, seed, ablation set).

    Each seed draws its own data and trains its own model when a learned
    component is needed. Failed rows are recorded with their error and the
    sweep continues.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    nfe_list = cfg.get_list("sweep.nfe", int) if nfe_list is None else nfe_list
    methods = cfg.get_list("sweep.methods") if methods is None else methods
    seeds = cfg.get_list("sweep.seeds", int) if seeds is None else seeds
    omegas = cfg.get_list("sweep.omega", float) or [cfg.get_float("bridge.omega")]
    if ablations is None:
        ablations = [parse_ablation(a) for a in cfg.get_str("sweep.ablations").split(";")]
    reports = []
    for seed in seeds:
        data = make_data(cfg, seed)
        model = None
        if any(needs_model(cfg, m) for m in methods):
            model = train(data["source"], data["target"], train_config(cfg, seed))
        for method in methods:
            for nfe in nfe_list:
                for omega in omegas:
                    for ablate in (ablations if method == "lsb" else [()]):
                        reports.append(_sweep_row(cfg, method, seed, data, nfe, omega,
                                                  ablate, model))
    write_reports(out_dir / "sweep.csv", reports)
    write_meta(out_dir / "sweep.meta.json", cfg, "sweep", started,
               runtimes=[r.runtime for r in reports])
    return reports


def _sweep_row(cfg, method, seed, data, nfe, omega, ablate, model):
    try:
        report, _, _ = run_one(cfg, method, seed, data, nfe=nfe, omega=omega, ablate=ablate,
                               model=model)
        if not all(np.isfinite(v) for v in report.values.values()):
            report.status = "non-finite metric"
        return report
    except (ValueError, ArithmeticError) as exc:
        return EvalReport(method=method, nfe=nfe, seed=seed, flags=ablation_label(ablate),
                          omega=omega, status=f"error: {exc}")
