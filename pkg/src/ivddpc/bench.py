"""Experiment orchestration: data collection, SNR calibration, Monte Carlo
campaigns, summaries, and the command-line interface.

Campaigns are fully determined by (config, base seed): per-run seeds are
derived by hashing ``(base_seed, replicate, role)``, every variant of a
replicate sees the same noise realizations (paired design), and all outputs
except wall times are byte-reproducible. Wall times are segregated into
``runtimes.csv`` so the record files stay deterministic.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import jsonio
from .control import (ControllerVariant, ControlTask, RunRecord, VariantTag, VARIANT_IV,
                      make_task, receding_horizon_run)
from .hankel import HankelBundle, build_bundle
from .iv import CoprimeFactors, InstrumentSet, IvVariant, build_iv, iv_noise_correlation, \
    lcf, predictor, projection
from .sslib import ControllerModel, StateSpaceModel, Trajectory, excitation_reference, \
    gaussian_noise, kalman_gain, simulate_closed_loop, square_wave

SCHEMA_VERSION = 1
RECORD_COLUMNS = ["fingerprint", "variant", "snr_db", "lam", "replicate", "seed", "J",
                  "status", "solver_iterations"]


class ConfigError(ValueError):
    """Invalid experiment configuration; carries the offending keys."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config: " + "; ".join(self.problems))


# ---------------------------------------------------------------------------
# Built-in systems
# ---------------------------------------------------------------------------

def benchmark_plant() -> StateSpaceModel:
    """Second-order SISO benchmark plant with unit feedthrough."""
    return StateSpaceModel(
        A=np.array([[0.7326, -0.0861], [0.1722, 0.9909]]),
        B=np.array([[0.0609], [0.0064]]),
        C=np.array([[0.0, 1.4142]]),
        D=np.array([[1.0]]),
    )


def benchmark_controller() -> ControllerModel:
    """Integral-action SISO loop controller for the benchmark plant."""
    return ControllerModel(
        A=np.array([[1.0, 0.0], [0.0722, 1.0]]),
        B=np.array([[0.2609], [0.164]]),
        C=np.array([[0.8, 0.2142]]),
        D=np.array([[-0.07]]),
    )


def mimo_controller() -> ControllerModel:
    """Two-by-two loop controller with per-channel integral action."""
    return ControllerModel(
        A=np.array([[0.0, 0.0, 0.0, 0.0],
                    [0.0, 1.0, 0.0, 0.0],
                    [0.0, 0.0, 0.0, 0.0],
                    [0.0, 0.0, 0.0, 1.0]]),
        B=np.array([[0.0, 0.3260],
                    [0.0, 0.0802],
                    [0.6250, 0.0],
                    [0.2990, 0.0]]),
        C=np.array([[1.0, 1.0, 0.0, 0.0],
                    [0.0, 0.0, 1.0, 1.0]]),
        D=np.zeros((2, 2)),
    )


def generate_mimo_surrogate(seed: int = 7, n: int = 4, attempts: int = 10000) -> StateSpaceModel:
    """Fixed-seed random stable 2x2 plant that the MIMO loop controller
    stabilizes; the committed data file is the output of this generator."""
    ctrl = mimo_controller()
    rng = np.random.default_rng(seed)
    for _ in range(attempts):
        A = rng.standard_normal((n, n)) * 0.5
        rho = max(abs(np.linalg.eigvals(A)))
        A *= 0.9 / max(rho, 1e-9)
        B = rng.standard_normal((n, 2)) * 0.5
        C = rng.standard_normal((2, n)) * 0.5
        D = np.zeros((2, 2))
        plant = StateSpaceModel(A=A, B=B, C=C, D=D)
        try:
            cl = _closed_loop_matrix(plant, ctrl)
        except np.linalg.LinAlgError:
            continue
        if max(abs(np.linalg.eigvals(cl))) < 0.97:
            return plant
    raise RuntimeError("no stabilizable surrogate found; widen the search")


def _closed_loop_matrix(plant: StateSpaceModel, ctrl: ControllerModel) -> np.ndarray:
    m = plant.m
    Minv = np.linalg.inv(np.eye(m) + ctrl.D @ plant.D)
    Kx = -Minv @ ctrl.D @ plant.C
    Kc = Minv @ ctrl.C
    A11 = plant.A + plant.B @ Kx
    A12 = plant.B @ Kc
    A21 = -ctrl.B @ (plant.C + plant.D @ Kx)
    A22 = ctrl.A - ctrl.B @ plant.D @ Kc
    return np.block([[A11, A12], [A21, A22]])


def mimo_surrogate_plant() -> StateSpaceModel:
    """The committed synthetic 2x2 plant (see :func:`generate_mimo_surrogate`)."""
    path = Path(__file__).parent / "data" / "mimo_surrogate.json"
    with open(path) as fh:
        return jsonio.model_from_json(json.load(fh))


_BUILTIN_PLANTS = {"siso_benchmark": benchmark_plant, "mimo_surrogate": mimo_surrogate_plant}
_BUILTIN_CONTROLLERS = {"siso_benchmark": benchmark_controller, "mimo_benchmark": mimo_controller}


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------

def derive_seed(base_seed: int, replicate: int, role: str) -> int:
    """SHA-256 of ``"{base}:{replicate}:{role}"``, truncated to 63 bits.

    Role strings keep replicate noise stable when variants are added."""
    digest = hashlib.sha256(f"{base_seed}:{replicate}:{role}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


# ---------------------------------------------------------------------------
# Reference programs
# ---------------------------------------------------------------------------

def build_reference(spec: dict, length: Optional[int] = None, channels: int = 1,
                    base_seed: int = 0, replicate: int = 0) -> np.ndarray:
    """Materialize a reference program from its JSON spec.

    Kinds: square, excitation, constant, white, channels (one sub-spec per
    output channel). ``length`` overrides/extends where the kind allows it.
    """
    kind = spec.get("kind")
    if kind == "channels":
        subs = spec["channels"]
        cols = [build_reference(s, length=length, channels=1, base_seed=base_seed,
                                replicate=replicate) for s in subs]
        n = min(c.shape[0] for c in cols)
        return np.hstack([c[:n] for c in cols])
    if kind == "square":
        n = length if length is not None else spec.get("length")
        if n is None:
            raise ConfigError(["reference.length required for kind=square"])
        sig = square_wave(spec["period"], spec.get("duty", 0.5), spec["amplitude"], n,
                          spec.get("phase", 0))
    elif kind == "excitation":
        sig = excitation_reference(spec["period"], spec.get("duty", 0.5), spec["amplitudes"])
        if length is not None and sig.shape[0] < length:
            raise ConfigError([f"excitation reference too short: {sig.shape[0]} < {length}"])
        if length is not None:
            sig = sig[:length]
    elif kind == "constant":
        n = length if length is not None else spec.get("length")
        if n is None:
            raise ConfigError(["reference.length required for kind=constant"])
        sig = np.full(n, float(spec.get("value", 0.0)))
    elif kind == "white":
        n = length if length is not None else spec.get("length")
        if n is None:
            raise ConfigError(["reference.length required for kind=white"])
        role = "reference" + (f":{replicate}" if spec.get("per_replicate") else "")
        sig = gaussian_noise(derive_seed(base_seed, replicate if spec.get("per_replicate") else 0,
                                         role), spec.get("sigma", 1.0), n, 1)[:, 0]
    else:
        raise ConfigError([f"unknown reference kind: {kind!r}"])
    sig = sig[:, None]
    if channels > 1:
        sig = np.tile(sig, (1, channels))
    return sig


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    raw: dict
    name: str
    plant: StateSpaceModel
    controller: ControllerModel
    collection: dict
    L_p: int
    L_f: int
    task: dict
    variants: list
    lambdas: list
    snr_list: list
    replicates: int
    base_seed: int
    qw_scale: float
    norm_order: int

    @property
    def fingerprint(self) -> str:
        return jsonio.fingerprint(self.raw)

    def collection_reference(self, replicate: int = 0) -> np.ndarray:
        return build_reference(self.collection["reference"], channels=self.plant.p,
                               base_seed=self.base_seed, replicate=replicate)

    def control_task(self) -> ControlTask:
        span = self.L_p + int(self.task["n_steps"]) + self.L_f
        ref = build_reference(self.task["reference"], length=span, channels=self.plant.p,
                              base_seed=self.base_seed)
        return make_task(ref, self.task["q_step"], self.task["r_step"], self.L_p, self.L_f,
                         int(self.task["n_steps"]),
                         u_min=self.task.get("u_min"), u_max=self.task.get("u_max"),
                         y_min=self.task.get("y_min"), y_max=self.task.get("y_max"))


def _parse_system(doc, builtins, loader, what, problems):
    if not isinstance(doc, dict):
        problems.append(f"{what}: must be an object")
        return None
    if "builtin" in doc:
        name = doc["builtin"]
        if name not in builtins:
            problems.append(f"{what}.builtin: unknown name {name!r} "
                            f"(choices: {sorted(builtins)})")
            return None
        return builtins[name]()
    try:
        return loader(doc)
    except (KeyError, ValueError) as exc:
        problems.append(f"{what}: {exc}")
        return None


def parse_config(doc: dict) -> ExperimentConfig:
    """Validate a config document; raises ConfigError listing bad keys."""
    problems = []
    if doc.get("schema_version") != SCHEMA_VERSION:
        problems.append(f"schema_version: expected {SCHEMA_VERSION}, got "
                        f"{doc.get('schema_version')!r}")
    plant = _parse_system(doc.get("plant"), _BUILTIN_PLANTS, jsonio.model_from_json,
                          "plant", problems)
    ctrl = _parse_system(doc.get("controller"), _BUILTIN_CONTROLLERS,
                         jsonio.controller_from_json, "controller", problems)
    horizons = doc.get("horizons", {})
    L_p = horizons.get("L_p")
    L_f = horizons.get("L_f")
    for key, val in (("L_p", L_p), ("L_f", L_f)):
        if not isinstance(val, int) or val < 1:
            problems.append(f"horizons.{key}: positive integer required, got {val!r}")
    collection = doc.get("collection")
    if not isinstance(collection, dict) or "reference" not in collection:
        problems.append("collection.reference: required")
    task = doc.get("task")
    if not isinstance(task, dict):
        problems.append("task: required object")
        task = {}
    for key in ("reference", "q_step", "r_step", "n_steps"):
        if key not in task:
            problems.append(f"task.{key}: required")
    variants = doc.get("variants", [])
    parsed_variants = []
    for v in variants:
        try:
            parsed_variants.append(VariantTag(v))
        except ValueError:
            problems.append(f"variants: unknown variant {v!r}")
    if not parsed_variants:
        problems.append("variants: at least one required")
    lambdas = [float(x) for x in doc.get("lambdas", [])]
    if VariantTag.RDDPC_IV in parsed_variants and not lambdas:
        problems.append("lambdas: required when rddpc_iv is listed")
    snr_list = doc.get("snr_db", [])
    if not isinstance(snr_list, list) or not snr_list:
        problems.append("snr_db: non-empty list required")
        snr_list = []
    elif not all(s is None or isinstance(s, (int, float)) for s in snr_list):
        problems.append("snr_db: entries must be numbers or null (null = noise-free)")
        snr_list = []
    replicates = doc.get("replicates")
    if not isinstance(replicates, int) or replicates < 1:
        problems.append(f"replicates: positive integer required, got {replicates!r}")
    base_seed = doc.get("base_seed")
    if not isinstance(base_seed, int):
        problems.append(f"base_seed: integer required, got {base_seed!r}")
    if problems:
        raise ConfigError(problems)
    cfg = ExperimentConfig(
        raw=doc, name=doc.get("name", "experiment"), plant=plant, controller=ctrl,
        collection=collection, L_p=L_p, L_f=L_f, task=task, variants=parsed_variants,
        lambdas=lambdas, snr_list=[None if s is None else float(s) for s in snr_list],
        replicates=replicates,
        base_seed=base_seed, qw_scale=float(doc.get("qw_scale", 0.01)),
        norm_order=int(doc.get("norm_order", 2)),
    )
    try:
        cfg.control_task()
        cfg.collection_reference()
    except (ConfigError, ValueError, KeyError) as exc:
        raise ConfigError([f"task/collection materialization failed: {exc}"])
    if cfg.collection_reference().shape[0] < L_p + L_f:
        raise ConfigError(["collection.reference: shorter than L_p + L_f"])
    if ctrl.p != plant.p or ctrl.m != plant.m:
        raise ConfigError(["controller: I/O dimensions do not match the plant"])
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"])
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"])
    return parse_config(doc)


# ---------------------------------------------------------------------------
# SNR calibration and data collection
# ---------------------------------------------------------------------------

def measure_snr(plant: StateSpaceModel, ctrl: ControllerModel, reference, sigma_e: float,
                seed) -> float:
    """SNR in dB: total variance of the noise-free closed-loop output over
    the variance of the noise-induced component, on one realization."""
    reference = np.asarray(reference, dtype=float)
    e_unit = gaussian_noise(seed, 1.0, reference.shape[0], plant.p)
    clean = simulate_closed_loop(plant, ctrl, reference)
    noisy = simulate_closed_loop(plant, ctrl, reference, sigma_e * e_unit)
    num = float(np.var(clean.y))
    den = float(np.var(noisy.y - clean.y))
    if den == 0.0:
        return np.inf
    return 10.0 * np.log10(num / den)


def calibrate_snr(plant: StateSpaceModel, ctrl: ControllerModel, reference,
                  target_snr_db: float, seed, tol_db: float = 0.1,
                  log_sigma_lo: float = -8.0, log_sigma_hi: float = 4.0,
                  max_iter: int = 200) -> float:
    """Bisection on log sigma_e until the measured SNR is within tol_db.

    By superposition the noise-induced output component for one realization
    scales exactly linearly in sigma_e, so one clean and one unit-noise pass
    suffice to evaluate the measured SNR at every bisection point.
    """
    if not np.isfinite(target_snr_db):
        raise ValueError("target SNR must be finite")
    reference = np.asarray(reference, dtype=float)
    e_unit = gaussian_noise(seed, 1.0, reference.shape[0], plant.p)
    clean = simulate_closed_loop(plant, ctrl, reference)
    noisy = simulate_closed_loop(plant, ctrl, reference, e_unit)
    var_clean = float(np.var(clean.y))
    var_unit = float(np.var(noisy.y - clean.y))
    if var_unit == 0.0 or var_clean == 0.0:
        raise ValueError("degenerate reference or noise path; cannot calibrate")

    def measured(log_sigma):
        return 10.0 * np.log10(var_clean / (10.0 ** (2.0 * log_sigma) * var_unit))

    lo, hi = log_sigma_lo, log_sigma_hi
    if not (measured(lo) > target_snr_db > measured(hi)):
        raise ValueError(
            f"target {target_snr_db} dB not bracketed by sigma in "
            f"[1e{log_sigma_lo:.0f}, 1e{log_sigma_hi:.0f}]")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        snr_mid = measured(mid)
        if abs(snr_mid - target_snr_db) <= tol_db:
            return float(10.0 ** mid)
        if snr_mid > target_snr_db:
            lo = mid
        else:
            hi = mid
    raise ValueError("SNR bisection did not converge")


def attach_noise_model(plant: StateSpaceModel, ctrl: ControllerModel, reference,
                       target_snr_db, seed, qw_scale: float = 0.01):
    """Calibrated (plant-with-K, sigma_e) for a target SNR.

    The innovation gain uses weights Qw = qw_scale*I, Rv = sigma_e^2*I; since
    the gain feeds back into the measured SNR, one fixed-point pass runs the
    calibration, refreshes the gain, and recalibrates. A target of None means
    a noise-free dataset: sigma_e = 0 with a zero innovation gain.
    """
    if target_snr_db is None:
        return plant.with_gain(np.zeros((plant.n, plant.p))), 0.0
    sigma = 1.0
    plant_k = plant
    for _ in range(2):
        K = kalman_gain(plant, qw_scale * np.eye(plant.n), sigma ** 2 * np.eye(plant.p))
        plant_k = plant.with_gain(K)
        sigma = calibrate_snr(plant_k, ctrl, reference, target_snr_db, seed)
    return plant_k, sigma


def collect(config: ExperimentConfig, snr_db: Optional[float] = None, replicate: int = 0,
            out_dir: Optional[Path] = None):
    """Simulate one offline closed-loop dataset and build its Hankel bundle.

    With ``out_dir`` set, the dataset is cached under a fingerprint of the
    full collection recipe (plant, controller, reference, horizons, noise
    level, seeds); a rerun with the same fingerprint loads the cache instead
    of re-simulating.
    """
    snr_db = config.snr_list[0] if snr_db is None else float(snr_db)
    recipe = {
        "plant": jsonio.model_to_json(config.plant),
        "controller": jsonio.controller_to_json(config.controller),
        "collection": config.collection,
        "horizons": {"L_p": config.L_p, "L_f": config.L_f},
        "snr_db": snr_db,
        "replicate": replicate,
        "base_seed": config.base_seed,
        "qw_scale": config.qw_scale,
        "prng": "numpy-PCG64/standard_normal",
    }
    fp = jsonio.fingerprint(recipe)
    cache_file = None
    if out_dir is not None:
        cache_file = Path(out_dir) / "cache" / f"collect_{fp}.json"
        if cache_file.exists():
            with open(cache_file) as fh:
                doc = json.load(fh)
            traj = jsonio.trajectory_from_json(doc["trajectory"])
            bundle = build_bundle(traj, config.L_p, config.L_f)
            meta = doc["meta"]
            meta["cache_hit"] = True
            return traj, bundle, meta

    reference = config.collection_reference(replicate)
    cal_seed = derive_seed(config.base_seed, 0, f"calibrate:{snr_db}")
    plant_k, sigma_e = attach_noise_model(config.plant, config.controller, reference,
                                          snr_db, cal_seed, config.qw_scale)
    e_seed = derive_seed(config.base_seed, replicate, f"offline:{snr_db}")
    e = sigma_e * gaussian_noise(e_seed, 1.0, reference.shape[0], config.plant.p)
    traj = simulate_closed_loop(plant_k, config.controller, reference, e)
    bundle = build_bundle(traj, config.L_p, config.L_f)
    meta = {
        "fingerprint": fp,
        "snr_db": snr_db,
        "sigma_e": sigma_e,
        "K": jsonio.matrix_to_json(plant_k.K),
        "n_samples": int(reference.shape[0]),
        "n_cols": bundle.n_cols,
        "replicate": replicate,
        "prng": "numpy-PCG64/standard_normal",
        "snr_definition": "10*log10(var(noise-free y) / var(noise-induced y)) on the "
                          "offline closed-loop dataset",
        "cache_hit": False,
    }
    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        with open(cache_file, "w") as fh:
            json.dump({"schema_version": SCHEMA_VERSION,
                       "trajectory": jsonio.trajectory_to_json(traj), "meta": meta}, fh)
    return traj, bundle, meta


# ---------------------------------------------------------------------------
# Monte Carlo campaign
# ---------------------------------------------------------------------------

def _variant_ivsets(bundle: HankelBundle, variants, factors: Optional[CoprimeFactors]):
    """One instrument set per distinct recipe, fitted lazily."""
    needed = {}
    for tag in variants:
        ivv = VARIANT_IV.get(tag)
        if ivv is not None and ivv not in needed:
            needed[ivv] = build_iv(bundle, ivv, factors)
    for ivv, ivset in needed.items():
        predictor(bundle, ivset)
        if any(t is VariantTag.RDDPC_IV for t in variants) and ivv is IvVariant.COMBINED:
            projection(bundle, ivset)
    return needed


def _replicate_runs(config: ExperimentConfig, snr_db: float, replicate: int,
                    plant_k: StateSpaceModel, sigma_e: float) -> list:
    """All runs of one replicate: shared offline data, paired online noise."""
    reference = config.collection_reference(replicate)
    e_seed = derive_seed(config.base_seed, replicate, f"offline:{snr_db}")
    e = sigma_e * gaussian_noise(e_seed, 1.0, reference.shape[0], config.plant.p)
    traj = simulate_closed_loop(plant_k, config.controller, reference, e)
    bundle = build_bundle(traj, config.L_p, config.L_f)
    factors = lcf(config.controller)
    ivsets = _variant_ivsets(bundle, config.variants, factors)
    task = config.control_task()
    run_seed = derive_seed(config.base_seed, replicate, f"online:{snr_db}")
    noise = sigma_e * gaussian_noise(run_seed, 1.0, config.L_p + task.N_c, config.plant.p)
    records = []
    for tag in config.variants:
        lams = config.lambdas if tag is VariantTag.RDDPC_IV else [None]
        for lam in lams:
            variant = ControllerVariant(tag=tag, lam=lam, norm_order=config.norm_order)
            ivset = ivsets.get(VARIANT_IV.get(tag))
            record = receding_horizon_run(
                plant_k, variant, task, noise, config.controller,
                bundle=bundle, ivset=ivset, seed=run_seed,
                fingerprint=config.fingerprint, snr_db=snr_db, replicate=replicate)
            records.append(record)
    return records


def _worker(args):
    config_doc, snr_db, replicate, plant_k_doc, sigma_e = args
    config = parse_config(config_doc)
    plant_k = jsonio.model_from_json(plant_k_doc)
    t0 = time.perf_counter()
    records = _replicate_runs(config, snr_db, replicate, plant_k, sigma_e)
    return snr_db, replicate, records, time.perf_counter() - t0


def monte_carlo(config: ExperimentConfig, jobs: int = 1, out_dir: Optional[Path] = None,
                traces: bool = False, progress=None):
    """Run the full (variant x SNR x lambda x replicate) campaign.

    Returns (records, runtimes): records is a deterministically ordered list
    of RunRecord; runtimes maps (snr, replicate) to wall seconds and is the
    only non-reproducible output. Individual run failures are recorded in
    the run status and do not stop the campaign.
    """
    calibrations = {}
    for snr_db in config.snr_list:
        reference = config.collection_reference(0)
        cal_seed = derive_seed(config.base_seed, 0, f"calibrate:{snr_db}")
        plant_k, sigma_e = attach_noise_model(config.plant, config.controller, reference,
                                              snr_db, cal_seed, config.qw_scale)
        calibrations[snr_db] = (plant_k, sigma_e)
    jobs_list = [(snr_db, rep) for snr_db in config.snr_list
                 for rep in range(config.replicates)]
    results = {}
    runtimes = {}
    if jobs > 1:
        payloads = [(config.raw, snr_db, rep, jsonio.model_to_json(calibrations[snr_db][0]),
                     calibrations[snr_db][1]) for snr_db, rep in jobs_list]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for snr_db, rep, records, wall in pool.map(_worker, payloads):
                results[(snr_db, rep)] = records
                runtimes[(snr_db, rep)] = wall
                if progress:
                    progress(snr_db, rep)
    else:
        for snr_db, rep in jobs_list:
            plant_k, sigma_e = calibrations[snr_db]
            t0 = time.perf_counter()
            results[(snr_db, rep)] = _replicate_runs(config, snr_db, rep, plant_k, sigma_e)
            runtimes[(snr_db, rep)] = time.perf_counter() - t0
            if progress:
                progress(snr_db, rep)
    records = []
    for key in jobs_list:
        records.extend(results[key])
    if out_dir is not None:
        write_campaign(records, runtimes, Path(out_dir), traces=traces)
    return records, runtimes


def record_row(record: RunRecord) -> dict:
    return {
        "fingerprint": record.fingerprint,
        "variant": record.variant,
        "snr_db": "" if record.snr_db is None else repr(float(record.snr_db)),
        "lam": "" if record.lam is None else repr(float(record.lam)),
        "replicate": "" if record.replicate is None else record.replicate,
        "seed": "" if record.seed is None else record.seed,
        "J": repr(float(record.J)),
        "status": record.status,
        "solver_iterations": int(np.sum(record.plan_iterations)),
    }


def write_campaign(records, runtimes, out_dir: Path, traces: bool = False) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "records.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RECORD_COLUMNS)
        writer.writeheader()
        for record in records:
            writer.writerow(record_row(record))
    with open(out_dir / "runtimes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["snr_db", "replicate", "wall_seconds"])
        for (snr_db, rep), wall in sorted(runtimes.items()):
            writer.writerow([snr_db, rep, f"{wall:.6f}"])
    if traces:
        for i, record in enumerate(records):
            label = record.variant.replace("(", "_").replace(")", "").replace("=", "")
            record.to_csv(out_dir / f"trace_{record.fingerprint[:12]}_{label}_"
                                    f"{record.snr_db}_{record.replicate}_{i}.csv")


def summarize(records, group_by=("variant", "snr_db", "lam")):
    """Group records and emit per-group J statistics.

    Returns a list of dict rows: group keys, count, failures, then the
    median, lower/upper quartiles, and mean of J over successful runs.
    """
    if not records:
        raise ValueError("no records to summarize")
    rows = {}
    for record in records:
        key = tuple(getattr(record, k) for k in group_by)
        rows.setdefault(key, []).append(record)
    out = []
    for key in sorted(rows, key=lambda k: tuple(str(x) for x in k)):
        group = rows[key]
        good = [r.J for r in group if r.status == "ok"]
        row = {k: ("" if v is None else v) for k, v in zip(group_by, key)}
        row["count"] = len(group)
        row["failures"] = len(group) - len(good)
        if good:
            arr = np.asarray(good)
            row.update(median_J=float(np.median(arr)),
                       q1_J=float(np.percentile(arr, 25)),
                       q3_J=float(np.percentile(arr, 75)),
                       mean_J=float(np.mean(arr)))
        else:
            row.update(median_J="", q1_J="", q3_J="", mean_J="")
        out.append(row)
    return out


def write_summary(summary_rows, path) -> None:
    fieldnames = list(summary_rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in summary_rows:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Command-line interface
# ---------------------------------------------------------------------------

def _error_report(out_dir: Optional[str], kind: str, details) -> None:
    report = {"error": kind, "details": details}
    print(json.dumps(report), file=sys.stderr)
    if out_dir:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            with open(Path(out_dir) / "error.json", "w") as fh:
                json.dump(report, fh, indent=2)
        except OSError:
            pass


def _add_common(sub):
    sub.add_argument("--config", required=True, help="path to the experiment config JSON")
    sub.add_argument("--out-dir", default="out", help="output directory (default: out)")
    sub.add_argument("--seed", type=int, default=None, help="override the config base seed")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ivddpc",
        description="Closed-loop data-driven predictive control benchmarks")
    subs = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("collect", "simulate and cache one offline dataset"),
                           ("run", "run a single control experiment"),
                           ("bench", "run the Monte Carlo campaign"),
                           ("diag", "instrument decorrelation diagnostics"),
                           ("summarize", "aggregate a records.csv")):
        sub = subs.add_parser(name, help=helptext)
        if name != "summarize":
            _add_common(sub)
        if name == "run":
            sub.add_argument("--variant", required=True)
            sub.add_argument("--lam", type=float, default=None)
            sub.add_argument("--snr", type=float, default=None)
            sub.add_argument("--replicate", type=int, default=0)
        if name == "bench":
            sub.add_argument("--jobs", type=int, default=1, help="worker process count")
            sub.add_argument("--traces", action="store_true",
                             help="also write per-step trace CSVs")
        if name == "summarize":
            sub.add_argument("--records", required=True, help="records.csv to aggregate")
            sub.add_argument("--group-by", default="variant,snr_db,lam")
            sub.add_argument("--out", default=None, help="summary CSV path (default stdout)")
    args = parser.parse_args(argv)

    if args.command == "summarize":
        return _cli_summarize(args)
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        _error_report(args.out_dir, "config", exc.problems)
        return 2
    if args.seed is not None:
        doc = dict(config.raw)
        doc["base_seed"] = args.seed
        config = parse_config(doc)
    out_dir = Path(args.out_dir)
    try:
        if args.command == "collect":
            return _cli_collect(config, out_dir)
        if args.command == "run":
            return _cli_run(config, args, out_dir)
        if args.command == "bench":
            return _cli_bench(config, args, out_dir)
        if args.command == "diag":
            return _cli_diag(config, out_dir)
    except ConfigError as exc:
        _error_report(args.out_dir, "config", exc.problems)
        return 2
    except Exception as exc:  # partial results stay on disk
        _error_report(args.out_dir, "runtime", [str(exc)])
        return 3
    return 0


def _cli_collect(config: ExperimentConfig, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    traj, bundle, meta = collect(config, out_dir=out_dir)
    print(json.dumps({"n_samples": traj.length, "n_cols": bundle.n_cols,
                      "sigma_e": meta["sigma_e"], "fingerprint": meta["fingerprint"],
                      "cache_hit": meta["cache_hit"]}))
    return 0


def _cli_run(config: ExperimentConfig, args, out_dir: Path) -> int:
    try:
        tag = VariantTag(args.variant)
    except ValueError:
        raise ConfigError([f"--variant: unknown variant {args.variant!r}"])
    snr_db = args.snr if args.snr is not None else config.snr_list[0]
    lam = args.lam
    if tag is VariantTag.RDDPC_IV and lam is None:
        lam = config.lambdas[0] if config.lambdas else 100.0
    doc = dict(config.raw)
    doc["variants"] = [tag.value]
    if tag is VariantTag.RDDPC_IV:
        doc["lambdas"] = [lam]
    doc["snr_db"] = [snr_db]
    single = parse_config(doc)
    reference = single.collection_reference(args.replicate)
    cal_seed = derive_seed(single.base_seed, 0, f"calibrate:{snr_db}")
    plant_k, sigma_e = attach_noise_model(single.plant, single.controller, reference,
                                          snr_db, cal_seed, single.qw_scale)
    records = _replicate_runs(single, snr_db, args.replicate, plant_k, sigma_e)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = records[0]
    trace = out_dir / f"trace_{record.fingerprint[:12]}_{tag.value}_{args.replicate}.csv"
    record.to_csv(trace)
    with open(out_dir / f"run_{record.fingerprint[:12]}_{tag.value}_{args.replicate}.json",
              "w") as fh:
        json.dump(record.sidecar(), fh, indent=2, sort_keys=True)
    print(json.dumps({"variant": record.variant, "J": record.J, "status": record.status,
                      "trace": str(trace)}))
    return 0 if record.status == "ok" else 3


def _cli_bench(config: ExperimentConfig, args, out_dir: Path) -> int:
    records, _ = monte_carlo(config, jobs=args.jobs, out_dir=out_dir, traces=args.traces)
    summary = summarize(records)
    write_summary(summary, out_dir / "summary.csv")
    failures = sum(1 for r in records if r.status != "ok")
    print(json.dumps({"records": len(records), "failures": failures,
                      "out_dir": str(out_dir)}))
    return 0


def _cli_diag(config: ExperimentConfig, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    traj, bundle, meta = collect(config, out_dir=out_dir)
    factors = lcf(config.controller)
    rows = []
    for variant in (IvVariant.OPEN_LOOP, IvVariant.REF_ONLY, IvVariant.LCF_ONLY,
                    IvVariant.COMBINED):
        ivset = build_iv(bundle, variant, factors)
        corr = iv_noise_correlation(bundle.E_f, ivset.phi)
        rows.append({"variant": variant.value, "noise_correlation": repr(corr),
                     "n_cols": bundle.n_cols})
        print(f"{variant.value}: ||E_f Phi'||_F = {corr:.6e}")
    with open(out_dir / "diag.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant", "noise_correlation", "n_cols"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return 0


if __name__ == "__main__":
    sys.exit(main())
