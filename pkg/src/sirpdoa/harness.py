"""Monte Carlo experiment runner: seeded trials, permutation-matched angle
errors, MSE aggregation, SCR and pulse-count sweeps with bound overlays.

Reproducibility contract: every trial derives its generator from
(base_seed, sweep index, trial index) through numpy's SeedSequence, so
trials are independent, order-insensitive, and identical across runs and
worker counts.

The dB convention for aggregated errors matches the bound aggregation in
:mod:`sirpdoa.crb`: squared angle errors in degrees squared are summed
over all 2K angles, averaged over trials, and reported as 10*log10.
"""

from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import crb as _crb
from . import estimators as _est
from . import model as _mod
from .clutter import (
    ClutterModel,
    TextureFamily,
    TextureKind,
    sample_clutter,
    speckle_template,
)
from .estimators import EstimatorConfig, EstimatorError
from .model import ArrayGeometry, Scene

SWEEP_AXES = ("scr", "pulses")

ESTIMATOR_NAMES = (
    "marginal",        # texture integrated out (iterative)
    "conditional",     # per-pulse texture as nuisance realizations (iterative)
    "joint",           # texture jointly estimated with its prior (iterative)
    "gaussian_iter",   # Gaussian ML with estimated covariance (iterative)
    "gaussian_white",  # Gaussian ML, white covariance, single shot
    "music",           # subspace scan on the sample covariance, single shot
)

_ITERATIVE = {"marginal", "conditional", "joint", "gaussian_iter"}

CSV_HEADER = "sweep_axis,sweep_value,estimator,iterations,mse_db,crb_db,trials_used,failures"


class ConfigError(ValueError):
    """Malformed experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    geometry: ArrayGeometry
    scene: Scene
    texture: TextureFamily
    corr_base: float = 0.9
    phase_step: float = math.pi / 2.0
    sweep_axis: str = "scr"
    sweep_values: tuple = (-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
    fixed_scr_db: float = 15.0
    trials: int = 500
    base_seed: int = 20230617
    estimators: tuple = ESTIMATOR_NAMES
    iterations: tuple = (1, 2)
    estimator_config: EstimatorConfig = field(default_factory=EstimatorConfig)

    def __post_init__(self):
        if self.sweep_axis not in SWEEP_AXES:
            raise ConfigError(f"sweep_axis must be one of {SWEEP_AXES}, "
                              f"got {self.sweep_axis!r}")
        if len(self.sweep_values) < 1:
            raise ConfigError("sweep_values must be non-empty")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if len(self.estimators) < 1:
            raise ConfigError("estimator list must be non-empty")
        for name in self.estimators:
            if name not in ESTIMATOR_NAMES:
                raise ConfigError(f"unknown estimator {name!r}; "
                                  f"known: {ESTIMATOR_NAMES}")
        if not all(int(i) >= 1 for i in self.iterations):
            raise ConfigError("iteration counts must be >= 1")
        if self.sweep_axis == "pulses" and not all(
                int(v) >= 1 for v in self.sweep_values):
            raise ConfigError("pulse-count sweep values must be >= 1")


@dataclass(frozen=True)
class SweepRow:
    sweep_axis: str
    sweep_value: float
    estimator: str
    iterations: int
    mse_db: float
    crb_db: float
    trials_used: int
    failures: int


@dataclass(frozen=True)
class SweepResult:
    rows: tuple

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.sweep_axis},{r.sweep_value:.10g},{r.estimator},"
                f"{r.iterations},{r.mse_db:.10g},{r.crb_db:.10g},"
                f"{r.trials_used},{r.failures}")
        return "\n".join(lines) + "\n"


def paper_experiment(family: str = "k", **overrides) -> ExperimentConfig:
    """The reference simulation setup: 3x4 half-wavelength arrays, two
    targets at (18, 20) and (45, 40) degrees, 15 pulses of 5 snapshots."""
    texture = (TextureFamily(TextureKind.K_DISTRIBUTED, 2.0, 10.0)
               if family == "k"
               else TextureFamily(TextureKind.T_DISTRIBUTED, 1.1, 2.0))
    base = ExperimentConfig(
        geometry=_mod.half_wavelength_ula(3, 4),
        scene=Scene(dod=np.deg2rad([18.0, 45.0]), doa=np.deg2rad([20.0, 40.0]),
                    rcs=(2 + 3j, 1 - 0.5j), doppler=(0.3, 0.8),
                    pulses=15, snapshots_per_pulse=5),
        texture=texture,
    )
    return replace(base, **overrides) if overrides else base


# --------------------------------------------------------------------------
# Scoring
# --------------------------------------------------------------------------


def match_permutation(theta_hat, theta_true) -> np.ndarray:
    """Squared per-angle errors under the best assignment of estimated
    (dod, doa) pairs to true pairs.  Exhaustive over K! assignments;
    returns 2K errors ordered as the true targets (dod, doa interleaved).
    Unit-agnostic: errors come out in the square of the input unit."""
    est_pairs = _est._as_pairs(theta_hat)
    true_pairs = _est._as_pairs(theta_true)
    k = true_pairs.shape[0]
    if est_pairs.shape[0] != k:
        raise ValueError("estimate and truth must have the same target count")
    best = None
    best_total = math.inf
    for perm in itertools.permutations(range(k)):
        err = (est_pairs[list(perm)] - true_pairs) ** 2
        total = float(err.sum())
        if total < best_total:
            best_total = total
            best = err
    return best.reshape(-1)


def aggregate(trial_errors) -> tuple:
    """(mse_db, trials_used, failures) from per-trial squared errors.

    Each successful trial contributes its per-angle squared errors
    (degrees squared); failures are entries of None.  The MSE is the
    per-trial sum over all 2K angles averaged over trials — the same
    total-error convention as the bound aggregation — in dB.
    """
    used = [np.asarray(e, dtype=float) for e in trial_errors if e is not None]
    failures = sum(1 for e in trial_errors if e is None)
    if not used:
        raise EstimatorError("all trials failed; nothing to aggregate")
    totals = np.array([float(e.sum()) for e in used])
    mse = float(np.mean(totals))
    return 10.0 * math.log10(mse), len(used), failures


# --------------------------------------------------------------------------
# Trials
# --------------------------------------------------------------------------


def _scene_for(config: ExperimentConfig, sweep_value) -> Scene:
    if config.sweep_axis == "pulses":
        return replace(config.scene, pulses=int(sweep_value))
    return config.scene


def _clutter_for(config: ExperimentConfig, sweep_value) -> ClutterModel:
    scene = _scene_for(config, sweep_value)
    mn = config.geometry.virtual_size
    unit = speckle_template(mn, config.corr_base, config.phase_step)
    template = ClutterModel(config.texture, unit)
    target_scr = (float(sweep_value) if config.sweep_axis == "scr"
                  else config.fixed_scr_db)
    power = _mod.speckle_power_for_scr(config.geometry, scene, template,
                                       target_scr)
    return ClutterModel(config.texture, power * unit)


def trial_rng(base_seed: int, sweep_index: int, trial_index: int):
    """Independent, reproducible generator for one trial."""
    seq = np.random.SeedSequence(base_seed,
                                 spawn_key=(sweep_index, trial_index))
    return np.random.default_rng(seq)


def _run_selected(obs, config: ExperimentConfig, scene: Scene):
    """Run every selected estimator once; return {name: {iters: errors}}."""
    geom = config.geometry
    est_cfg = config.estimator_config
    kind = config.texture.family
    k = scene.num_targets
    truth_deg = np.rad2deg(scene.angle_pairs)
    max_iters = max(int(i) for i in config.iterations)
    run_cfg = (est_cfg if est_cfg.max_outer_iters == max_iters
               else replace(est_cfg, max_outer_iters=max_iters))
    out = {}
    for name in config.estimators:
        cells = {}
        try:
            if name == "music":
                pairs, _ = _est.music_scm(obs, geom, k,
                                          est_cfg.coarse_grid_step)
                errs = match_permutation(np.rad2deg(pairs), truth_deg)
                cells[1] = errs
            elif name == "gaussian_white":
                res = _est.estimate_gaussian_ml(obs, geom, k, est_cfg,
                                                iterative=False)
                errs = match_permutation(np.rad2deg(res.theta_at(1)),
                                         truth_deg)
                cells[1] = errs
            else:
                if name == "marginal":
                    res = _est.estimate_marginal_ml(obs, geom, kind, k,
                                                    run_cfg)
                elif name == "conditional":
                    res = _est.estimate_texture_weighted(
                        obs, geom, kind, k, run_cfg, mode="conditional")
                elif name == "joint":
                    res = _est.estimate_texture_weighted(
                        obs, geom, kind, k, run_cfg, mode="joint")
                else:
                    res = _est.estimate_gaussian_ml(obs, geom, k, run_cfg,
                                                    iterative=True)
                for it in config.iterations:
                    errs = match_permutation(
                        np.rad2deg(res.theta_at(int(it))), truth_deg)
                    cells[int(it)] = errs
        except (EstimatorError, np.linalg.LinAlgError):
            for it in (config.iterations if name in _ITERATIVE else (1,)):
                cells[int(it)] = None
        out[name] = cells
    return out


def run_trial(config: ExperimentConfig, sweep_value, trial_index: int):
    """Synthesize one observation block and score every estimator on it.

    The generator stream is derived from (base_seed, index of the sweep
    value, trial index), so any trial can be reproduced in isolation.
    """
    sweep_index = list(config.sweep_values).index(sweep_value)
    scene = _scene_for(config, sweep_value)
    clutter = _clutter_for(config, sweep_value)
    rng = trial_rng(config.base_seed, sweep_index, trial_index)
    draws = sample_clutter(clutter, scene.pulses, rng)
    obs = _mod.synthesize(config.geometry, scene, draws)
    return _run_selected(obs, config, scene)


def _limit_worker_threads():
    # Trials are process-parallel; nested BLAS threading only causes
    # oversubscription.
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(1)
    except ImportError:
        pass


def _trial_task(args):
    config, sweep_value, trial_index = args
    return (sweep_value, trial_index, run_trial(config, sweep_value,
                                                trial_index))


def sweep(config: ExperimentConfig, jobs: int = 1) -> SweepResult:
    """Full Monte Carlo sweep: for every sweep value run all trials, then
    aggregate per estimator and iteration count, with the bound attached
    to every row.  ``jobs`` > 1 distributes trials over processes; results
    are identical regardless of worker count."""
    tasks = [(config, sv, t)
             for sv in config.sweep_values for t in range(config.trials)]
    results = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs,
                                 initializer=_limit_worker_threads) as pool:
            for sv, t, res in pool.map(_trial_task, tasks, chunksize=4):
                results[(sv, t)] = res
    else:
        for task in tasks:
            sv, t, res = _trial_task(task)
            results[(sv, t)] = res

    rows = []
    for sv in config.sweep_values:
        scene = _scene_for(config, sv)
        clutter = _clutter_for(config, sv)
        crb_res = _crb.angle_crb(config.geometry, scene, clutter)
        crb_db = _crb.aggregate_db(crb_res)
        for name in config.estimators:
            iter_list = (sorted({int(i) for i in config.iterations})
                         if name in _ITERATIVE else [1])
            for it in iter_list:
                errs = [results[(sv, t)][name].get(it)
                        for t in range(config.trials)]
                mse_db, used, failed = aggregate(errs)
                rows.append(SweepRow(
                    sweep_axis=config.sweep_axis, sweep_value=float(sv),
                    estimator=name, iterations=it, mse_db=mse_db,
                    crb_db=crb_db, trials_used=used, failures=failed))
    rows.sort(key=lambda r: (r.sweep_value, r.estimator, r.iterations))
    return SweepResult(rows=tuple(rows))


def crb_curve(config: ExperimentConfig):
    """(sweep_value, crb_db) pairs for the configured sweep."""
    out = []
    for sv in config.sweep_values:
        scene = _scene_for(config, sv)
        clutter = _clutter_for(config, sv)
        res = _crb.angle_crb(config.geometry, scene, clutter)
        out.append((float(sv), _crb.aggregate_db(res)))
    return out


# --------------------------------------------------------------------------
# Config file I/O (degrees at this boundary)
# --------------------------------------------------------------------------


def _require(mapping, key, where):
    if key not in mapping:
        raise ConfigError(f"missing field {key!r} in {where}")
    return mapping[key]


def _complex_list(values, where):
    out = []
    for i, v in enumerate(values):
        if isinstance(v, (list, tuple)) and len(v) == 2:
            out.append(complex(float(v[0]), float(v[1])))
        elif isinstance(v, (int, float)):
            out.append(complex(v))
        else:
            raise ConfigError(
                f"{where}[{i}] must be a number or [re, im] pair, got {v!r}")
    return tuple(out)


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from a parsed JSON document.

    Angles appear in degrees here and are converted to radians; complex
    amplitudes are written as [re, im] pairs.  Raises ConfigError naming
    the offending field on any malformed input.
    """
    if not isinstance(doc, dict):
        raise ConfigError("top-level config must be a JSON object")
    try:
        g = _require(doc, "geometry", "config")
        geometry = ArrayGeometry(
            tx_positions=_require(g, "tx_positions", "geometry"),
            rx_positions=_require(g, "rx_positions", "geometry"),
            wavelength=_require(g, "wavelength", "geometry"),
        )
        s = _require(doc, "scene", "config")
        scene = Scene(
            dod=np.deg2rad(_require(s, "dod_deg", "scene")),
            doa=np.deg2rad(_require(s, "doa_deg", "scene")),
            rcs=_complex_list(_require(s, "rcs", "scene"), "scene.rcs"),
            doppler=_require(s, "doppler", "scene"),
            pulses=int(_require(s, "pulses", "scene")),
            snapshots_per_pulse=int(_require(s, "snapshots_per_pulse",
                                             "scene")),
        )
        c = _require(doc, "clutter", "config")
        family = _require(c, "family", "clutter")
        if family not in ("k", "t"):
            raise ConfigError(f"clutter.family must be 'k' or 't', got {family!r}")
        texture = TextureFamily(
            TextureKind.K_DISTRIBUTED if family == "k"
            else TextureKind.T_DISTRIBUTED,
            float(_require(c, "shape", "clutter")),
            float(_require(c, "scale", "clutter")),
        )
        sw = _require(doc, "sweep", "config")
        kwargs = dict(
            geometry=geometry, scene=scene, texture=texture,
            corr_base=float(c.get("correlation_base", 0.9)),
            phase_step=math.radians(float(c.get("phase_step_deg", 90.0))),
            sweep_axis=_require(sw, "axis", "sweep"),
            sweep_values=tuple(float(v) for v in
                               _require(sw, "values", "sweep")),
            fixed_scr_db=float(sw.get("fixed_scr_db", 15.0)),
            trials=int(doc.get("trials", 500)),
            base_seed=int(doc.get("base_seed", 20230617)),
        )
        if "estimators" in doc:
            kwargs["estimators"] = tuple(doc["estimators"])
        if "iterations" in doc:
            kwargs["iterations"] = tuple(int(i) for i in doc["iterations"])
        if "estimator_config" in doc:
            ec = doc["estimator_config"]
            if not isinstance(ec, dict):
                raise ConfigError("estimator_config must be an object")
            known = {f for f in EstimatorConfig.__dataclass_fields__}
            bad = set(ec) - known
            if bad:
                raise ConfigError(f"unknown estimator_config fields: {sorted(bad)}")
            if "ab_bounds" in ec:
                ec = dict(ec)
                ec["ab_bounds"] = tuple(tuple(float(x) for x in pair)
                                        for pair in ec["ab_bounds"])
            kwargs["estimator_config"] = EstimatorConfig(**ec)
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid configuration value: {exc}") from exc


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON "
                          f"(line {exc.lineno}, column {exc.colno}): {exc.msg}")
    return config_from_dict(doc)
