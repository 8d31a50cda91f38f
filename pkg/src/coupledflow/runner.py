"""Experiment orchestration: train, restore, diagnose and write artifacts.

Every artifact lands in one output directory::

    config.ini        resolved configuration
    train_log.csv     one row per training iteration
    checkpoint.scfl   final (or last good) training state
    endpoints.csv     restoration quality per step count and step-size mode
    trajectories.csv  a few integration paths for plotting
    diagnostics.csv   conditional variance, transport cost and kinetic energy
    report.txt        plain-text summary with property checks
    MANIFEST          sha256 per artifact plus run status

Randomness is drawn from PCG64 substreams keyed on the experiment seed, so
two runs of the same config write byte-identical CSVs apart from the
``wall_ms`` column.
"""

import hashlib
import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import load_config, serialize_config
from .coupling import CouplingSampler, degrade, fit_conditional_mean
from .diagnostics import (
    GaussianFlowSpec,
    conditional_velocity_variance,
    crossing_ratio,
    expected_displacement,
    jensen_gap,
    sliced_w2_error,
)
from .exceptions import CoupledFlowError, TrainingError
from .inference import NetField, integrate
from .training import LOG_COLUMNS, _substream, init_state, train

RNG_NAME = "PCG64"
CHECKPOINT_EVERY = 1000
LAMBDA_TIMES = (0.25, 0.5, 0.75)
LAMBDA_RATIO_LIMIT = 0.1
CROSSING_PAIRS = 1000

CONFIG_FILE = "config.ini"
LOG_FILE = "train_log.csv"
CHECKPOINT_FILE = "checkpoint.scfl"
ENDPOINTS_FILE = "endpoints.csv"
TRAJECTORIES_FILE = "trajectories.csv"
DIAGNOSTICS_FILE = "diagnostics.csv"
REPORT_FILE = "report.txt"
MANIFEST_FILE = "MANIFEST"

# substream keys; training owns (0,) and (1, it)
_KEY_ESTIMATOR = 2
_KEY_EVAL = 3
_KEY_DIAG = 4


@dataclass
class RunResult:
    out_dir: str
    status: int = 0
    failed_stage: str = ""
    error: str = ""
    summary: dict = field(default_factory=dict)

    @property
    def ok(self):
        return self.status == 0


# -- CSV helpers -------------------------------------------------------------


def fmt(x):
    """Lossless text form of a CSV cell (17 significant digits for reals)."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % x
    return str(x)


def csv_preamble(quantity, seed, config_hash):
    return f"# quantity={quantity} seed={seed} config_hash={config_hash} rng={RNG_NAME}\n"


def write_csv(path, quantity, seed, config_hash, columns, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(csv_preamble(quantity, seed, config_hash))
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def read_csv(path):
    """Return ``(preamble, columns, rows)`` with cells as strings."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    preamble = lines[0] if lines and lines[0].startswith("#") else ""
    body = lines[1:] if preamble else lines
    columns = body[0].split(",") if body else []
    return preamble, columns, [ln.split(",") for ln in body[1:] if ln]


def log_columns(shortcut):
    return tuple(c for c in LOG_COLUMNS if shortcut or c != "sc_loss")


# -- building blocks ---------------------------------------------------------


def build_sampler(config):
    """Coupling sampler for ``config``; learned mode fits its estimator first."""
    c = config.coupling
    estimator = None
    if c.mode == "learned-anchored":
        rng = _substream(config.seed, _KEY_ESTIMATOR)
        z1 = config.prior.sample(config.estimator.n_train, rng)
        lq = degrade(z1, config.degradation, rng)
        e = config.estimator
        estimator = fit_conditional_mean(
            lq, z1, hidden=e.hidden, max_iter=e.iterations, batch_size=e.batch_size,
            learning_rate=e.learning_rate, random_state=config.seed,
        )
    return CouplingSampler(c.mode, config.prior, config.degradation, c.sigma, source=config.source,
                           estimator=estimator)


def analytic_spec(config, sampler, rng):
    if config.coupling.mode == "learned-anchored":
        pair = sampler(config.diagnostics.n_samples, rng)
        return GaussianFlowSpec.from_samples(pair.z0, pair.z1)
    c = config.coupling
    return GaussianFlowSpec.from_coupling(c.mode, config.prior, config.degradation, c.sigma, config.source)


def _trim_log(path, iteration):
    """Drop log rows at or beyond ``iteration`` so a resumed run appends cleanly."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines(keepends=True)
    head, body = lines[:2], lines[2:]
    keep = head + [ln for ln in body if int(ln.split(",", 1)[0]) < iteration]
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(keep)


def run_training(config, sampler, out_dir, state=None):
    """Train with an append-only log and periodic checkpoints."""
    tc = config.train_config()
    digest = config.config_hash()
    log_path = os.path.join(out_dir, LOG_FILE)
    ckpt_path = os.path.join(out_dir, CHECKPOINT_FILE)
    cols = log_columns(tc.shortcut)
    if state is None:
        write_csv(log_path, "train_log", config.seed, digest, cols, [])
    else:
        _trim_log(log_path, state.iteration)
    net, fresh = init_state(tc, sampler.dim)
    current = state or fresh

    def save(train_state):
        save_checkpoint(ckpt_path, Checkpoint(net.widths, train_state, digest, config.seed))

    with open(log_path, "a", encoding="utf-8") as fh:

        def on_step(row):
            it, fm_loss, sc_loss, gnorm, wall = row
            cells = (it, fm_loss, sc_loss, gnorm, wall) if tc.shortcut else (it, fm_loss, gnorm, wall)
            fh.write(",".join(fmt(v) for v in cells) + "\n")

        stop = current.iteration
        saved = False
        try:
            while stop < tc.iterations:
                stop = min(tc.iterations, (stop // CHECKPOINT_EVERY + 1) * CHECKPOINT_EVERY)
                result = train(tc, sampler, state=current, iterations=stop, on_step=on_step)
                current = result.state
                fh.flush()
                save(current)
                saved = True
        except TrainingError as exc:
            fh.flush()
            save(exc.last_good)
            raise
    if not saved:
        save(current)
    net.params = current.params
    return net, current


def evaluate_endpoints(config, net, params, steps, sampler=None):
    """Sliced-W2 and MSE of restorations against the paired clean targets."""
    inf = config.inference
    field_ = NetField(net, params, conditioning=config.training.conditioning)
    sampler = sampler or build_sampler(config)
    pairs = sampler(inf.n_restorations, _substream(config.seed, _KEY_EVAL))
    rows, trajectory = [], None
    for n in steps:
        for mode in ("shortcut", "instantaneous"):
            traj = integrate(field_, pairs.z0, pairs.c, n, mode)
            out = traj.endpoint
            w2, se = sliced_w2_error(out, pairs.z1, config.diagnostics.n_projections,
                                     rng=_substream(config.seed, _KEY_EVAL, 1))
            sq = np.sum((out - pairs.z1) ** 2, axis=1)
            rows.append(("sliced_w2", n, mode, w2, se, len(out), config.seed))
            rows.append(("mse", n, mode, float(sq.mean()), float(sq.std(ddof=1) / np.sqrt(len(sq))), len(out),
                         config.seed))
            if mode == "instantaneous" and n == max(steps):
                trajectory = traj
    return rows, trajectory


def trajectory_rows(traj, n_dump):
    rows = []
    for i in range(min(n_dump, traj.states.shape[1])):
        for k, t in enumerate(traj.times):
            rows.append((i, k, t, *traj.states[k, i]))
    return rows


def run_diagnostics(config, net, params, sampler=None):
    """Property checks on analytic and (when trained) learned fields.

    Returns ``(rows, checks)``: CSV rows and a dict of named pass/fail flags.
    """
    d = config.diagnostics
    seed = config.seed
    mode = config.coupling.mode
    rows, checks = [], {}

    def rng(*key):
        return _substream(seed, _KEY_DIAG, *key)

    def add(quantity, estimate, se, n):
        rows.append((quantity, estimate, se, n, seed))

    sampler = sampler or build_sampler(config)
    independent = CouplingSampler("independent", config.prior, config.degradation, config.coupling.sigma,
                                  source=config.source)
    spec = analytic_spec(config, sampler, rng(0))
    ind_spec = GaussianFlowSpec.from_coupling("independent", config.prior, config.degradation,
                                              config.coupling.sigma, config.source)

    # conditional velocity variance
    if mode != "independent":
        ratios = []
        for j, t in enumerate(LAMBDA_TIMES):
            lam = {}
            for arm, s in (("coupled", sampler), ("independent", independent)):
                prof = conditional_velocity_variance(s, t, n_samples=d.n_samples, rng=rng(1, j),
                                                     bandwidth_scale=d.bandwidth_scale)
                lam[arm] = prof.bin_average()
                add(f"lambda_{arm}_t{t}", *lam[arm], d.n_samples)
            add(f"lambda_coupled_analytic_t{t}", spec.conditional_variance(t), 0.0, 0)
            add(f"lambda_independent_analytic_t{t}", ind_spec.conditional_variance(t), 0.0, 0)
            ratio = lam["coupled"][0] / lam["independent"][0]
            rel = np.hypot(lam["coupled"][1] / lam["coupled"][0], lam["independent"][1] / lam["independent"][0])
            add(f"lambda_ratio_t{t}", ratio, ratio * rel, d.n_samples)
            ratios.append(ratio)
        checks["property1"] = all(r <= LAMBDA_RATIO_LIMIT for r in ratios)

    # transport cost per constructible coupling
    modes = ["independent", "lq-anchored", "oracle-anchored"]
    if mode == "learned-anchored":
        modes.append(mode)
    for j, m in enumerate(modes):
        s = sampler if m == mode else CouplingSampler(m, config.prior, config.degradation, config.coupling.sigma,
                                                      source=config.source)
        est, se = expected_displacement(s, d.n_samples, rng(2, j))
        add(f"transport_cost_{m}", est, se, d.n_samples)

    # kinetic energy against displacement
    jensen = {"analytic": jensen_gap(spec.field, sampler, d.kinetic_samples, d.kinetic_steps, rng(3), "rk4")}
    if net is not None:
        field_ = NetField(net, params, conditioning=config.training.conditioning)
        jensen["trained"] = jensen_gap(field_, sampler, d.kinetic_samples, d.kinetic_steps, rng(3))
    for name, res in jensen.items():
        add(f"kinetic_energy_{name}", res.lhs, res.lhs_se, d.kinetic_samples)
        add(f"displacement_{name}", res.rhs, res.rhs_se, d.kinetic_samples)
    checks["property2"] = all(res.holds() for res in jensen.values())

    if config.coupling.dim == 1:
        pair = sampler(CROSSING_PAIRS, rng(4))
        add("crossing_ratio", crossing_ratio(pair.z0[:, 0], pair.z1[:, 0]), 0.0, CROSSING_PAIRS)
    return rows, checks


# -- report and manifest -----------------------------------------------------


def render_report(config, log_tail, endpoint_rows, diag_rows, checks):
    lines = [
        f"experiment: {config.name}",
        f"config_hash: {config.config_hash()}",
        f"seed: {config.seed} ({RNG_NAME})",
        f"coupling: {config.coupling.mode}, sigma={config.coupling.sigma:g}",
        "",
        "training",
    ]
    if log_tail:
        lines.extend(f"  {k}: {v}" for k, v in log_tail.items())
    else:
        lines.append("  no iterations run")
    lines += ["", "restoration (sliced_w2 against clean targets)"]
    for q, n, mode, est, se, _, _ in endpoint_rows:
        if q == "sliced_w2":
            lines.append(f"  steps={n:<4d} {mode:<13s} {est:.6f} +- {se:.6f}")
    lines += ["", "diagnostics"]
    if diag_rows is None:
        lines.append("  disabled")
    else:
        for q, est, se, n, _ in diag_rows:
            lines.append(f"  {q}: {est:.6g} (se {se:.3g}, n={n})")
        lines.append("")
        p1 = checks.get("property1")
        lines.append(
            "Property 1 (reduced conditional velocity variance, ratio <= 0.1): "
            + ("n/a for independent coupling" if p1 is None else ("PASS" if p1 else "FAIL"))
        )
        lines.append(
            "Property 2 (kinetic energy <= expected squared displacement): "
            + ("PASS" if checks.get("property2") else "FAIL")
        )
    return "\n".join(lines) + "\n"


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


ARTIFACTS = (CONFIG_FILE, LOG_FILE, CHECKPOINT_FILE, ENDPOINTS_FILE, TRAJECTORIES_FILE, DIAGNOSTICS_FILE,
             REPORT_FILE)


def write_manifest(out_dir, status, stage="", error=""):
    lines = [f"status {'ok' if status == 0 else 'failed'}"]
    if stage:
        lines.append(f"failed_stage {stage}")
    if error:
        lines.append("error " + " ".join(error.split()))
    for name in ARTIFACTS:
        path = os.path.join(out_dir, name)
        if os.path.isfile(path):
            lines.append(f"sha256 {_sha256(path)} {name}")
    with open(os.path.join(out_dir, MANIFEST_FILE), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def verify(out_dir):
    """Recompute artifact checksums; return a list of problems (empty when intact)."""
    path = os.path.join(out_dir, MANIFEST_FILE)
    if not os.path.exists(path):
        return [f"missing {MANIFEST_FILE}"]
    problems = []
    with open(path, encoding="utf-8") as fh:
        for line in fh.read().splitlines():
            if not line.startswith("sha256 "):
                continue
            _, digest, name = line.split(" ", 2)
            target = os.path.join(out_dir, name)
            if not os.path.exists(target):
                problems.append(f"{name}: missing")
            elif _sha256(target) != digest:
                problems.append(f"{name}: checksum mismatch")
    return problems


# -- entry points --------------------------------------------------------------


def _resolve(config, out_dir, seed, steps):
    updates = {}
    if seed is not None:
        updates["seed"] = int(seed)
    if out_dir is not None:
        updates["output_dir"] = str(out_dir)
    config = config.with_updates(experiment=updates) if updates else config
    if steps is not None:
        config = config.with_updates(inference={"steps": tuple(int(s) for s in steps)})
    out = config.experiment.output_dir or os.path.join("runs", config.name or "experiment")
    os.makedirs(out, exist_ok=True)
    return config, out


def _pipeline(config, out, result, state=None, checkpoint=None, ema=False):
    stage = "config"
    try:
        with open(os.path.join(out, CONFIG_FILE), "w", encoding="utf-8") as fh:
            fh.write(serialize_config(config))
        digest, seed = config.config_hash(), config.seed
        stage = "estimator"
        sampler = build_sampler(config)
        if checkpoint is None:
            stage = "training"
            net, state = run_training(config, sampler, out, state)
        else:
            net, state = checkpoint.net(), checkpoint.state
        params = state.ema_params if (ema or config.inference.use_ema) else state.params
        tail = _log_tail(os.path.join(out, LOG_FILE)) if checkpoint is None else {"iterations_completed": state.iteration}

        stage = "inference"
        endpoint_rows, traj = evaluate_endpoints(config, net, params, config.inference.steps, sampler)
        write_csv(os.path.join(out, ENDPOINTS_FILE), "endpoints", seed, digest,
                  ("quantity", "n_steps", "dt_mode", "estimate", "std_error", "n_samples", "seed"), endpoint_rows)
        write_csv(os.path.join(out, TRAJECTORIES_FILE), "trajectories", seed, digest,
                  ("traj_id", "step", "t", *[f"z_{i}" for i in range(config.coupling.dim)]),
                  trajectory_rows(traj, config.inference.n_dump))

        diag_rows, checks = None, {}
        if config.diagnostics.enabled:
            stage = "diagnostics"
            trained = net if state.iteration > 0 else None
            diag_rows, checks = run_diagnostics(config, trained, params, sampler)
            write_csv(os.path.join(out, DIAGNOSTICS_FILE), "diagnostics", seed, digest,
                      ("quantity", "estimate", "std_error", "n_samples", "seed"), diag_rows)

        stage = "report"
        with open(os.path.join(out, REPORT_FILE), "w", encoding="utf-8") as fh:
            fh.write(render_report(config, tail, endpoint_rows, diag_rows, checks))
        result.summary = {"checks": checks, "endpoints": endpoint_rows, "diagnostics": diag_rows,
                          "iteration": state.iteration}
    except (CoupledFlowError, ValueError, ArithmeticError, OSError) as exc:
        result.status, result.failed_stage, result.error = 1, stage, f"{type(exc).__name__}: {exc}"
    write_manifest(out, result.status, result.failed_stage, result.error)
    return result


def _log_tail(path):
    if not os.path.exists(path):
        return {}
    _, cols, rows = read_csv(path)
    if not rows:
        return {}
    last = dict(zip(cols, rows[-1]))
    last.pop("wall_ms", None)
    return last


def run_experiment(config, out_dir=None, seed=None, steps=None, ema=False):
    """Run the full pipeline for ``config``.

    Parameters
    ----------
    config : ExperimentConfig or str
        Config object or path to a config file.
    out_dir : str, optional
        Overrides ``[experiment] output_dir``.
    seed : int, optional
        Overrides ``[experiment] seed``.
    steps : sequence of int, optional
        Overrides ``[inference] steps``.
    ema : bool
        Restore with the EMA parameters instead of the raw ones.

    Returns
    -------
    RunResult
        ``status`` is 0 on success; on failure the MANIFEST names the stage.
    """
    if isinstance(config, (str, os.PathLike)):
        config = load_config(config)
    config, out = _resolve(config, out_dir, seed, steps)
    return _pipeline(config, out, RunResult(out), ema=ema)


def resume_experiment(checkpoint_path, out_dir=None, steps=None, ema=False):
    """Continue training from a checkpoint next to its ``config.ini``."""
    base = os.path.dirname(os.path.abspath(checkpoint_path))
    config = load_config(os.path.join(base, CONFIG_FILE))
    ckpt = load_checkpoint(checkpoint_path, expected_hash=config.config_hash())
    config, out = _resolve(config, out_dir or base, None, steps)
    if os.path.abspath(out) != base:
        shutil.copyfile(os.path.join(base, LOG_FILE), os.path.join(out, LOG_FILE))
    return _pipeline(config, out, RunResult(out), state=ckpt.state, ema=ema)


def diagnose_checkpoint(checkpoint_path, config, out_dir=None, seed=None, steps=None, ema=False):
    """Inference and diagnostics for a saved model without further training."""
    if isinstance(config, (str, os.PathLike)):
        config = load_config(config)
    config, out = _resolve(config, out_dir or os.path.dirname(os.path.abspath(checkpoint_path)), seed, steps)
    ckpt = load_checkpoint(checkpoint_path, expected_hash=config.config_hash())
    return _pipeline(config, out, RunResult(out), checkpoint=ckpt, ema=ema)
