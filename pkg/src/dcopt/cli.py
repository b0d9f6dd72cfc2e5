"""Command-line front end: configured scenario runs with artifact output.

Scenarios wire one shared problem construction to different exchange
modes and compensators:

    no_delay        direct neighbor exchange, phase-lead compensator
    naive_delay     raw delayed exchange (expected to diverge)
    scattering      wave-variable channel over the same delays
    no_compensator  direct exchange, pure integrator (m = 1)

Each run writes three artifacts into the output directory: trajectory.csv
(long-format series), diagnostics.txt (verdict and summary figures), and
config.normalized (the fully defaulted configuration; re-running from it
reproduces trajectory.csv byte for byte).
"""

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from .dynamics import CompensatorParams
from .engine import ReferencePoint, SimConfig, simulate
from .graph import ring
from .matching import (
    brute_force_optimal,
    build_distributed_problem,
    extract_assignment,
    generate_instance,
)

SCENARIOS = ("no_delay", "naive_delay", "scattering", "no_compensator")

DEFAULT_CONFIG = {
    "seed": 5,
    "agents": 5,
    "area": 100.0,
    "ring_weight": 4.0,
    "step": 0.001,
    "duration": 200.0,
    "compensator_poles": [0.0, 5.0],
    "compensator_gains": [1.0, 10.0],
    "eta": 1.0,
    "initial_multiplier": 0.01,
    "delay_range": [0.2, 0.3],
    "log_every": 1000,
    "diag_interval": 0.1,
    "diagnostics": True,
}

KKT_TOL = 1e-2
OSCILLATION_FACTOR = 10.0


class ConfigError(ValueError):
    """Config rejected; the message names the offending field."""


@dataclass
class RunSpec:
    """One CLI invocation: where the config is, what to run, where to write."""

    config_path: str = None
    out_dir: str = "."
    scenario: str = "no_delay"
    duration: float = None
    step: float = None
    seed: int = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(
                f"scenario: {self.scenario!r} is not one of {SCENARIOS}"
            )


def _require(cond, field, detail):
    if not cond:
        raise ConfigError(f"{field}: {detail}")


def _check_number(field, value, positive=False, nonneg=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{field}: expected a number, got {value!r}")
    v = float(value)
    if positive:
        _require(v > 0.0, field, f"must be > 0, got {v}")
    if nonneg:
        _require(v >= 0.0, field, f"must be >= 0, got {v}")
    return v


def validate_config(path=None, overrides=None):
    """Parse, strictly validate, and fully default a JSON config.

    Unknown keys are rejected with the field path; overrides (duration,
    step, seed) are applied before validation so the normalized echo
    reproduces the run exactly.
    """
    raw = {}
    if path is not None:
        with open(path) as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as err:
                raise ConfigError(f"config: not valid JSON ({err})") from err
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be an object")
    for key in raw:
        if key not in DEFAULT_CONFIG:
            raise ConfigError(f"{key}: unknown config key")
    cfg = dict(DEFAULT_CONFIG)
    cfg.update(raw)
    if overrides:
        for key, value in overrides.items():
            if value is not None:
                cfg[key] = value

    _require(
        isinstance(cfg["seed"], int) and not isinstance(cfg["seed"], bool),
        "seed", f"expected an integer, got {cfg['seed']!r}",
    )
    _require(cfg["seed"] >= 0, "seed", "must be >= 0")
    _require(
        isinstance(cfg["agents"], int) and not isinstance(cfg["agents"], bool),
        "agents", f"expected an integer, got {cfg['agents']!r}",
    )
    _require(cfg["agents"] >= 3, "agents", "ring topology needs >= 3 agents")
    cfg["area"] = _check_number("area", cfg["area"], positive=True)
    cfg["ring_weight"] = _check_number(
        "ring_weight", cfg["ring_weight"], positive=True
    )
    cfg["step"] = _check_number("step", cfg["step"], positive=True)
    cfg["duration"] = _check_number("duration", cfg["duration"], nonneg=True)
    cfg["eta"] = _check_number("eta", cfg["eta"], positive=True)
    cfg["initial_multiplier"] = _check_number(
        "initial_multiplier", cfg["initial_multiplier"], positive=True
    )
    cfg["diag_interval"] = _check_number(
        "diag_interval", cfg["diag_interval"], positive=True
    )
    _require(
        cfg["diag_interval"] >= cfg["step"],
        "diag_interval", "must be >= step",
    )
    _require(
        isinstance(cfg["log_every"], int)
        and not isinstance(cfg["log_every"], bool)
        and cfg["log_every"] >= 1,
        "log_every", f"expected an integer >= 1, got {cfg['log_every']!r}",
    )
    _require(
        isinstance(cfg["diagnostics"], bool),
        "diagnostics", f"expected true/false, got {cfg['diagnostics']!r}",
    )

    poles = cfg["compensator_poles"]
    gains = cfg["compensator_gains"]
    for field, seq in (("compensator_poles", poles), ("compensator_gains", gains)):
        _require(
            isinstance(seq, list) and len(seq) >= 1,
            field, "expected a non-empty list",
        )
        for k, v in enumerate(seq):
            _check_number(f"{field}[{k}]", v)
    _require(
        len(poles) == len(gains),
        "compensator_gains", "must have the same length as compensator_poles",
    )
    _require(poles[0] == 0.0, "compensator_poles[0]", "must be exactly 0")
    for k in range(1, len(poles)):
        _require(
            poles[k] > poles[k - 1],
            f"compensator_poles[{k}]", "poles must be strictly increasing",
        )
    for k, v in enumerate(gains):
        _require(v > 0.0, f"compensator_gains[{k}]", "gains must be > 0")

    dr = cfg["delay_range"]
    _require(
        isinstance(dr, list) and len(dr) == 2,
        "delay_range", "expected [low, high]",
    )
    low = _check_number("delay_range[0]", dr[0], positive=True)
    high = _check_number("delay_range[1]", dr[1], positive=True)
    _require(low <= high, "delay_range[1]", "high must be >= low")
    cfg["delay_range"] = [low, high]
    return cfg


def sample_delays(network, cfg):
    """Per-directed-edge constant delays, seeded from the config seed.

    The stream is decoupled from the instance-position stream by a fixed
    second seed word, so positions and delays vary independently.
    """
    rng = np.random.default_rng([cfg["seed"], 1])
    low, high = cfg["delay_range"]
    delays = {}
    for i, j, _ in network.directed_edges():
        delay = float(rng.uniform(low, high))
        if delay < cfg["step"]:
            raise ConfigError(
                f"delay_range: sampled delay {delay:.6f} s on edge {i}->{j} "
                f"is below one step ({cfg['step']} s)"
            )
        delays[(i, j)] = delay
    return delays


def build_scenario(cfg, scenario):
    """(instance, problem, SimConfig) for a validated config + scenario.

    The four scenarios share the instance and problem; they differ only in
    exchange mode and compensator order.
    """
    inst = generate_instance(cfg["seed"], cfg["agents"], cfg["area"])
    net = ring(cfg["agents"], cfg["ring_weight"])
    prob = build_distributed_problem(inst, net)
    if scenario == "no_compensator":
        comp = CompensatorParams.pure_integrator()
    else:
        comp = CompensatorParams(
            np.array(cfg["compensator_poles"], dtype=float),
            np.array(cfg["compensator_gains"], dtype=float),
        )
    mode = {
        "no_delay": "no_delay",
        "no_compensator": "no_delay",
        "naive_delay": "naive_delay",
        "scattering": "scattering",
    }[scenario]
    delays = sample_delays(net, cfg) if mode != "no_delay" else None
    sim = SimConfig(
        step=cfg["step"],
        duration=cfg["duration"],
        mode=mode,
        compensator=comp,
        eta=cfg["eta"],
        delays=delays,
        lam0=cfg["initial_multiplier"],
        log_every=cfg["log_every"],
        diag_interval=cfg["diag_interval"],
    )
    return inst, prob, sim


def compute_reference(cfg, prob):
    """Converged no-delay end state, or None with the reason it is absent."""
    _, _, sim = build_scenario(cfg, "no_delay")
    log = simulate(prob, sim)
    if log.abort_reason is not None:
        return None, f"reference run aborted ({log.abort_reason})"
    ref = ReferencePoint.from_states(log.final_states)
    try:
        res = ref.validate(prob, KKT_TOL)
    except ValueError:
        worst = max(log.kkt[-1].as_dict().values())
        return None, (
            f"no-delay end state fails KKT at {KKT_TOL:g} "
            f"(max residual {worst:.3e})"
        )
    return ref, f"no-delay end state, max KKT residual {res.max():.3e}"


def kkt_series_max(log):
    """Worst KKT residual field per logged sample."""
    return np.array([max(res.as_dict().values()) for res in log.kkt])


def classify(log, duration):
    """Verdict: diverged / converged / oscillating / not_converged.

    oscillating: some KKT residual field swings over its last quartile by
    more than 10x its own minimum there.  Fields whose last-quartile max is
    already below the convergence tolerance do not count; sub-tolerance
    wiggle is not a failure to settle.
    """
    if log.abort_reason is not None:
        return "diverged"
    series = kkt_series_max(log)
    if series.size and series[-1] <= KKT_TOL:
        return "converged"
    times = np.array(log.t)
    mask = times >= 0.75 * duration
    if np.count_nonzero(mask) >= 2:
        for name in log.kkt[0].as_dict():
            q = np.array([getattr(r, name) for r in log.kkt])[mask]
            spread = float(q.max() - q.min())
            if q.max() > KKT_TOL and spread > OSCILLATION_FACTOR * float(q.min()):
                return "oscillating"
    return "not_converged"


def _fmt(value):
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.6e}"
    return str(value)


def write_diagnostics(path, lines):
    with open(path, "w") as f:
        for key, value in lines:
            f.write(f"{key}: {_fmt(value)}\n")


def run(spec):
    """Execute one scenario end to end; returns the process exit status."""
    cfg = validate_config(
        spec.config_path,
        overrides={
            "duration": spec.duration,
            "step": spec.step,
            "seed": spec.seed,
        },
    )
    os.makedirs(spec.out_dir, exist_ok=True)
    inst, prob, sim = build_scenario(cfg, spec.scenario)

    ref = None
    ref_note = "diagnostics disabled"
    if cfg["diagnostics"]:
        ref, ref_note = compute_reference(cfg, prob)
        sim.reference = ref

    t0 = time.perf_counter()
    log = simulate(prob, sim)
    wall = time.perf_counter() - t0

    verdict = classify(log, cfg["duration"])
    oracle, oracle_cost = brute_force_optimal(inst)
    x_end, _, _, _ = log.final_stacks()
    assignments = [extract_assignment(x_end[i]) for i in range(prob.n_agents)]
    matches = sum(1 for a in assignments if a == oracle)
    objective_sum = sum(
        prob.local_problems[i].objective.value(x_end[i])
        for i in range(prob.n_agents)
    )

    lines = [
        ("scenario", spec.scenario),
        ("verdict", verdict),
        ("seed", cfg["seed"]),
        ("simulated_seconds", float(log.t[-1]) if log.t else 0.0),
        ("wall_seconds", wall),
        ("abort_reason", log.abort_reason),
        ("abort_step", log.abort_step),
        ("oracle_permutation", oracle),
        ("agents_matching_oracle", f"{matches}/{prob.n_agents}"),
        ("assignments", assignments),
        ("objective_sum", float(objective_sum)),
        ("oracle_cost", oracle_cost),
        ("final_consensus_error", float(log.consensus[-1])),
    ]
    for name, value in log.kkt[-1].as_dict().items():
        lines.append((f"final_kkt_{name}", float(value)))
    lines.append(("reference", ref_note))

    if ref is not None and log.lyap_direct:
        v = np.array(log.lyap_direct)
        slack = 1e-3 * cfg["step"] * (1.0 + v[0])
        inc = float(np.diff(v).max()) if v.size > 1 else 0.0
        lines += [
            ("lyapunov_direct_initial", float(v[0])),
            ("lyapunov_direct_final", float(v[-1])),
            ("lyapunov_direct_max_increment", inc),
            ("lyapunov_direct_slack", slack),
        ]
        if sim.mode == "no_delay":
            lines.append(("lyapunov_direct_non_increasing", inc <= slack))
    if ref is not None and log.lyap_delayed:
        vb = np.array(log.lyap_delayed)
        slack = 1e-3 * cfg["step"] * (1.0 + vb[0])
        inc = float(np.diff(vb).max()) if vb.size > 1 else 0.0
        lines += [
            ("lyapunov_delayed_initial", float(vb[0])),
            ("lyapunov_delayed_final", float(vb[-1])),
            ("lyapunov_delayed_max_increment", inc),
            ("lyapunov_delayed_slack", slack),
            ("lyapunov_delayed_non_increasing", inc <= slack),
        ]
    if ref is not None:
        for name, arr in (
            ("compensator", log.compensator_excess),
            ("multiplier", log.multiplier_excess),
            ("coupling", log.coupling_excess),
        ):
            if arr is None or np.isnan(arr).all():
                lines.append((f"passivity_{name}_max_excess", None))
            else:
                lines.append(
                    (f"passivity_{name}_max_excess", float(np.nanmax(arr)))
                )
        if sim.mode == "scattering":
            lines.append(("wave_identity_max", float(log.wave_identity_max)))
    lines.append(("events", len(log.events)))
    for ev in log.events:
        lines.append(
            ("event", f"step {ev['step']} t={ev['t']:.3f} {ev['kind']}: "
                      f"{ev['detail']}")
        )

    log.to_csv(os.path.join(spec.out_dir, "trajectory.csv"))
    write_diagnostics(os.path.join(spec.out_dir, "diagnostics.txt"), lines)
    with open(os.path.join(spec.out_dir, "config.normalized"), "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")

    if log.abort_reason is not None and spec.scenario != "naive_delay":
        return 1
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="dcopt",
        description=(
            "Distributed constrained optimization simulator: run one "
            "scenario and write trajectory.csv, diagnostics.txt, and "
            "config.normalized."
        ),
    )
    parser.add_argument("--config", help="JSON config file (defaults if omitted)")
    parser.add_argument(
        "--scenario", required=True, choices=SCENARIOS, help="what to run"
    )
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument(
        "--duration", type=float, help="override simulated seconds"
    )
    parser.add_argument("--step", type=float, help="override step size")
    args = parser.parse_args(argv)
    spec = RunSpec(
        config_path=args.config,
        out_dir=args.out,
        scenario=args.scenario,
        duration=args.duration,
        step=args.step,
        seed=args.seed,
    )
    try:
        return run(spec)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
