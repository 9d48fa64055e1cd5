"""Closed-loop scenarios: plant/model mismatch, disturbances, baselines.

A scenario runs two copies of the network dynamics side by side.  The
*model* is the nominal system the controller was built from; the *plant*
is the same network with perturbed demands and reaction rates plus
optional contamination events that overwrite state entries.  The
controller only ever sees plant sensor readings and its own model state.

The rule-based baseline maps a scalar network-wide deviation to a fixed
chlorine dose per control step through a lookup table, mimicking common
operator heuristics.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import units
from .errors import ModelError, WqmpcError
from .dynamics import (
    ReactionModel,
    StateSpaceSystem,
    Trajectory,
    build_schedule,
    initial_state,
    step,
)
from .hydraulics import HydraulicPeriod, HydraulicProfile
from .mpc import ControlConfig, RecedingHorizonController
from .network import WaterNetwork


# ---------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------


@dataclass(frozen=True)
class UncertaintySpec:
    """Multiplicative perturbation bands (fraction of nominal)."""

    demand_band: float = 0.10
    reaction_band: float = 0.10
    resample_period_s: float | None = None  # default: hydraulic period

    def validate(self) -> None:
        if not 0 <= self.demand_band < 1 or not 0 <= self.reaction_band < 1:
            raise WqmpcError("perturbation bands must lie in [0, 1)")


@dataclass(frozen=True)
class DisturbanceEvent:
    """At ``time_s``, force the plant concentration of every state entry
    matched by ``targets`` to ``value_mg_l``."""

    time_s: float
    targets: tuple[str, ...]
    value_mg_l: float


@dataclass(frozen=True)
class Rule:
    low: float   # deviation interval [low, high)
    high: float
    dose_mg: float  # chlorine mass injected per control step


@dataclass(frozen=True)
class RuleTable:
    """Piecewise-constant dose schedule over the deviation range.

    Intervals must be disjoint and cover [-y_ref, 0] exactly.
    """

    rules: tuple[Rule, ...]
    y_ref: float

    def __post_init__(self):
        rules = sorted(self.rules, key=lambda r: r.low)
        if not rules:
            raise WqmpcError("rule table is empty")
        if abs(rules[0].low - (-self.y_ref)) > 1e-12:
            raise WqmpcError(
                f"rule table must start at {-self.y_ref}, got {rules[0].low}"
            )
        for a, b in zip(rules, rules[1:]):
            if a.high > b.low + 1e-12:
                raise WqmpcError(
                    f"overlapping rules at deviation {b.low}"
                )
            if a.high < b.low - 1e-12:
                raise WqmpcError(f"rule table gap between {a.high} and {b.low}")
        if abs(rules[-1].high) > 1e-12:
            raise WqmpcError(
                f"rule table must end at 0, got {rules[-1].high}"
            )
        for r in rules:
            if r.dose_mg < 0:
                raise WqmpcError("doses must be nonnegative")
        object.__setattr__(self, "rules", tuple(rules))

    def dose(self, deviation: float) -> float:
        d = min(max(deviation, -self.y_ref), 0.0)
        for r in self.rules:
            if r.low <= d < r.high:
                return r.dose_mg
        return self.rules[-1].dose_mg  # d == 0 (closed upper end)


@dataclass(frozen=True)
class ScenarioConfig:
    duration_s: float
    control_period_s: float
    seg_counts: int
    sensors: tuple[str, ...]
    y_ref: float
    horizon: int
    q: float = 1.0
    r: float = 1.0
    price_per_mg: float = 0.0
    u_max: float = np.inf
    y_min: float = -np.inf
    y_max: float = np.inf
    constrained: bool = False
    seed: int = 0
    uncertainty: UncertaintySpec = field(default_factory=UncertaintySpec)
    events: tuple[DisturbanceEvent, ...] = ()
    rules: RuleTable | None = None
    paper_literal_reaction: bool = False

    def validate(self, profile: HydraulicProfile) -> None:
        self.uncertainty.validate()
        t_h = profile.periods[0].duration_s
        if any(p.duration_s != t_h for p in profile.periods):
            raise WqmpcError("hydraulic periods must share one duration")
        for total, part, what in (
            (self.duration_s, t_h, "hydraulic period"),
            (t_h, self.control_period_s, "control period"),
        ):
            k = total / part
            if abs(k - round(k)) > 1e-9 or k < 1:
                raise WqmpcError(
                    f"{what} ({part} s) must divide its parent span ({total} s)"
                )
        if self.duration_s > profile.total_duration_s + 1e-9:
            raise WqmpcError("scenario outlasts the hydraulic schedule")


def load_scenario(text: str) -> ScenarioConfig:
    """Parse the JSON scenario description."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WqmpcError(f"bad scenario JSON: {exc}") from None
    try:
        unc = raw.get("uncertainty", {})
        events = tuple(
            DisturbanceEvent(
                time_s=float(e["time_s"]),
                targets=tuple(e["targets"]),
                value_mg_l=float(e["value_mg_l"]),
            )
            for e in raw.get("events", ())
        )
        y_ref = float(raw["y_ref"])
        rules = None
        if raw.get("rules") is not None:
            rules = RuleTable(
                rules=tuple(
                    Rule(float(r["low"]), float(r["high"]), float(r["dose_mg"]))
                    for r in raw["rules"]
                ),
                y_ref=y_ref,
            )
        return ScenarioConfig(
            duration_s=float(raw["duration_s"]),
            control_period_s=float(raw["control_period_s"]),
            seg_counts=int(raw.get("segments", 100)),
            sensors=tuple(raw["sensors"]),
            y_ref=y_ref,
            horizon=int(raw["horizon"]),
            q=float(raw.get("q", 1.0)),
            r=float(raw.get("r", 1.0)),
            price_per_mg=float(raw.get("price_per_mg", 0.0)),
            u_max=float(raw.get("u_max", np.inf)),
            y_min=float(raw.get("y_min", -np.inf)),
            y_max=float(raw.get("y_max", np.inf)),
            constrained=bool(raw.get("constrained", False)),
            seed=int(raw.get("seed", 0)),
            uncertainty=UncertaintySpec(
                demand_band=float(unc.get("demand_band", 0.10)),
                reaction_band=float(unc.get("reaction_band", 0.10)),
                resample_period_s=unc.get("resample_period_s"),
            ),
            events=events,
            rules=rules,
        )
    except KeyError as exc:
        raise WqmpcError(f"scenario missing required field {exc}") from None


# ---------------------------------------------------------------------
# Plant construction
# ---------------------------------------------------------------------


def apply_uncertainty(
    net: WaterNetwork,
    profile: HydraulicProfile,
    spec: UncertaintySpec,
    rng: np.random.Generator,
) -> tuple[HydraulicProfile, ReactionModel]:
    """Perturbed plant inputs: demands scaled per period inside the band,
    reaction constants scaled once for the whole run.

    Only the junction demands move (mixing denominators change); link
    flows are kept as scheduled, so the perturbation models metering
    error rather than a re-solved hydraulic state.
    """
    spec.validate()
    periods = []
    for p in profile.periods:
        factor = 1.0 + spec.demand_band * rng.uniform(-1.0, 1.0, size=p.demands.shape)
        periods.append(replace(p, demands=p.demands * factor))
    kb_f = 1.0 + spec.reaction_band * rng.uniform(-1.0, 1.0, size=net.n_p)
    kw_f = 1.0 + spec.reaction_band * rng.uniform(-1.0, 1.0, size=net.n_p)
    nominal = ReactionModel.from_network(net)
    scaled = ReactionModel(
        k_pipe=np.array(
            [
                # re-derive the effective rate from perturbed kb, kw
                _effective_rate(pipe, kb_f[i], kw_f[i])
                for i, pipe in enumerate(net.pipes)
            ]
        ),
        k_tank=nominal.k_tank.copy(),
    )
    perturbed = HydraulicProfile(
        periods=tuple(periods),
        balance_residuals=profile.balance_residuals,
        consistent=False,
    )
    return perturbed, scaled


def _effective_rate(pipe, kb_factor: float, kw_factor: float) -> float:
    from .dynamics import pipe_reaction_constant

    return pipe_reaction_constant(
        pipe.kb * kb_factor, pipe.kw * kw_factor, pipe.kf, pipe.diameter_m
    )


# ---------------------------------------------------------------------
# Rule-based baseline
# ---------------------------------------------------------------------


def rbc_control(
    table: RuleTable,
    x_plant: np.ndarray,
    sys: StateSpaceSystem,
    y_ref: float,
    booster_flows: np.ndarray,
    control_period_s: float,
) -> np.ndarray:
    """Dose per the rule table, spread over the control period.

    The deviation is the average of the mean pipe-segment error and the
    mean junction error (concentration minus setpoint), clamped to the
    table's domain; the dose (mg per control step) converts to an
    injection concentration through each booster's flow.
    """
    im = sys.index_map
    net = im.net
    seg = x_plant[net.n_n:net.n_n + im.n_s]
    junc = x_plant[: net.n_j]
    dev = 0.5 * ((seg.mean() - y_ref) + (junc.mean() - y_ref))
    dose = table.dose(dev)
    u = np.zeros(net.n_n)
    active = booster_flows > 0
    if dose > 0 and active.any():
        share = dose / active.sum()
        liters = booster_flows[active] * 1000.0 * control_period_s
        u[active] = share / liters
    return u


# ---------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioReport:
    controller: str
    times_s: np.ndarray        # control instants
    outputs: np.ndarray        # (n_c, n_y) plant sensor readings at each instant
    inputs: np.ndarray         # (n_c, n_u) applied injection concentrations
    injected_mg: np.ndarray    # (n_c,) chlorine mass per control step
    sensor_labels: tuple[str, ...]
    node_ids: tuple[str, ...]
    metrics: dict[str, float]
    trajectory: Trajectory | None = None


def run_closed_loop(
    net: WaterNetwork,
    profile: HydraulicProfile,
    config: ScenarioConfig,
    controller: str = "mpc",
    keep_trajectory: bool = False,
) -> ScenarioReport:
    """Simulate plant and model side by side under one controller.

    ``controller`` is 'mpc', 'rbc', or 'none' (zero injection).
    """
    config.validate(profile)
    if controller not in ("mpc", "rbc", "none"):
        raise WqmpcError(f"unknown controller {controller!r}")
    if controller == "rbc" and config.rules is None:
        raise WqmpcError("rule-based control requires a rule table")

    rng = np.random.default_rng(config.seed)
    plant_profile, plant_reaction = apply_uncertainty(
        net, profile, config.uncertainty, rng
    )

    model_schedule = build_schedule(
        net, profile, config.seg_counts,
        paper_literal_reaction=config.paper_literal_reaction,
    )
    plant_schedule = build_schedule(
        net, plant_profile, config.seg_counts, reaction=plant_reaction,
        paper_literal_reaction=config.paper_literal_reaction,
    )

    im = model_schedule[0][0].index_map
    sensor_idx = np.array([_sensor_index(im, s) for s in config.sensors])
    x_model = initial_state(net, im)
    x_plant = x_model.copy()

    mpc = RecedingHorizonController(
        ControlConfig(
            sensors=config.sensors,
            horizon=config.horizon,
            y_ref=config.y_ref,
            q=config.q,
            r=config.r,
            price_per_mg=config.price_per_mg,
            u_max=config.u_max,
            y_min=config.y_min,
            y_max=config.y_max,
            constrained=config.constrained,
        )
    )

    events = sorted(config.events, key=lambda e: e.time_s)
    next_event = 0

    times, outputs, inputs, masses = [], [], [], []
    deviation = 0.0
    smoothness = 0.0
    injected_mass = 0.0
    u = np.zeros(net.n_n)
    u_prev_applied = np.zeros(net.n_n)
    t = 0.0
    wall = 0.0
    n_controls = 0

    traj_states, traj_times = ([x_plant.copy()], [0.0]) if keep_trajectory else (None, None)

    n_periods = int(round(config.duration_s / profile.periods[0].duration_s))
    for pid in range(n_periods):
        model_sys, n_steps = model_schedule[pid]
        plant_sys, n_steps_p = plant_schedule[pid]
        if n_steps_p != n_steps:
            raise ModelError("plant and model step counts diverged")
        period = profile.periods[pid]
        dt = model_sys.dt_s
        hold = config.control_period_s / dt
        if abs(hold - round(hold)) > 1e-9:
            raise WqmpcError(
                f"control period not a multiple of the quality step {dt} s"
            )
        hold = int(round(hold))
        for k in range(n_steps):
            while next_event < len(events) and events[next_event].time_s <= t + 1e-9:
                ev = events[next_event]
                for spec in ev.targets:
                    for idx in im.resolve(spec):
                        x_plant[idx] = ev.value_mg_l
                next_event += 1
                if keep_trajectory:
                    traj_states[-1] = x_plant.copy()
            if k % hold == 0:
                y_meas = x_plant[sensor_idx]
                t0 = time.perf_counter()
                if controller == "mpc":
                    u = mpc.control(
                        model_sys, x_model, y_meas, period.booster_flows
                    )
                elif controller == "rbc":
                    u = rbc_control(
                        config.rules, x_plant, plant_sys, config.y_ref,
                        period.booster_flows, config.control_period_s,
                    )
                else:
                    u = np.zeros(net.n_n)
                wall += time.perf_counter() - t0
                n_controls += 1
                times.append(t)
                outputs.append(y_meas.copy())
                inputs.append(u.copy())
                masses.append(0.0)
                smoothness += 0.5 * config.r * float(
                    np.sum((u - u_prev_applied) ** 2)
                )
                u_prev_applied = u
            x_plant = step(plant_sys, x_plant, u)
            x_model = step(model_sys, x_model, u)
            t += dt
            y_now = x_plant[sensor_idx]
            deviation += 0.5 * config.q * float(
                np.sum((config.y_ref - y_now) ** 2)
            )
            step_mass = float(
                np.sum(u * period.booster_flows * 1000.0 * dt)
            )
            masses[-1] += step_mass
            injected_mass += step_mass
            if keep_trajectory:
                traj_states.append(x_plant.copy())
                traj_times.append(t)

    metrics = {
        "reference_deviation": deviation,
        "smoothness": smoothness,
        "chlorine_cost_usd": config.price_per_mg * injected_mass,
        "total": deviation + smoothness + config.price_per_mg * injected_mass,
        "injected_mass_mg": injected_mass,
        "wall_ms_per_control_step": 1000.0 * wall / max(n_controls, 1),
    }
    traj = None
    if keep_trajectory:
        traj = Trajectory(
            times_s=np.array(traj_times),
            states=np.array(traj_states),
            index_map=im,
        )
    return ScenarioReport(
        controller=controller,
        times_s=np.array(times),
        outputs=np.array(outputs),
        inputs=np.array(inputs),
        injected_mg=np.array(masses),
        sensor_labels=tuple(config.sensors),
        node_ids=net.node_ids,
        metrics=metrics,
        trajectory=traj,
    )


def _sensor_index(im, spec: str) -> int:
    if "[" in spec:
        eid, rest = spec.split("[", 1)
        return im.index(eid, int(rest.rstrip("]")))
    return im.index(spec)


# ---------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------


def export_report(report: ScenarioReport, directory: str) -> list[str]:
    """Write the control-step time series and metrics.

    Output is deterministic: fixed column order, repr-style floats, sorted
    metric keys.  An empty report still writes headers.
    """
    os.makedirs(directory, exist_ok=True)
    ts_path = os.path.join(directory, "timeseries.csv")
    active = [
        i for i in range(len(report.node_ids))
        if report.inputs.size and np.any(report.inputs[:, i] != 0)
    ]
    if not active and report.inputs.size:
        active = list(range(len(report.node_ids)))
    with open(ts_path, "w") as fh:
        cols = (
            ["time_s"]
            + [f"y_{s}" for s in report.sensor_labels]
            + [f"u_{report.node_ids[i]}" for i in active]
            + ["injected_mg"]
        )
        fh.write(",".join(cols) + "\n")
        for k in range(len(report.times_s)):
            vals = [f"{report.times_s[k]:.17g}"]
            vals += [f"{v:.17g}" for v in report.outputs[k]]
            vals += [f"{report.inputs[k, i]:.17g}" for i in active]
            vals.append(f"{report.injected_mg[k]:.17g}")
            fh.write(",".join(vals) + "\n")
    mx_path = os.path.join(directory, "metrics.json")
    with open(mx_path, "w") as fh:
        # wall-clock timings are excluded so equal seeds export identically
        json.dump(
            {
                k: report.metrics[k]
                for k in sorted(report.metrics)
                if not k.startswith("wall_")
            },
            fh, indent=2,
        )
        fh.write("\n")
    return [ts_path, mx_path]
