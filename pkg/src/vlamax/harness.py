"""Experiment orchestration: paired runs, sweeps, lattice sampling, reports.

A paired run evolves the same initial configuration Z under (a) the
self-consistent rigid-charge dynamics and (b) the tracer flow of a reference
kinetic solution, then measures their divergence: sup trajectory deviations,
the capped chaos process, Wasserstein distances at checkpoints, and field
differences on a lattice.  Sweeps repeat this over particle counts and seeds
and write one CSV row per run.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
import struct
import warnings
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from . import abraham
from .abraham import GridSpec, MicroState, init_micro
from .distributions import ProductBump
from .fields import FieldEvaluator, InitialFieldModel
from .formfactor import make_standard_profile, rescale
from .meanfield import FlowRecord, ReferenceEnsemble, build_reference, evolve_reference, track_flow
from .transport import ChaosMetricConfig, chaos_process_J, loglog_slope, wasserstein_p, winf_upper

__all__ = [
    "ExperimentConfig",
    "LatticeSpec",
    "PairedResult",
    "SweepResult",
    "sample_initial",
    "build_fields",
    "run_paired",
    "sweep",
    "lln_probe",
    "write_snapshot",
    "read_snapshot",
    "load_config",
    "SWEEP_SCHEMA",
]

SWEEP_SCHEMA = "vlamax.sweep.v1"
SWEEP_COLUMNS = [
    "n", "seed", "r_n", "gamma", "delta", "t_final", "dt", "m_ref",
    "sup_dev_pos", "sup_dev_mom", "j_t", "w1_mid", "w2_mid", "w1_final",
    "w2_final", "field_sup_0", "field_sup_final", "energy_drift",
    "r_max", "rho_max", "pairing_bound_ok", "config_hash",
]


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    """One experiment definition; sections of the config file map to fields."""

    # [run]
    # strict mode enforces the parameter regime of the quantitative chaos
    # bound (gamma < 1/12 < ... ); the default gamma sits exactly on that
    # open boundary, so exploratory mode is the default
    label: str = "default"
    output_dir: str = "runs"
    t_final: float = 0.5
    dt: float = 1.0 / 32.0
    strict: bool = False
    # [f0]
    x_radius: float = 1.0
    xi_radius: float = 0.5
    # [form_factor]
    gamma: float = 1.0 / 12.0
    # [meanfield]
    m_reference: int = 1024
    ref_seed: int = 2024
    antithetic: bool = True
    # [abraham]
    field_mode: str = "table"
    include_self: bool = True
    force_cap: float = 1e3
    # [sweep]
    n_values: tuple = (64, 128, 256, 512)
    n_seeds: int = 10
    delta: float = 0.1
    base_seed: int = 77
    # [metrics]
    checkpoint: float = 0.25
    # [lattice]
    n_lat: int = 0  # 0 = auto ceil(N^(1/3))
    # [energy]
    energy_grid: int = 20
    energy_enable: bool = True
    # [chaos]
    momentum_bound: float = 1.5

    def f0(self) -> ProductBump:
        return ProductBump(self.x_radius, self.xi_radius)

    def validate(self):
        if self.t_final <= 0 or self.dt <= 0:
            raise ValueError("need positive horizon and step")
        if self.strict:
            if not (self.gamma < 1.0 / 12.0):
                raise ValueError("strict mode requires gamma < 1/12")
            if not (self.gamma < self.delta < 0.25):
                raise ValueError("strict mode requires gamma < delta < 1/4")
        return self

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha1(payload.encode()).hexdigest()[:12]

    def alpha_gate(self, p):
        """Largest admissible concentration exponent for order p displays."""
        return min(1.0 / 6.0, 1.0 / (2.0 * p))


_SECTION_FIELDS = {
    "run": ["label", "output_dir", "t_final", "dt", "strict"],
    "f0": ["x_radius", "xi_radius"],
    "form_factor": ["gamma"],
    "meanfield": ["m_reference", "ref_seed", "antithetic"],
    "abraham": ["field_mode", "include_self", "force_cap"],
    "sweep": ["n_values", "n_seeds", "delta", "base_seed"],
    "metrics": ["checkpoint"],
    "lattice": ["n_lat"],
    "energy": ["energy_grid", "energy_enable"],
    "chaos": ["momentum_bound"],
}


def load_config(path=None, overrides=None) -> ExperimentConfig:
    """Read the sectioned key/value config file; env vars override seeds/paths.

    Recognized environment overrides: VLAMAX_SEED (base_seed) and
    VLAMAX_OUTDIR (output_dir).
    """
    cfg = ExperimentConfig()
    if path:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise FileNotFoundError(path)
        for section, names in _SECTION_FIELDS.items():
            if not parser.has_section(section):
                continue
            for name in names:
                if not parser.has_option(section, name):
                    continue
                raw = parser.get(section, name)
                current = getattr(cfg, name)
                if name == "n_values":
                    setattr(cfg, name, tuple(int(v) for v in raw.split()))
                elif isinstance(current, bool):
                    setattr(cfg, name, parser.getboolean(section, name))
                elif isinstance(current, int):
                    setattr(cfg, name, int(raw))
                elif isinstance(current, float):
                    setattr(cfg, name, float(raw))
                else:
                    setattr(cfg, name, raw)
    if overrides:
        for key, val in overrides.items():
            setattr(cfg, key, val)
    if os.environ.get("VLAMAX_SEED"):
        cfg.base_seed = int(os.environ["VLAMAX_SEED"])
    if os.environ.get("VLAMAX_OUTDIR"):
        cfg.output_dir = os.environ["VLAMAX_OUTDIR"]
    return cfg.validate()


# ---------------------------------------------------------------------------
# lattice


@dataclass
class LatticeSpec:
    """Regular cubic lattice over [-bound, bound]^3 used for field sampling."""

    bound: float
    points_per_axis: int

    @classmethod
    def for_n(cls, n, bound, n_lat=0):
        side = 3 * (int(n_lat) or int(np.ceil(n ** (1.0 / 3.0))))
        return cls(bound=bound, points_per_axis=side)

    def points(self):
        ax = np.linspace(-self.bound, self.bound, self.points_per_axis)
        gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    @property
    def n_points(self):
        return self.points_per_axis**3


def support_bound(cfg: ExperimentConfig) -> float:
    """Spatial radius certainly containing the flow: initial support + T + 1."""
    return cfg.x_radius + cfg.t_final + 1.0


# ---------------------------------------------------------------------------
# initial data


def sample_initial(f0: ProductBump, n, seed):
    """N i.i.d. phase-space draws from f0; deterministic in the seed."""
    rng = np.random.default_rng([int(seed), 0xA11CE])
    return f0.sample_z(int(n), rng=rng)


def build_fields(f0: ProductBump, Z, chi_n):
    """Initial-field models under the fixed convention.

    The kinetic side smooths the Coulomb field of rho[f0]; the particle side
    corrects it so its Gauss constraint matches the smoothed empirical
    density, which collapses to the smoothed Coulomb field of the atoms.
    Returns (macro_model, micro_model), each exposing initial_field and its
    free evolution.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    n = Z.shape[0]
    macro = InitialFieldModel(chi_n, radial_density=f0.x_density())
    micro = InitialFieldModel(chi_n, centers=Z[:, :3], charges=np.full(n, 1.0 / n))
    return macro, micro


# ---------------------------------------------------------------------------
# paired runs


@dataclass
class PairedResult:
    n: int
    seed: int
    row: dict
    micro_record: FlowRecord
    tracer_record: FlowRecord


def _field_sup_diff(ev_a: FieldEvaluator, ev_b: FieldEvaluator, t, points, chunk=4096):
    worst = 0.0
    for lo in range(0, points.shape[0], chunk):
        pts = points[lo : lo + chunk]
        ea, ba = ev_a.fields(t, pts, smoothing="single", mode="table")
        eb, bb = ev_b.fields(t, pts, smoothing="single", mode="table")
        diff = np.linalg.norm(ea - eb, axis=-1) + np.linalg.norm(ba - bb, axis=-1)
        worst = max(worst, float(np.max(diff)))
    return worst


def _rho_tilde_max(state: MicroState, points):
    dens = np.zeros(points.shape[0])
    for i in range(state.n):
        dens += state.weights[i] * state.chi(points - state.x[i])
    return float(np.max(dens))


def run_paired(cfg: ExperimentConfig, n, seed, reference: ReferenceEnsemble | None = None,
               control=False, keep_records=True) -> PairedResult:
    """One (N, seed) paired run; returns the report row plus trajectories.

    control=True replaces the self-consistent force by the reference force,
    so both sides integrate the same field and J_T vanishes up to float
    reproducibility of the two integrator code paths.
    """
    cfg.validate()
    f0 = cfg.f0()
    chi = make_standard_profile()
    chi_n = rescale(chi, int(n), cfg.gamma, strict=cfg.strict)
    t_pad = cfg.t_final + 2 * cfg.dt
    if reference is None:
        reference = build_reference(
            f0, cfg.m_reference, chi_n, seed=cfg.ref_seed,
            antithetic=cfg.antithetic, field_mode=cfg.field_mode, t_max=t_pad,
        )
        evolve_reference(reference, cfg.dt, cfg.t_final)
    z0 = sample_initial(f0, n, seed)
    n_steps = int(round(cfg.t_final / cfg.dt))

    if control:
        override = lambda ts, x, xi: reference.evaluator.force(ts, x, xi, mode=cfg.field_mode)
        micro = init_micro(
            z0, f0, chi_n, field_mode=cfg.field_mode, t_max=t_pad,
            include_self=cfg.include_self, force_cap=cfg.force_cap,
            force_override=override,
        )
    else:
        micro = init_micro(
            z0, f0, chi_n, field_mode=cfg.field_mode, t_max=t_pad,
            include_self=cfg.include_self, force_cap=cfg.force_cap,
        )
    abraham.run(micro, cfg.dt, n_steps)
    micro_rec = FlowRecord.from_history(micro.hist)
    flow = track_flow(reference, z0, cfg.dt, cfg.t_final, warn_outside=False)
    tracer_rec = flow.record

    dev_pos = micro_rec.position_dev(tracer_rec)
    dev_mom = micro_rec.momentum_dev(tracer_rec)
    cfg_j = ChaosMetricConfig(int(n), cfg.delta)
    j_t = chaos_process_J(micro_rec, tracer_rec, cfg_j, cfg.t_final)

    times = micro_rec.times
    mid_idx = int(np.argmin(np.abs(times - cfg.checkpoint)))
    atoms = lambda rec, k: np.concatenate([rec.x[k], rec.xi[k]], axis=1)
    w1_mid = wasserstein_p(atoms(micro_rec, mid_idx), atoms(tracer_rec, mid_idx), 1.0)
    w2_mid = wasserstein_p(atoms(micro_rec, mid_idx), atoms(tracer_rec, mid_idx), 2.0)
    w1_fin = wasserstein_p(atoms(micro_rec, -1), atoms(tracer_rec, -1), 1.0)
    w2_fin = wasserstein_p(atoms(micro_rec, -1), atoms(tracer_rec, -1), 2.0)

    # pairing-bound linkage: once J < 1 the phase-space sup deviation is
    # below N^-delta, and every W_p is below the index-aligned pairing bound
    pairing_ok = True
    for k in (mid_idx, len(times) - 1):
        wub = winf_upper(atoms(micro_rec, k), atoms(tracer_rec, k))
        if wasserstein_p(atoms(micro_rec, k), atoms(tracer_rec, k), 2.0) > wub + 1e-12:
            pairing_ok = False
    if j_t < 1.0:
        sup_phase = max(float(np.max(dev_pos)), float(np.max(dev_mom)))
        pairing_ok &= sup_phase <= float(n) ** (-cfg.delta) + 1e-12

    bound = support_bound(cfg)
    lat = LatticeSpec.for_n(n, bound, cfg.n_lat)
    pts = lat.points()
    fs0 = _field_sup_diff_initial(reference, micro, pts)
    fsT = _field_sup_diff(reference.evaluator, micro.evaluator, cfg.t_final, pts)

    drift = float("nan")
    if cfg.energy_enable:
        grid = GridSpec(half_width=bound + chi_n.radius, n_per_axis=cfg.energy_grid)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            e_end = abraham.energy(micro, grid)
        drift = abs(e_end.total - _initial_energy(micro, grid)) / max(e_end.total, 1e-12)

    probe_pts = pts[:: max(1, pts.shape[0] // 2048)]
    row = {
        "n": int(n), "seed": int(seed), "r_n": chi_n.r_n, "gamma": cfg.gamma,
        "delta": cfg.delta, "t_final": cfg.t_final, "dt": cfg.dt,
        "m_ref": cfg.m_reference,
        "sup_dev_pos": float(np.max(dev_pos)),
        "sup_dev_mom": float(np.max(dev_mom)),
        "j_t": j_t,
        "w1_mid": w1_mid, "w2_mid": w2_mid,
        "w1_final": w1_fin, "w2_final": w2_fin,
        "field_sup_0": fs0, "field_sup_final": fsT,
        "energy_drift": drift,
        "r_max": float(np.max(np.linalg.norm(micro_rec.xi, axis=-1))),
        "rho_max": _rho_tilde_max(micro, probe_pts),
        "pairing_bound_ok": bool(pairing_ok),
        "config_hash": cfg.config_hash(),
    }
    if row["r_max"] >= cfg.momentum_bound:
        warnings.warn(
            f"momentum support {row['r_max']:.2f} reached the configured bound; "
            "run lies outside the monitored regime", RuntimeWarning,
        )
    return PairedResult(n=int(n), seed=int(seed), row=row,
                        micro_record=micro_rec if keep_records else None,
                        tracer_record=tracer_rec if keep_records else None)


def _initial_energy(micro: MicroState, grid: GridSpec):
    from .kinematics import gamma_factor

    kin0 = float(np.sum(micro.weights * gamma_factor(micro.hist.xi[0])))
    pts = grid.points()
    e0 = micro.evaluator.init_single.initial_field(pts)
    dens = 0.5 * np.sum(e0 * e0, axis=-1)
    return kin0 + float(np.sum(dens) * grid.cell_volume)


def _field_sup_diff_initial(reference: ReferenceEnsemble, micro: MicroState, points):
    ea = reference.evaluator.init_single.initial_field(points)
    eb = micro.evaluator.init_single.initial_field(points)
    return float(np.max(np.linalg.norm(ea - eb, axis=-1)))


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    rows: list
    summary: dict

    def medians(self, column):
        by_n = {}
        for row in self.rows:
            by_n.setdefault(row["n"], []).append(row[column])
        ns = sorted(by_n)
        return ns, [float(np.median(by_n[n])) for n in ns]


def sweep(cfg: ExperimentConfig, csv_path=None, progress=None) -> SweepResult:
    """Full N x seed sweep; persists partial CSV rows as they complete."""
    cfg.validate()
    f0 = cfg.f0()
    chi = make_standard_profile()
    rows = []
    writer = _SweepWriter(csv_path) if csv_path else None
    try:
        for n in cfg.n_values:
            chi_n = rescale(chi, int(n), cfg.gamma, strict=cfg.strict)
            t_pad = cfg.t_final + 2 * cfg.dt
            reference = build_reference(
                f0, cfg.m_reference, chi_n, seed=cfg.ref_seed,
                antithetic=cfg.antithetic, field_mode=cfg.field_mode, t_max=t_pad,
            )
            evolve_reference(reference, cfg.dt, cfg.t_final)
            for k in range(cfg.n_seeds):
                seed = cfg.base_seed + k
                res = run_paired(cfg, n, seed, reference=reference, keep_records=False)
                rows.append(res.row)
                if writer:
                    writer.write(res.row)
                if progress:
                    progress(res.row)
    finally:
        if writer:
            writer.close()

    summary = {"schema": SWEEP_SCHEMA, "config_hash": cfg.config_hash()}
    by_n = {}
    for row in rows:
        by_n.setdefault(row["n"], []).append(row)
    ns = sorted(by_n)
    for col in ("j_t", "sup_dev_pos", "sup_dev_mom", "field_sup_final", "w2_final"):
        med = [float(np.median([r[col] for r in by_n[n]])) for n in ns]
        summary[f"median_{col}"] = dict(zip(map(str, ns), med))
        if len(ns) >= 2 and all(v > 0 for v in med):
            summary[f"slope_{col}"] = loglog_slope(ns, med)
    return SweepResult(rows=rows, summary=summary)


class _SweepWriter:
    def __init__(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.fh = open(path, "w")
        self.fh.write(f"# schema={SWEEP_SCHEMA}\n")
        self.fh.write(",".join(SWEEP_COLUMNS) + "\n")

    def write(self, row):
        vals = []
        for col in SWEEP_COLUMNS:
            v = row[col]
            if isinstance(v, bool):
                vals.append("1" if v else "0")
            elif isinstance(v, float):
                vals.append(f"{v:.10g}")
            else:
                vals.append(str(v))
        self.fh.write(",".join(vals) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def read_sweep_csv(path):
    with open(path) as fh:
        header = fh.readline().strip()
        if header != f"# schema={SWEEP_SCHEMA}":
            raise ValueError(f"unexpected schema header: {header}")
        cols = fh.readline().strip().split(",")
        rows = []
        for line in fh:
            if not line.strip():
                continue
            parts = line.strip().split(",")
            row = {}
            for c, v in zip(cols, parts):
                if c in ("n", "seed", "m_ref"):
                    row[c] = int(v)
                elif c in ("config_hash",):
                    row[c] = v
                elif c == "pairing_bound_ok":
                    row[c] = v == "1"
                else:
                    row[c] = float(v)
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# law-of-large-numbers probe


def lln_probe(reference: ReferenceEnsemble, flow_or_z, t, points):
    """Gap between the velocity-term field sampled from N flow atoms and the
    reference-ensemble estimate, at the given points.

    Returns per-point gaps |E1[atoms] - E1[reference]| and their max.
    """
    from .retarded import EnsembleHistory

    if isinstance(flow_or_z, FlowRecord):
        rec = flow_or_z
        hist = EnsembleHistory(rec.x[0], rec.xi[0])
        dt = rec.times[1] - rec.times[0] if len(rec.times) > 1 else 1.0
        for k in range(1, rec.x.shape[0]):
            hist.append(k * dt, rec.x[k], rec.xi[k], np.zeros_like(rec.x[k]))
    else:
        hist = flow_or_z.hist if hasattr(flow_or_z, "hist") else flow_or_z
    n = hist.n_particles
    ev_atoms = FieldEvaluator(
        hist, np.full(n, 1.0 / n), reference.state.chi, mode="table",
        t_max=reference.t + 1e-9,
        init_field=reference.evaluator.init_single,
        init_field_double=reference.evaluator.init_double,
    )
    e1a, _, _, _ = ev_atoms._retarded_frozen(
        t, points, reference.state.chi, "table", "single", None, None, None, None)
    e1r, _, _, _ = reference.evaluator._retarded_frozen(
        t, points, reference.state.chi, "table", "single", None, None, None, None)
    gaps = np.linalg.norm(e1a - e1r, axis=-1)
    return {"gaps": gaps, "max": float(np.max(gaps)), "n_points": points.shape[0]}


# ---------------------------------------------------------------------------
# snapshots

SNAPSHOT_MAGIC = b"VLXSNAP1"


def write_snapshot(path, x, xi, force, meta, fmt="binary"):
    """Persist per-particle arrays with a versioned header.

    Binary layout: 8-byte magic, uint32 little-endian header length, UTF-8
    JSON header, then float64 little-endian arrays x, xi, force of shape
    (n, 3) in that order.  The JSON variant stores the same content inline.
    """
    x = np.asarray(x, dtype="<f8")
    xi = np.asarray(xi, dtype="<f8")
    force = np.asarray(force, dtype="<f8")
    header = dict(meta)
    header["n"] = int(x.shape[0])
    header["format"] = SNAPSHOT_MAGIC.decode()
    if fmt == "json":
        payload = {
            "header": header,
            "x": x.tolist(), "xi": xi.tolist(), "force": force.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)
        return
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in (x, xi, force):
            fh.write(arr.tobytes())


def read_snapshot(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic == SNAPSHOT_MAGIC:
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode())
            n = header["n"]
            arrs = []
            for _ in range(3):
                arrs.append(np.frombuffer(fh.read(n * 3 * 8), dtype="<f8").reshape(n, 3).copy())
            return {"header": header, "x": arrs[0], "xi": arrs[1], "force": arrs[2]}
    with open(path) as fh:
        payload = json.load(fh)
    return {
        "header": payload["header"],
        "x": np.asarray(payload["x"]),
        "xi": np.asarray(payload["xi"]),
        "force": np.asarray(payload["force"]),
    }


def snapshot_state(path, state: MicroState, meta=None, fmt="binary", role="micro"):
    base = {"r_n": state.chi.r_n, "dt": state.dt or 0.0, "t": state.t, "role": role}
    if meta:
        base.update(meta)
    write_snapshot(path, state.x, state.xi, state.hist.force[-1], base, fmt=fmt)
