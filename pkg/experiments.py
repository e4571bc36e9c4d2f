#!/usr/bin/env python3
"""
experiments.py - Desk-scale studies of Hessian-informed training

Scripted runs on the analytic oracles: Hessian-label data efficiency, loss
and pre-training ablation, curriculum schedule study, double-well curvature
recovery, free-energy accuracy, energy-ranked subsets for transition-state
search, and SSCHA stabilization with an isotope series. Every study takes an
ExperimentSpec, runs its (cell, seed) grid in parallel and writes CSV, JSON
and a markdown summary.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml
from scipy import stats
from tqdm import tqdm

from config import ConfigError, build_section
from fileio import save_table, write_json
from hessian_loss import ProjectionConfig
from oracles import (
    FidelityPerturbation, ReferencePotential, double_well_scan, generate_dataset, low_fidelity_of,
    make_potential, reference_structure,
)
from potential import DescriptorConfig, ModelSurface, NeuralPotential
from sampling import RankMode, energy_rank_subset, restrict_hessian_labels
from sscha import SschaConfig, anharmonic_frequencies, harmonic_start, sscha_minimize
from structures import Dataset, Surface
from thermo import ThermoError, harmonic_frequencies, structure_thermochemistry
from trainer import CurriculumSchedule, Phase, TrainConfig, evaluate, train_phase
from ts_search import TsConfig, ts_workflow

EXPERIMENT_KINDS = (
    "data_efficiency", "ablation", "curriculum", "double_well", "free_energy",
    "energy_subset_ts", "sscha_stabilization",
)

CHEMICAL_ACCURACY = 0.043  # eV


@dataclass
class ExperimentSpec:
    """Everything one study needs; loaded strictly from YAML."""
    name: str = "experiment"
    kind: str = "data_efficiency"
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    threads: int = 1
    out_dir: str = "output/experiments"
    potential: Dict[str, Any] = field(default_factory=lambda: {
        "kind": "double_well_chain", "params": {"embedding": "hosted", "n_sites": 1}})
    low_fidelity: Dict[str, Any] = field(default_factory=dict)
    etas: List[float] = field(default_factory=lambda: [-0.7, -0.35, 0.0, 0.35, 0.7])
    sigma: float = 0.12
    n_pretrain: int = 200
    n_finetune: int = 100
    n_valid: int = 20
    n_test: int = 50
    hessian_fractions: List[float] = field(default_factory=lambda: [1.0, 0.1, 0.01])
    curriculum_fraction: float = 0.01
    pretrain_epochs: int = 30
    finetune_epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 3e-3
    projection_m: int = 5
    w_E: float = 4.0
    w_F: float = 100.0
    w_H: float = 0.1
    layer_widths: List[int] = field(default_factory=lambda: [16, 16])
    cutoff: float = 4.0
    n_basis: int = 8
    scan_grid: List[float] = field(default_factory=lambda: [-1.2, 1.2, 121])
    energy_fraction: float = 0.5
    subset_hessian_fraction: float = 0.1
    match_tol: float = 0.05
    temperature: float = 298.15
    sscha_potential: Dict[str, Any] = field(default_factory=lambda: {
        "kind": "double_well_chain", "params": {"embedding": "onsite", "n_sites": 2, "c": 0.1}})
    isotope_masses: List[float] = field(default_factory=lambda: [1.008, 2.014, 3.016])
    ensemble_size: int = 500
    max_populations: int = 30
    alpha_phi: float = 0.3
    sscha_gradient_tol: float = 0.01


def validate_spec(spec: ExperimentSpec) -> ExperimentSpec:
    if spec.kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"Unknown experiment kind '{spec.kind}'; choose from {list(EXPERIMENT_KINDS)}")
    if not spec.seeds:
        raise ConfigError("experiment needs at least one seed")
    if any(not 0 < f <= 1 for f in spec.hessian_fractions + [spec.curriculum_fraction,
                                                            spec.energy_fraction,
                                                            spec.subset_hessian_fraction]):
        raise ConfigError("fractions must lie in (0, 1]")
    if len(spec.seeds) < 3:
        logging.warning(f"Experiment '{spec.name}' uses {len(spec.seeds)} seeds; trends need >= 3")
    return spec


def load_experiment_spec(path: str) -> ExperimentSpec:
    if not os.path.exists(path):
        raise ConfigError(f"Experiment spec not found: {path}")
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    return validate_spec(build_section(ExperimentSpec, data))


# Shared set-up

@dataclass
class ToySetup:
    potential: ReferencePotential
    low_fidelity: ReferencePotential
    species: Tuple[str, ...]


@dataclass
class SeedData:
    low: Dataset
    high: Dataset
    valid: Dataset
    test: Dataset


def toy_setup(spec: ExperimentSpec) -> ToySetup:
    pot = make_potential(spec.potential.get("kind", "double_well_chain"), spec.potential.get("params", {}))
    low = low_fidelity_of(pot, FidelityPerturbation(**spec.low_fidelity))
    ref = reference_structure(pot)
    species = tuple(dict.fromkeys(ref.species))
    return ToySetup(pot, low, species)


def path_dataset(pot: ReferencePotential, n: int, spec: ExperimentSpec, rng: np.random.Generator) -> Dataset:
    """Samples spread over the displacement values in spec.etas."""
    dataset = Dataset((), {})
    for chunk, eta in zip(np.array_split(np.arange(n), len(spec.etas)), spec.etas):
        if chunk.size:
            dataset = dataset.concat(generate_dataset(pot, chunk.size, spec.sigma, rng, 1.0, eta,
                                                      tag=f"eta={eta:+.3f}"))
    return dataset


def seed_data(setup: ToySetup, spec: ExperimentSpec, seed: int) -> SeedData:
    rng = np.random.default_rng([seed, 1])
    low = path_dataset(setup.low_fidelity, spec.n_pretrain, spec, rng)
    high = path_dataset(setup.potential, spec.n_finetune, spec, rng)
    valid = path_dataset(setup.potential, spec.n_valid, spec, np.random.default_rng([seed, 2]))
    test = path_dataset(setup.potential, spec.n_test, spec, np.random.default_rng([10007]))
    return SeedData(low, high, valid, test)


def train_model(spec: ExperimentSpec, setup: ToySetup, data: SeedData, seed: int,
                hessian_fraction: float = 1.0, mode: str = "rademacher", pretrain: bool = True,
                schedule: str = "linear", use_hessian: bool = True,
                finetune: Optional[Dataset] = None):
    """
    Pre-train (optional) and fine-tune one model.

    Returns:
        Tuple of (surface, fine-tuning history, Hessian labels used)
    """
    model = NeuralPotential(DescriptorConfig(spec.cutoff, spec.n_basis), setup.species, tuple(spec.layer_widths))
    projection = ProjectionConfig(mode, spec.projection_m)
    params = None
    if pretrain:
        pre_cfg = TrainConfig(CurriculumSchedule(spec.w_E, spec.w_F, spec.w_H, spec.w_H, mode="fixed"),
                              projection, spec.learning_rate, batch_size=spec.batch_size,
                              epochs=spec.pretrain_epochs, seed=seed)
        params, _ = train_phase(model, data.low, pre_cfg, Phase.PRETRAIN, progress=False)

    high = data.high if finetune is None else finetune
    if use_hessian:
        high = restrict_hessian_labels(high, hessian_fraction, np.random.default_rng([seed, 11]))
    else:
        high = Dataset(tuple(s.without_hessian() for s in high), high.provenance)
    w_H = spec.w_H if use_hessian else 0.0
    w_0 = 0.0 if schedule == "linear" else w_H
    ft_cfg = TrainConfig(CurriculumSchedule(spec.w_E, spec.w_F, w_0, w_H, mode=schedule), projection,
                         spec.learning_rate, batch_size=spec.batch_size, epochs=spec.finetune_epochs, seed=seed)
    params, history = train_phase(model, high, ft_cfg, Phase.FINETUNE, init_params=params,
                                  validation=data.valid, progress=False)
    return ModelSurface(model, params), history, high.n_hessian


def parallel_map(fn: Callable, items: Sequence, threads: int, desc: str) -> List:
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(tqdm(pool.map(fn, items), total=len(items), desc=desc))


def aggregate(table: pd.DataFrame, by: List[str], metrics: List[str]) -> pd.DataFrame:
    """Mean and standard deviation over seeds."""
    grouped = table.groupby(by, sort=False)[metrics].agg(["mean", "std"])
    grouped.columns = [f"{m}_{stat}" for m, stat in grouped.columns]
    return grouped.reset_index()


def write_outputs(spec: ExperimentSpec, table: pd.DataFrame, summary: pd.DataFrame,
                  extra: Optional[Dict[str, Any]] = None) -> Dict[str, str]:
    """Write <name>.csv/.json, <name>_summary.csv/.json and <name>.md."""
    os.makedirs(spec.out_dir, exist_ok=True)
    prefix = os.path.join(spec.out_dir, spec.name)
    csv_path, json_path = save_table(table, prefix)
    save_table(summary, f"{prefix}_summary")
    meta = {"name": spec.name, "kind": spec.kind, "seeds": spec.seeds, "spec": asdict(spec)}
    meta.update(extra or {})
    write_json(f"{prefix}_meta.json", meta)

    md_path = f"{prefix}.md"
    with open(md_path, "w", encoding="utf-8") as f:
        f.write(f"# {spec.name} ({spec.kind})\n\n")
        f.write(f"Seeds: {', '.join(str(s) for s in spec.seeds)}\n\n")
        f.write("## Summary (mean and std over seeds)\n\n```\n")
        f.write(summary.to_string(index=False))
        f.write("\n```\n")
        for key, value in (extra or {}).items():
            f.write(f"\n- {key}: {value}\n")
    logging.info(f"Experiment '{spec.name}' written to {md_path}")
    return {"csv": csv_path, "json": json_path, "markdown": md_path}


def _metrics_row(surface: Surface, test: Dataset) -> Dict[str, float]:
    m = evaluate(surface, test)
    return {k: m[k] for k in ("energy_mae", "force_mae", "hessian_mae", "eigenvalue_mae")}


METRICS = ["energy_mae", "force_mae", "hessian_mae", "eigenvalue_mae"]


# Studies

def run_data_efficiency(spec: ExperimentSpec) -> Tuple[pd.DataFrame, pd.DataFrame, Dict[str, Any]]:
    """Hessian-label fraction vs test MAEs; fraction 1.0 is the full-label baseline."""
    setup = toy_setup(spec)
    data = {seed: seed_data(setup, spec, seed) for seed in spec.seeds}
    fractions = sorted(set(spec.hessian_fractions) | {1.0}, reverse=True)
    cells = [(f, seed) for f in fractions for seed in spec.seeds]

    def work(cell):
        fraction, seed = cell
        surface, _, n_hessian = train_model(spec, setup, data[seed], seed, hessian_fraction=fraction)
        row = {"fraction": fraction, "seed": seed, "n_hessian": n_hessian, "baseline": fraction == 1.0}
        row.update(_metrics_row(surface, data[seed].test))
        return row

    table = pd.DataFrame(parallel_map(work, cells, spec.threads, "Data efficiency"))
    summary = aggregate(table, ["fraction"], ["n_hessian"] + METRICS)
    rho, p_value = stats.spearmanr(table["n_hessian"], table["hessian_mae"])
    base = summary.loc[summary["fraction"] == 1.0].iloc[0]
    extra = {
        "spearman_n_hessian_vs_hessian_mae": float(rho),
        "spearman_p_value": float(p_value),
        "hessian_mae_ratio_to_baseline": {
            float(r["fraction"]): float(r["hessian_mae_mean"] / base["hessian_mae_mean"])
            for _, r in summary.iterrows()},
        "energy_mae_spread": float(summary["energy_mae_mean"].max() / summary["energy_mae_mean"].min() - 1.0),
        "force_mae_spread": float(summary["force_mae_mean"].max() / summary["force_mae_mean"].min() - 1.0),
    }
    return table, summary, extra


def run_ablation(spec: ExperimentSpec) -> Tuple[pd.DataFrame, pd.DataFrame, Dict[str, Any]]:
    """{Rademacher, coordinate column} × {pre-trained, from scratch} at equal step budget."""
    setup = toy_setup(spec)
    data = {seed: seed_data(setup, spec, seed) for seed in spec.seeds}
    cells = [(mode, pretrain, seed) for mode in ("rademacher", "coordinate_column")
             for pretrain in (True, False) for seed in spec.seeds]

    def work(cell):
        mode, pretrain, seed = cell
        surface, _, _ = train_model(spec, setup, data[seed], seed, hessian_fraction=1.0,
                                    mode=mode, pretrain=pretrain)
        row = {"loss": mode, "pretrain": pretrain, "seed": seed}
        row.update(_metrics_row(surface, data[seed].test))
        return row

    table = pd.DataFrame(parallel_map(work, cells, spec.threads, "Ablation"))
    summary = aggregate(table, ["loss", "pretrain"], METRICS)
    best = summary.loc[summary["hessian_mae_mean"].idxmin()]
    extra = {"best_cell": f"{best['loss']}, pretrain={bool(best['pretrain'])}"}
    return table, summary, extra


def is_u_shaped(curve: Sequence[float]) -> bool:
    """Minimum strictly before the final epoch and strictly below the final value."""
    curve = np.asarray(curve, dtype=float)
    curve = curve[np.isfinite(curve)]
    if curve.size < 3:
        return False
    k = int(np.argmin(curve))
    return k < curve.size - 1 and curve[k] < curve[-1]


def run_curriculum_study(spec: ExperimentSpec) -> Tuple[pd.DataFrame, pd.DataFrame, Dict[str, Any]]:
    """Fixed Hessian weight vs linear ramp on the sparse-Hessian fine-tuning task."""
    setup = toy_setup(spec)
    data = {seed: seed_data(setup, spec, seed) for seed in spec.seeds}
    cells = [(schedule, seed) for schedule in ("fixed", "linear") for seed in spec.seeds]
    curves: Dict[str, List[float]] = {}

    def work(cell):
        schedule, seed = cell
        surface, history, n_hessian = train_model(spec, setup, data[seed], seed,
                                                  hessian_fraction=spec.curriculum_fraction,
                                                  schedule=schedule)
        curve = history.to_frame()["val_hessian_mae"].tolist()
        curves[f"{schedule}/{seed}"] = curve
        row = {"schedule": schedule, "seed": seed, "n_hessian": n_hessian,
               "final_val_hessian_mae": curve[-1], "min_val_hessian_mae": float(np.nanmin(curve)),
               "u_shaped": is_u_shaped(curve)}
        row.update(_metrics_row(surface, data[seed].test))
        return row

    table = pd.DataFrame(parallel_map(work, cells, spec.threads, "Curriculum"))
    summary = aggregate(table, ["schedule"], ["final_val_hessian_mae", "min_val_hessian_mae"] + METRICS)
    u_fraction = table.groupby("schedule")["u_shaped"].mean().to_dict()
    return table, summary, {"u_shaped_fraction": u_fraction, "val_hessian_curves": curves}


def run_double_well_recovery(spec: ExperimentSpec) -> Tuple[pd.DataFrame, pd.DataFrame, Dict[str, Any]]:
    """EF-only vs EFH models trained near the symmetric point, scanned along the well coordinate."""
    setup = toy_setup(spec)
    near = ExperimentSpec(**dict(asdict(spec), etas=[0.0]))
    data = {seed: seed_data(setup, near, seed) for seed in spec.seeds}
    lo, hi, n = spec.scan_grid
    grid = np.linspace(lo, hi, int(n))
    reference = reference_structure(setup.potential)
    moving = setup.potential.guest_indices
    oracle = double_well_scan(setup.potential, grid)
    oracle_minima = oracle.minima_positions

    def minima_error(found: np.ndarray) -> float:
        if found.size != oracle_minima.size:
            return float("nan")
        return float(np.max(np.abs(np.sort(found) - np.sort(oracle_minima))))

    cells = [(labels, seed) for labels in ("EF", "EFH") for seed in spec.seeds]

    def work(cell):
        labels, seed = cell
        surface, _, _ = train_model(spec, setup, data[seed], seed, use_hessian=labels == "EFH")
        scan = double_well_scan(surface, grid, reference, moving)
        return {"labels": labels, "seed": seed, "n_minima": scan.n_minima,
                "double_well": scan.is_double_well,
                "minima": scan.minima_positions.tolist(),
                "minima_error": minima_error(scan.minima_positions)}

    table = pd.DataFrame(parallel_map(work, cells, spec.threads, "Double well"))
    summary = table.groupby("labels").agg(double_well_fraction=("double_well", "mean"),
                                          minima_error_mean=("minima_error", "mean")).reset_index()
    extra = {"oracle_minima": oracle_minima.tolist(), "oracle_double_well": oracle.is_double_well}
    return table, summary, extra


def oracle_reaction(setup: ToySetup, cfg: Optional[TsConfig] = None):
    """Reactant, product and the oracle TS report for the symmetric double-well reaction."""
    eta = 1.0 / np.sqrt(2.0)
    reactant = reference_structure(setup.potential, -eta)
    product = reference_structure(setup.potential, eta)
    report = ts_workflow(setup.potential.surface, reactant, product, cfg)
    return reactant, product, report


def gibbs_mae(model: Surface, oracle: Surface, structures: Sequence, temperature: float,
              drop_imaginary: bool = False) -> float:
    """Mean |G_model − G_oracle| at fixed (oracle) geometries; NaN entries are skipped."""
    errors = []
    for s in structures:
        try:
            g_model = structure_thermochemistry(model, s, temperature, drop_imaginary=drop_imaginary).gibbs
            g_ref = structure_thermochemistry(oracle, s, temperature, drop_imaginary=drop_imaginary).gibbs
        except ThermoError as e:
            logging.warning(f"Free energy skipped: {e}")
            continue
        errors.append(abs(g_model - g_ref))
    return float(np.mean(errors)) if errors else float("nan")


def run_free_energy_eval(spec: ExperimentSpec) -> Tuple[pd.DataFrame, pd.DataFrame, Dict[str, Any]]:
    """Gibbs free-energy MAE of EF and EFH models at oracle minima and transition state."""
    setup = toy_setup(spec)
    _, _, report = oracle_reaction(setup, TsConfig())
    if not report.success:
        raise RuntimeError(f"oracle TS workflow failed: {report.status.value} ({report.message})")
    minima = list(report.irc_endpoints)
    ts = [report.saddle]
    oracle = setup.potential.surface
    data = {seed: seed_data(setup, spec, seed) for seed in spec.seeds}
    cells = [(labels, seed) for labels in ("EF", "EFH") for seed in spec.seeds]

    def work(cell):
        labels, seed = cell
        surface, _, _ = train_model(spec, setup, data[seed], seed, use_hessian=labels == "EFH")
        return {"labels": labels, "seed": seed,
                "gibbs_mae_minima": gibbs_mae(surface, oracle, minima, spec.temperature),
                "gibbs_mae_ts": gibbs_mae(surface, oracle, ts, spec.temperature, drop_imaginary=True)}

    table = pd.DataFrame(parallel_map(work, cells, spec.threads, "Free energy"))
    summary = aggregate(table, ["labels"], ["gibbs_mae_minima", "gibbs_mae_ts"])
    extra = {"chemical_accuracy_eV": CHEMICAL_ACCURACY}
    return table, summary, extra


def run_energy_subset_ts(spec: ExperimentSpec) -> Tuple[pd.DataFrame, pd.DataFrame, Dict[str, Any]]:
    """
    TS search on models fine-tuned on the high- or low-energy part of the data.

    EF cells drop all Hessians; EFH cells keep them on subset_hessian_fraction
    of the subset.
    """
    setup = toy_setup(spec)
    reactant, product, oracle_report = oracle_reaction(setup, TsConfig())
    oracle_barrier = oracle_report.barrier_forward
    ts_cfg = TsConfig(match_tol=spec.match_tol)
    data = {seed: seed_data(setup, spec, seed) for seed in spec.seeds}
    cells = [(mode, labels, seed) for mode in (RankMode.TOP_HIGH, RankMode.BOTTOM_LOW)
             for labels in ("EF", "EFH") for seed in spec.seeds]

    def work(cell):
        mode, labels, seed = cell
        high = data[seed].high
        subset = high.subset(energy_rank_subset(high, spec.energy_fraction, mode), note=mode.value)
        surface, _, n_hessian = train_model(spec, setup, data[seed], seed,
                                            hessian_fraction=spec.subset_hessian_fraction,
                                            use_hessian=labels == "EFH", finetune=subset)
        report = ts_workflow(surface, reactant, product, ts_cfg)
        barrier_error = (abs(report.barrier_forward - oracle_barrier)
                         if report.barrier_forward is not None and oracle_barrier is not None else float("nan"))
        return {"subset": mode.value, "labels": labels, "seed": seed, "n_hessian": n_hessian,
                "status": report.status.value, "success": report.success,
                "barrier_error": barrier_error}

    table = pd.DataFrame(parallel_map(work, cells, spec.threads, "Energy-subset TS"))
    summary = table.groupby(["subset", "labels"], sort=False).agg(
        success_rate=("success", "mean"),
        barrier_error_mean=("barrier_error", "mean"),
        barrier_error_std=("barrier_error", "std")).reset_index()
    extra = {"oracle_status": oracle_report.status.value, "oracle_barrier_eV": oracle_barrier}
    return table, summary, extra


def run_sscha_stabilization(spec: ExperimentSpec) -> Tuple[pd.DataFrame, pd.DataFrame, Dict[str, Any]]:
    """Harmonic vs SSCHA frequencies at the symmetric centroid across an isotope series."""
    pot = make_potential(spec.sscha_potential.get("kind", "double_well_chain"),
                         spec.sscha_potential.get("params", {}))
    evaluator = pot.surface
    base = reference_structure(pot)
    cells = [(mass, seed) for mass in spec.isotope_masses for seed in spec.seeds]

    def work(cell):
        mass, seed = cell
        masses = np.array(base.masses)
        masses[pot.guest_indices] = mass
        centroid = base.with_masses(masses)
        harmonic = harmonic_frequencies(evaluator.hessian(centroid), masses)
        start = harmonic_start(evaluator, centroid)
        cfg = SschaConfig(ensemble_size=spec.ensemble_size, max_populations=spec.max_populations,
                          alpha_phi=spec.alpha_phi, gradient_tol=spec.sscha_gradient_tol,
                          relax_centroid=False, seed=seed)
        result = sscha_minimize(evaluator, start.phi, centroid, cfg, progress=False)
        anharmonic = anharmonic_frequencies(result.trial)
        return {"guest_mass": mass, "seed": seed,
                "harmonic_min_cm": float(harmonic.wavenumbers.min()),
                "harmonic_n_imaginary": harmonic.n_imaginary,
                "sscha_min_cm": float(anharmonic.wavenumbers.min()),
                "sscha_n_imaginary": anharmonic.n_imaginary,
                "converged": result.converged,
                "free_energy": result.free_energy,
                "n_evaluations": result.n_evaluations}

    table = pd.DataFrame(parallel_map(work, cells, spec.threads, "SSCHA"))
    summary = aggregate(table, ["guest_mass"], ["harmonic_min_cm", "sscha_min_cm", "free_energy",
                                                "n_evaluations"])
    return table, summary, {"all_real_after_sscha": bool((table["sscha_n_imaginary"] == 0).all())}


RUNNERS: Dict[str, Callable] = {
    "data_efficiency": run_data_efficiency,
    "ablation": run_ablation,
    "curriculum": run_curriculum_study,
    "double_well": run_double_well_recovery,
    "free_energy": run_free_energy_eval,
    "energy_subset_ts": run_energy_subset_ts,
    "sscha_stabilization": run_sscha_stabilization,
}


def run_experiment(spec: ExperimentSpec, write: bool = True):
    """Run one study and (optionally) write its outputs."""
    validate_spec(spec)
    logging.info(f"Running experiment '{spec.name}' ({spec.kind}) over seeds {spec.seeds}")
    table, summary, extra = RUNNERS[spec.kind](spec)
    paths = write_outputs(spec, table, summary, extra) if write else {}
    return table, summary, extra, paths
