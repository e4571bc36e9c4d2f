#!/usr/bin/env python3
"""
main.py - Main entry point for the HINT training and analysis CLI

Generates multi-fidelity data on analytic oracles, trains descriptor-MLP
potentials with Hessian-informed fine-tuning, and runs the downstream
analyses: transition-state search, RRHO thermochemistry, SSCHA and
Allen-Dynes Tc.

Exit codes: 0 success, 1 domain error, 2 usage or configuration error.
"""

import sys
import argparse
import json
import logging
import os
from typing import List, Optional

from config import ConfigError, configure_threads, load_config, setup_logging


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Hessian-informed MLIP training and analysis tool",
        epilog="Example usage: python main.py --seed 0 gen-data --fidelity high"
    )
    parser.add_argument('--config', help='YAML configuration file (defaults if omitted)')
    parser.add_argument('--seed', type=int, help='Global seed (overrides the configuration)')
    parser.add_argument('--threads', type=int, help='Thread cap for XLA, BLAS and worker pools')
    parser.add_argument('--out', help='Output directory (overrides paths.out_dir)')

    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    gen = subparsers.add_parser('gen-data', help='Generate labeled samples on the configured oracle')
    gen.add_argument('--fidelity', choices=['high', 'low'], default='high',
                     help='Oracle fidelity (default: high)')
    gen.add_argument('--n', type=int, help='Number of samples (default: data.n_samples / data.n_low_fidelity)')
    gen.add_argument('--hessian-fraction', type=float, help='Share of samples keeping Hessian labels')
    gen.add_argument('--eta', type=float, help='Double-well displacement of the reference geometry')
    gen.add_argument('--hessian-format', choices=['text', 'npy'], default='text',
                     help='Hessian sidecar format (default: text)')
    gen.add_argument('--output', help='Output structure file (default: <out>/data_<fidelity>.xyz)')

    sample = subparsers.add_parser('sample', help='Select configurations from a dataset')
    sample.add_argument('--data', required=True, help='Structure file or dataset manifest')
    sample.add_argument('--strategy', choices=['wld', 'top_high', 'bottom_low'],
                        help='Selection strategy (default: sampling.strategy)')
    sample.add_argument('--n-select', type=int, help='Configurations to draw (wld)')
    sample.add_argument('--fraction', type=float, help='Energy-rank fraction (top_high / bottom_low)')
    sample.add_argument('--model', help='Checkpoint whose descriptor embeds the structures')
    sample.add_argument('--output', help='Selection JSON (default: <out>/selection.json)')
    sample.add_argument('--write-subset', help='Also write the selected samples to this structure file')

    for name, help_text in (('pretrain', 'Pre-train on low-fidelity energies, forces and Hessians'),
                            ('finetune', 'Fine-tune on high-fidelity data with the Hessian curriculum')):
        p = subparsers.add_parser(name, help=help_text)
        p.add_argument('--data', required=True, help='Structure file or dataset manifest')
        p.add_argument('--validation', help='Explicit validation structure file')
        p.add_argument('--output', help=f'Checkpoint path (default: <out>/{name}.ckpt)')
        if name == 'finetune':
            p.add_argument('--init', help='Pre-trained checkpoint to start from')
            p.add_argument('--hessian-fraction', type=float,
                           help='Keep Hessian labels on this share of the fine-tuning samples')

    ev = subparsers.add_parser('eval', help='Energy, force and Hessian MAEs of a model on a dataset')
    ev.add_argument('--model', required=True, help='Model checkpoint')
    ev.add_argument('--data', required=True, help='Structure file or dataset manifest')
    ev.add_argument('--output', help='Metrics JSON (default: <out>/metrics.json)')

    ts = subparsers.add_parser('ts-search', help='Transition-state search over a reactions manifest')
    ts.add_argument('--reactions', required=True, help='Reactions manifest (YAML)')
    ts.add_argument('--model', help='Model checkpoint (default: the configured oracle)')

    thermo = subparsers.add_parser('thermo', help='RRHO thermochemistry of one structure')
    thermo.add_argument('--structure', required=True, help='Structure file')
    thermo.add_argument('--index', type=int, default=0, help='Frame index (default: 0)')
    thermo.add_argument('--model', help='Model checkpoint (default: the configured oracle)')
    thermo.add_argument('--temperature', type=float, help='Temperature in K (default: thermo.temperature)')
    thermo.add_argument('--drop-imaginary', action='store_true',
                        help='Drop imaginary modes (transition states)')
    thermo.add_argument('--output', help='Result JSON (default: <out>/thermo.json)')

    sscha = subparsers.add_parser('sscha', help='SSCHA free-energy minimization')
    sscha.add_argument('--structure', required=True, help='Starting centroid structure file')
    sscha.add_argument('--model', help='Model checkpoint (default: the configured oracle)')
    sscha.add_argument('--phi0', help='Starting force constants (JSON, .npy or text)')

    tc = subparsers.add_parser('tc', help='Allen-Dynes Tc from an α²F(ω) file')
    tc.add_argument('--a2f', required=True, help='Two-column α²F file (ω in meV)')
    tc.add_argument('--mu-star', help='Comma-separated μ* values (default: superconduct.mu_star)')
    tc.add_argument('--out', dest='table', help='Table JSON (default: <out>/tc.json)')

    exp = subparsers.add_parser('experiments', help='Scripted studies on the analytic oracles')
    exp_sub = exp.add_subparsers(dest='experiments_command')
    run = exp_sub.add_parser('run', help='Run one experiment spec')
    run.add_argument('spec', help='Experiment spec YAML')

    return parser


def _surface(args, cfg):
    """Trained model from --model, else the configured oracle."""
    from config import build_potential
    if getattr(args, 'model', None):
        from potential import ModelSurface, load_checkpoint
        model, params = load_checkpoint(args.model)
        return ModelSurface(model, params)
    return build_potential(cfg).surface


def _out_path(cfg, path: Optional[str], default: str) -> str:
    path = path or os.path.join(cfg.paths.out_dir, default)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    return path


def cmd_gen_data(args, cfg):
    import numpy as np
    from config import build_low_fidelity, build_potential
    from fileio import write_xyz
    from oracles import generate_dataset

    low = args.fidelity == 'low'
    pot = build_low_fidelity(cfg) if low else build_potential(cfg)
    n = args.n if args.n is not None else (cfg.data.n_low_fidelity if low else cfg.data.n_samples)
    fraction = cfg.data.hessian_fraction if args.hessian_fraction is None else args.hessian_fraction
    eta = cfg.data.eta if args.eta is None else args.eta
    rng = np.random.default_rng([cfg.seed, 1 if low else 0])

    print(f"Generating {n} {args.fidelity}-fidelity samples on {pot.kind.value}")
    dataset = generate_dataset(pot, n, cfg.data.sigma, rng, fraction, eta, tag=args.fidelity)
    path = _out_path(cfg, args.output, f"data_{args.fidelity}.xyz")
    sidecars = write_xyz(path, dataset, args.hessian_format)
    print(f"\nData generation completed:")
    print(f"  Samples: {len(dataset)}")
    print(f"  With Hessians: {dataset.n_hessian}")
    print(f"  Written to: {path} (+{len(sidecars)} Hessian sidecars)")


def cmd_sample(args, cfg):
    import numpy as np
    from fileio import load_dataset, write_json, write_xyz
    from potential import DescriptorConfig, descriptor, load_checkpoint
    from sampling import RankMode, embed_dataset, energy_rank_subset, wld_sample

    dataset = load_dataset(args.data)
    strategy = args.strategy or cfg.sampling.strategy
    if strategy == 'wld':
        if args.model:
            model, _ = load_checkpoint(args.model)
            dcfg, species = model.descriptor, model.species
        else:
            d = cfg.descriptor
            dcfg = DescriptorConfig(d.cutoff, d.n_basis, d.r_min, d.switch_fraction)
            species = d.species
        emb = embed_dataset(dataset, lambda s: descriptor(s, dcfg, species), cfg.sampling.k)
        n_select = args.n_select if args.n_select is not None else min(cfg.sampling.n_select, len(dataset))
        indices = wld_sample(emb, n_select, np.random.default_rng(cfg.seed), cfg.sampling.exponent)
    else:
        fraction = args.fraction if args.fraction is not None else cfg.sampling.fraction
        indices = energy_rank_subset(dataset, fraction, RankMode(strategy))

    path = _out_path(cfg, args.output, "selection.json")
    write_json(path, {"strategy": strategy, "n_total": len(dataset), "indices": indices})
    print(f"Selected {len(indices)} of {len(dataset)} configurations ({strategy})")
    print(f"Selection saved to: {path}")
    if args.write_subset:
        write_xyz(args.write_subset, dataset.subset(indices, note=strategy))
        print(f"Subset written to: {args.write_subset}")


def _train(args, cfg, phase_name: str):
    import numpy as np
    from config import build_model, build_train_config
    from fileio import load_dataset
    from potential import load_checkpoint, save_checkpoint
    from sampling import restrict_hessian_labels
    from trainer import Phase, train_phase

    dataset = load_dataset(args.data)
    validation = load_dataset(args.validation) if args.validation else None
    init = getattr(args, 'init', None)
    params = None
    if init:
        model, params = load_checkpoint(init)
    else:
        species = list(dict.fromkeys(sp for s in dataset for sp in s.structure.species))
        model = build_model(cfg, species)

    fraction = getattr(args, 'hessian_fraction', None)
    if fraction is not None:
        dataset = restrict_hessian_labels(dataset, fraction, np.random.default_rng([cfg.seed, 11]))

    train_cfg = build_train_config(cfg, phase_name)
    phase = Phase(phase_name)
    print(f"Starting {phase.value} on {len(dataset)} samples ({dataset.n_hessian} with Hessians)")
    params, history = train_phase(model, dataset, train_cfg, phase, init_params=params, validation=validation)

    path = _out_path(cfg, args.output, f"{phase_name}.ckpt")
    save_checkpoint(path, model, params, {"phase": phase.value, "seed": cfg.seed, "data": args.data})
    csv_path, _ = history.save(os.path.join(cfg.paths.out_dir, f"{phase_name}_history"))
    print(f"\nTraining completed:")
    print(f"  Epochs: {len(history)}")
    if len(history):
        best = history.to_frame()["val_loss"].min()
        print(f"  Best validation loss: {best:.6g}")
    print(f"  Checkpoint: {path}")
    print(f"  History: {csv_path}")


def cmd_eval(args, cfg):
    from fileio import load_dataset, write_json
    from trainer import evaluate

    surface = _surface(args, cfg)
    dataset = load_dataset(args.data)
    metrics = evaluate(surface, dataset)
    path = _out_path(cfg, args.output, "metrics.json")
    write_json(path, metrics)
    print(json.dumps({k: (None if v != v else v) for k, v in metrics.items()}, indent=2))
    print(f"Metrics saved to: {path}")


def cmd_ts_search(args, cfg):
    from config import build_ts_config
    from fileio import read_reactions, save_table, write_json
    from ts_search import run_reactions, success_rate_table

    reactions = read_reactions(args.reactions)
    surface = _surface(args, cfg)
    print(f"Searching transition states for {len(reactions)} reactions")
    reports, frame = run_reactions(reactions, surface, build_ts_config(cfg), cfg.threads)

    out = cfg.paths.out_dir
    write_json(os.path.join(out, "ts_reports.json"),
               {name: report.to_dict() for (name, _, _), report in zip(reactions, reports)})
    save_table(frame, os.path.join(out, "ts_reactions"))
    rates = success_rate_table(frame)
    save_table(rates, os.path.join(out, "ts_success"))
    print(f"\nTS search completed:")
    print(rates.to_string(index=False))
    print(f"Reports saved to: {os.path.join(out, 'ts_reports.json')}")


def cmd_thermo(args, cfg):
    from fileio import read_structure, write_json
    from thermo import structure_thermochemistry

    structure = read_structure(args.structure, args.index)
    surface = _surface(args, cfg)
    temperature = cfg.thermo.temperature if args.temperature is None else args.temperature
    result = structure_thermochemistry(surface, structure, temperature, cfg.thermo.pressure,
                                       cfg.thermo.sigma_rot, drop_imaginary=args.drop_imaginary)
    path = _out_path(cfg, args.output, "thermo.json")
    write_json(path, result.to_dict())
    print(f"G = {result.gibbs:.6f} eV at {temperature} K (ZPE {result.zpe:.6f} eV)")
    print(f"Result saved to: {path}")


def cmd_sscha(args, cfg):
    import pandas as pd
    from config import build_sscha_config
    from fileio import read_matrix, read_structure, save_table, write_matrix
    from sscha import TrialHarmonic, anharmonic_frequencies, harmonic_start, sscha_minimize

    centroid = read_structure(args.structure)
    evaluator = _surface(args, cfg)
    sscha_cfg = build_sscha_config(cfg)
    if args.phi0:
        phi0 = read_matrix(args.phi0)
    else:
        phi0 = harmonic_start(evaluator, centroid, sscha_cfg.temperature, sscha_cfg.project_rigid).phi
    result = sscha_minimize(evaluator, phi0, centroid, sscha_cfg)

    out = cfg.paths.out_dir
    os.makedirs(out, exist_ok=True)
    result.history.to_csv(os.path.join(out, "sscha_history.csv"), index=False)
    write_matrix(os.path.join(out, "sscha_phi.json"), result.trial.phi)
    vib = anharmonic_frequencies(result.trial)
    save_table(pd.DataFrame({"mode": range(len(vib.wavenumbers)), "frequency_cm": vib.wavenumbers,
                             "energy_ev": vib.energies}), os.path.join(out, "sscha_frequencies"))
    status = "converged" if result.converged else "not converged"
    print(f"\nSSCHA {status} after {result.n_populations} populations "
          f"({result.n_evaluations} evaluator calls)")
    if result.free_energy is not None:
        print(f"  F = {result.free_energy:.6f} ± {result.free_energy_error:.1e} eV")
    print(f"  Outputs: {out}")
    if not result.converged:
        logging.warning("SSCHA result is not converged; increase sscha.max_populations")


def cmd_tc(args, cfg):
    from fileio import write_json
    from superconduct import tc_pipeline

    if args.mu_star:
        try:
            mu_stars = [float(x) for x in args.mu_star.split(',') if x.strip()]
        except ValueError:
            raise ConfigError(f"--mu-star must be comma-separated numbers, got '{args.mu_star}'")
    else:
        mu_stars = cfg.superconduct.mu_star
    table = tc_pipeline(args.a2f, mu_stars, cfg.threads)
    path = _out_path(cfg, args.table, "tc.json")
    write_json(path, table.to_dict(orient="records"))
    print(table[["mu_star", "lam", "omega_ln_k", "tc"]].to_string(index=False))
    print(f"Table saved to: {path}")


def cmd_experiments(args, cfg):
    from experiments import load_experiment_spec, run_experiment

    spec = load_experiment_spec(args.spec)
    if args.threads is not None:
        spec.threads = cfg.threads
    if args.out is not None:
        spec.out_dir = cfg.paths.out_dir
    print(f"Running experiment '{spec.name}' ({spec.kind})")
    _, summary, _, paths = run_experiment(spec)
    print(summary.to_string(index=False))
    print(f"Summary saved to: {paths['markdown']}")


COMMANDS = {
    'gen-data': cmd_gen_data,
    'sample': cmd_sample,
    'pretrain': lambda args, cfg: _train(args, cfg, 'pretrain'),
    'finetune': lambda args, cfg: _train(args, cfg, 'finetune'),
    'eval': cmd_eval,
    'ts-search': cmd_ts_search,
    'thermo': cmd_thermo,
    'sscha': cmd_sscha,
    'tc': cmd_tc,
    'experiments': cmd_experiments,
}


def cli_dispatch(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, set up the runtime and run one subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    if args.command is None or (args.command == 'experiments' and args.experiments_command is None):
        parser.print_help()
        return 2

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            cfg.threads = args.threads
        if args.out is not None:
            cfg.paths.out_dir = args.out
    except ConfigError as e:
        print(f"Configuration error: {e}")
        return 2

    configure_threads(cfg.threads)
    setup_logging(cfg.paths.log_dir)
    os.makedirs(cfg.paths.out_dir, exist_ok=True)

    try:
        COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"Configuration error: {e}")
        return 2
    except Exception as e:
        print(f"Error during {args.command}: {e}")
        logging.error(f"{args.command} failed: {e}")
        return 1
    return 0


def main():
    """Main CLI entry point."""
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
