#!/usr/bin/env python3
"""
fileio.py - Structure, label and matrix file formats

Extended-XYZ-style structure files with energies and forces, Hessian
sidecars (dense text or .npy) keyed by sample id, dataset manifests,
reaction manifests and the CSV/JSON result writers shared by the CLI.
"""

import json
import logging
import os
import shlex
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml

from structures import Dataset, DimensionError, Fidelity, LabeledSample, LabelSet, Structure


class FormatError(ValueError):
    """Raised for malformed files; messages start with path:line."""


HESSIAN_FORMATS = ("text", "npy")


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _hessian_sidecar(path: str, sample_id: int, fmt: str) -> str:
    stem = Path(path).name
    suffix = "hess" if fmt == "text" else "npy"
    return f"{stem}.{sample_id}.{suffix}"


def write_hessian(path: str, hessian: np.ndarray) -> None:
    """Dense Hessian as text (one row per line) or .npy, chosen by extension."""
    hessian = np.asarray(hessian, dtype=float)
    if path.endswith(".npy"):
        np.save(path, hessian)
        return
    with open(path, "w") as f:
        f.write(f"# n_dof={hessian.shape[0]}\n")
        for row in hessian:
            f.write(" ".join(_fmt(v) for v in row) + "\n")


def read_hessian(path: str, n_dof: int) -> np.ndarray:
    """Read a Hessian sidecar and check it holds n_dof × n_dof elements."""
    if not os.path.exists(path):
        raise FormatError(f"{path}:0: Hessian sidecar not found")
    if path.endswith(".npy"):
        values = np.load(path).reshape(-1)
    else:
        tokens: List[str] = []
        with open(path) as f:
            for line in f:
                line = line.split("#", 1)[0]
                tokens.extend(line.split())
        try:
            values = np.array([float(t) for t in tokens])
        except ValueError as e:
            raise FormatError(f"{path}:0: non-numeric Hessian entry ({e})")
    expected = n_dof * n_dof
    if values.size != expected:
        raise FormatError(f"{path}:0: expected {expected} Hessian elements ({n_dof}x{n_dof}), found {values.size}")
    return values.reshape(n_dof, n_dof)


def _comment_line(sample: LabeledSample, sample_id: int, sidecar: Optional[str]) -> str:
    s = sample.structure
    labels = sample.labels
    fields = []
    if labels.energy is not None:
        fields.append(f"energy={_fmt(labels.energy)}")
    fields.append(f"fidelity={sample.fidelity.value}")
    fields.append(f"sample_id={sample_id}")
    if sample.tag:
        fields.append(f"tag={shlex.quote(sample.tag)}")
    if sidecar:
        fields.append(f"hessian={shlex.quote(sidecar)}")
    if s.cell is not None:
        lattice = " ".join(_fmt(v) for v in s.cell.reshape(-1))
        fields.append(f'Lattice="{lattice}"')
        fields.append('pbc="{}"'.format(" ".join("T" if p else "F" for p in s.pbc)))
    props = "species:S:1:pos:R:3:mass:R:1"
    if labels.forces is not None:
        props += ":forces:R:3"
    fields.append(f"Properties={props}")
    return " ".join(fields)


def write_xyz(path: str, samples: Union[Dataset, Sequence[LabeledSample]], hessian_format: str = "text") -> List[str]:
    """
    Write labeled samples to one extended-XYZ file.

    Hessians go to sidecars next to the file, named <file>.<sample_id>.hess
    (or .npy). Floats use 17 significant digits, so reading back is lossless.

    Returns:
        Paths of the written sidecars
    """
    if hessian_format not in HESSIAN_FORMATS:
        raise FormatError(f"{path}:0: unknown Hessian format '{hessian_format}'")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    directory = os.path.dirname(path)
    sidecars = []
    with open(path, "w") as f:
        for sample_id, sample in enumerate(samples):
            s = sample.structure
            sidecar = None
            if sample.labels.hessian is not None:
                sidecar = _hessian_sidecar(path, sample_id, hessian_format)
                full = os.path.join(directory, sidecar)
                write_hessian(full, sample.labels.hessian)
                sidecars.append(full)
            f.write(f"{s.n_atoms}\n")
            f.write(_comment_line(sample, sample_id, sidecar) + "\n")
            forces = sample.labels.forces
            for i in range(s.n_atoms):
                cols = [s.species[i]] + [_fmt(v) for v in s.positions[i]] + [_fmt(s.masses[i])]
                if forces is not None:
                    cols += [_fmt(v) for v in forces[i]]
                f.write(" ".join(cols) + "\n")
    logging.info(f"Wrote {len(samples)} samples to {path} ({len(sidecars)} Hessian sidecars)")
    return sidecars


def _parse_comment(path: str, lineno: int, line: str) -> Dict[str, str]:
    try:
        tokens = shlex.split(line)
    except ValueError as e:
        raise FormatError(f"{path}:{lineno}: cannot parse comment line ({e})")
    fields = {}
    for token in tokens:
        if "=" not in token:
            raise FormatError(f"{path}:{lineno}: expected key=value, got '{token}'")
        key, value = token.split("=", 1)
        fields[key] = value
    return fields


def _parse_properties(path: str, lineno: int, spec: str) -> List[Tuple[str, int]]:
    parts = spec.split(":")
    if len(parts) % 3:
        raise FormatError(f"{path}:{lineno}: malformed Properties '{spec}'")
    columns = []
    for k in range(0, len(parts), 3):
        try:
            columns.append((parts[k], int(parts[k + 2])))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed Properties '{spec}'")
    names = [c[0] for c in columns]
    if names[:2] != ["species", "pos"]:
        raise FormatError(f"{path}:{lineno}: Properties must start with species and pos")
    return columns


def read_xyz(path: str) -> Dataset:
    """Read every frame of an extended-XYZ file, with Hessian sidecars when referenced."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Structure file not found: {path}")
    with open(path) as f:
        lines = f.read().splitlines()

    directory = os.path.dirname(path)
    samples = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        try:
            n_atoms = int(lines[i].strip())
        except ValueError:
            raise FormatError(f"{path}:{i + 1}: expected atom count, got '{lines[i].strip()}'")
        if i + 2 + n_atoms > len(lines):
            raise FormatError(f"{path}:{len(lines)}: file ends inside a frame of {n_atoms} atoms")
        fields = _parse_comment(path, i + 2, lines[i + 1])
        columns = _parse_properties(path, i + 2, fields.get("Properties", "species:S:1:pos:R:3"))
        width = sum(c[1] for c in columns)

        species, data = [], []
        for k in range(n_atoms):
            lineno = i + 3 + k
            parts = lines[lineno - 1].split()
            if len(parts) != width:
                raise FormatError(f"{path}:{lineno}: expected {width} columns, found {len(parts)}")
            species.append(parts[0])
            try:
                data.append([float(v) for v in parts[1:]])
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: non-numeric value ({e})")
        data = np.array(data, dtype=float).reshape(n_atoms, width - 1)

        block: Dict[str, np.ndarray] = {}
        offset = 0
        for name, count in columns[1:]:
            block[name] = data[:, offset:offset + count]
            offset += count

        cell = None
        pbc = (False, False, False)
        if "Lattice" in fields:
            cell = np.array([float(v) for v in fields["Lattice"].split()]).reshape(3, 3)
            pbc = tuple(v == "T" for v in fields.get("pbc", "T T T").split())
        masses = block["mass"].reshape(-1) if "mass" in block else None
        try:
            structure = Structure(tuple(species), block["pos"], masses, cell, pbc)
        except DimensionError as e:
            raise FormatError(f"{path}:{i + 1}: {e}")

        hessian = None
        if "hessian" in fields:
            hessian = read_hessian(os.path.join(directory, fields["hessian"]), 3 * n_atoms)
        energy = float(fields["energy"]) if "energy" in fields else None
        labels = LabelSet(energy, block.get("forces"), hessian)
        try:
            fidelity = Fidelity(fields.get("fidelity", Fidelity.HIGH.value))
        except ValueError:
            raise FormatError(f"{path}:{i + 2}: unknown fidelity '{fields['fidelity']}'")
        samples.append(LabeledSample(structure, labels, fidelity, fields.get("tag", "")))
        i += 2 + n_atoms

    return Dataset(tuple(samples), {"source": path})


def read_structure(path: str, index: int = 0) -> Structure:
    """One frame of a structure file."""
    ds = read_xyz(path)
    if not len(ds):
        raise FormatError(f"{path}:0: no frames")
    return ds[index].structure


def read_manifest(path: str) -> Dataset:
    """Concatenate the structure files listed in a manifest (one path per line, '#' comments)."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Manifest not found: {path}")
    directory = os.path.dirname(path)
    dataset = Dataset((), {"source": path})
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            entry = line.split("#", 1)[0].strip()
            if not entry:
                continue
            member = os.path.join(directory, entry)
            if not os.path.exists(member):
                raise FormatError(f"{path}:{lineno}: listed file not found: {entry}")
            dataset = dataset.concat(read_xyz(member))
    return dataset


def load_dataset(path: str) -> Dataset:
    """Structure file or manifest, by extension."""
    if path.endswith((".xyz", ".extxyz")):
        return read_xyz(path)
    return read_manifest(path)


def read_reactions(path: str) -> List[Tuple[str, Structure, Structure]]:
    """
    Reactions manifest (YAML).

    reactions:
      - name: r1
        reactant: r1_reactant.xyz
        product: r1_product.xyz
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Reactions manifest not found: {path}")
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    entries = data.get("reactions") if isinstance(data, dict) else None
    if not isinstance(entries, list):
        raise FormatError(f"{path}:1: expected a 'reactions' list")
    directory = os.path.dirname(path)
    reactions = []
    for k, entry in enumerate(entries):
        if not isinstance(entry, dict) or not {"reactant", "product"} <= set(entry):
            raise FormatError(f"{path}:0: reaction {k} needs reactant and product")
        name = str(entry.get("name", f"reaction_{k}"))
        reactant = read_structure(os.path.join(directory, entry["reactant"]))
        product = read_structure(os.path.join(directory, entry["product"]))
        reactions.append((name, reactant, product))
    return reactions


def read_matrix(path: str) -> np.ndarray:
    """Square matrix from JSON (nested lists), .npy or whitespace text."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Matrix file not found: {path}")
    if path.endswith(".json"):
        with open(path) as f:
            matrix = np.asarray(json.load(f), dtype=float)
    elif path.endswith(".npy"):
        matrix = np.load(path)
    else:
        try:
            matrix = np.loadtxt(path, ndmin=2)
        except ValueError as e:
            raise FormatError(f"{path}:0: {e}")
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise FormatError(f"{path}:0: expected a square matrix, got shape {matrix.shape}")
    return matrix


def write_matrix(path: str, matrix: np.ndarray) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    matrix = np.asarray(matrix, dtype=float)
    if path.endswith(".json"):
        write_json(path, matrix.tolist())
    elif path.endswith(".npy"):
        np.save(path, matrix)
    else:
        np.savetxt(path, matrix, fmt="%.17g")


def to_jsonable(obj):
    """Convert numpy/pandas values into JSON-serializable objects."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return to_jsonable(obj.item())
    if isinstance(obj, pd.DataFrame):
        return to_jsonable(obj.to_dict(orient="records"))
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def write_json(path: str, obj) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_jsonable(obj), f, indent=2, ensure_ascii=False)


def save_table(df: pd.DataFrame, path_prefix: str) -> Tuple[str, str]:
    """Write <prefix>.csv and <prefix>.json."""
    os.makedirs(os.path.dirname(path_prefix) or ".", exist_ok=True)
    csv_path = f"{path_prefix}.csv"
    json_path = f"{path_prefix}.json"
    df.to_csv(csv_path, index=False, encoding="utf-8")
    write_json(json_path, df)
    logging.info(f"Results saved to {csv_path} and {json_path}")
    return csv_path, json_path
