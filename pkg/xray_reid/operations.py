# Dataset Operations for the Patient Re-identification Toolkit

"""
Dataset Interaction Module

This module provides the dataset-level operations: reading and writing CSV
manifests with their JSON schema sidecar, generating seeded synthetic
identity datasets, and partitioning records by patient.

Key Functionality:
- Manifest ingestion and export (bit-exact float round trip)
- Latent-identity synthetic generator with attribute confounds and OOD shift
- Patient-disjoint train/validation/test splitting
"""

import json
import logging
import re
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DimensionMismatchError, ManifestError, SplitError
from .models import CATEGORICAL, AttributeSchema, DataSet, Record
from .storage import atomic_output

logger = logging.getLogger(__name__)

FEATURE_COLUMN = re.compile(r'^f(\d+)$')
ID_COLUMNS = ('image_id', 'patient_id')


def schema_path_for(path):
    """Sidecar schema path: ``data.csv`` -> ``data.schema.json``."""
    return Path(path).with_suffix('.schema.json')


def _format_float(value):
    return repr(float(value))


def load_schema(path):
    """
    Read a schema sidecar

    Args:
        path (str | Path): JSON file with ``attributes`` and ``ambient_dim``

    Returns:
        tuple: (dict of AttributeSchema, int ambient_dim)
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"schema file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding='utf-8'))
        ambient_dim = int(raw['ambient_dim'])
        attributes = {
            name: AttributeSchema(kind=spec['kind'], values=tuple(spec.get('values', ())))
            for name, spec in raw.get('attributes', {}).items()
        }
    except (ValueError, KeyError, TypeError) as e:
        raise ManifestError(f"malformed schema file {path}: {e}") from e
    return attributes, ambient_dim


def load_manifest(path, schema_path=None):
    """
    Parse a CSV manifest into a DataSet

    Args:
        path (str | Path): Manifest CSV
        schema_path (str | Path, optional): Schema sidecar, defaults to ``<stem>.schema.json``

    Returns:
        DataSet: One record per data row, in file order
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    schema, ambient_dim = load_schema(schema_path or schema_path_for(path))

    try:
        frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False, encoding='utf-8')
    except pd.errors.EmptyDataError as e:
        raise ManifestError(f"manifest {path} is empty (no header)") from e
    except pd.errors.ParserError as e:
        match = re.search(r'line (\d+)', str(e))
        row = int(match.group(1)) - 1 if match else None
        raise ManifestError(f"malformed manifest {path}, row {row}: {e}", row=row) from e

    header = [str(c) for c in frame.iloc[0].tolist()]
    if tuple(header[:2]) != ID_COLUMNS:
        raise ManifestError(f"manifest header must start with image_id,patient_id, got {header[:2]}")
    feature_columns = [c for c in header if FEATURE_COLUMN.match(c)]
    attribute_columns = [c for c in header[2:] if not FEATURE_COLUMN.match(c)]
    expected = [f'f{i}' for i in range(len(feature_columns))]
    if feature_columns != expected:
        raise ManifestError(f"feature columns must be f0..f{len(feature_columns) - 1} in order")
    if len(feature_columns) != ambient_dim:
        raise DimensionMismatchError(
            f"manifest declares {len(feature_columns)} feature columns, schema says ambient_dim {ambient_dim}"
        )
    if set(attribute_columns) != set(schema):
        raise ManifestError(
            f"manifest attribute columns {sorted(attribute_columns)} do not match schema {sorted(schema)}"
        )

    position = {name: i for i, name in enumerate(header)}
    feature_idx = [position[c] for c in feature_columns]
    records = []
    for row_number, values in enumerate(frame.iloc[1:].itertuples(index=False, name=None), start=1):
        raw_features = [values[i] for i in feature_idx]
        present = [v for v in raw_features if isinstance(v, str) and v != '']
        if len(present) != ambient_dim:
            raise ManifestError(
                f"row {row_number} has {len(present)} feature values, header declares {ambient_dim}",
                row=row_number,
            )
        try:
            features = np.array([float(v) for v in raw_features], dtype=np.float64)
            attributes = {name: schema[name].coerce(values[position[name]]) for name in attribute_columns}
        except (ValueError, ManifestError) as e:
            raise ManifestError(f"row {row_number}: {e}", row=row_number) from e
        image_id, patient_id = values[0], values[1]
        if not isinstance(patient_id, str) or not patient_id:
            raise ManifestError(f"row {row_number} has an empty patient_id", row=row_number)
        records.append(Record(image_id=image_id, patient_id=patient_id, attributes=attributes, features=features))

    dataset = DataSet(records=tuple(records), ambient_dim=ambient_dim, attribute_schema=schema)
    logger.debug(f"Loaded {len(dataset)} records from {path}")
    return dataset


def save_manifest(dataset, path, schema_path=None):
    """
    Write a DataSet as CSV manifest plus schema sidecar

    Floats use shortest round-trip formatting, so ``load_manifest`` inverts
    this exactly.

    Args:
        dataset (DataSet): Records to write
        path (str | Path): Manifest destination
        schema_path (str | Path, optional): Sidecar destination
    """
    attribute_names = list(dataset.attribute_schema)
    columns = list(ID_COLUMNS) + attribute_names + [f'f{i}' for i in range(dataset.ambient_dim)]
    rows = []
    for record in dataset.records:
        row = [record.image_id, record.patient_id]
        for name in attribute_names:
            value = record.attributes[name]
            row.append(value if dataset.attribute_schema[name].kind == CATEGORICAL else _format_float(value))
        row.extend(_format_float(v) for v in record.features)
        rows.append(row)
    frame = pd.DataFrame(rows, columns=columns, dtype=object)

    with atomic_output(path) as handle:
        frame.to_csv(handle, index=False, lineterminator='\n')
    with atomic_output(schema_path or schema_path_for(path)) as handle:
        json.dump(dataset.schema_dict(), handle, indent=2, sort_keys=True)
        handle.write('\n')
    logger.debug(f"Wrote {len(dataset)} records to {path}")


def _unit_rows(matrix):
    return matrix / np.linalg.norm(matrix, axis=1, keepdims=True)


def generate_synthetic(config):
    """
    Generate a seeded latent-identity dataset

    Each identity i draws z_i ~ N(0, I_latent); each visit is
    P z_i + attribute components + offset + sigma * eps, plus
    nuisance_scale * N(0, I) coefficients on ``nuisance_dim`` fixed
    directions orthogonal to P and the attribute directions. P and all
    directions depend only on ``projection_seed``; identities, attribute
    draws, noise and nuisance coefficients depend only on ``sample_seed``.
    With ``nuisance_dim`` 0 no extra draws are made.

    Args:
        config (SyntheticConfig): Generator settings

    Returns:
        DataSet: num_identities patients, record order by identity then visit
    """
    config.validate()
    m, k = config.ambient_dim, config.latent_dim

    projection_rng = np.random.default_rng(config.projection_seed)
    projection = projection_rng.standard_normal((m, k)) / np.sqrt(k)
    basis = np.linalg.qr(projection)[0] if m > k else None
    directions = {}
    for spec in config.attributes:
        rows = len(spec.values) if spec.kind == CATEGORICAL else 1
        raw = projection_rng.standard_normal((rows, m))
        if basis is not None:
            # keep the confound out of the identity subspace
            raw = raw - (raw @ basis) @ basis.T
        directions[spec.name] = _unit_rows(raw)
    ood_direction = _unit_rows(projection_rng.standard_normal((1, m)))[0]
    nuisance = None
    if config.nuisance_dim > 0:
        taken = np.linalg.qr(np.hstack([projection] + [directions[s.name].T for s in config.attributes]))[0]
        raw = projection_rng.standard_normal((m, config.nuisance_dim))
        raw = raw - taken @ (taken.T @ raw)
        nuisance = np.linalg.qr(raw)[0].T

    sample_rng = np.random.default_rng(config.sample_seed)
    n = config.num_identities
    latents = sample_rng.standard_normal((n, k))
    low, high = config.visit_range()
    visits = np.full(n, low) if low == high else sample_rng.integers(low, high + 1, size=n)
    numeric_draws = {
        spec.name: sample_rng.standard_normal(n) for spec in config.attributes if spec.kind != CATEGORICAL
    }
    noise = sample_rng.standard_normal((int(visits.sum()), m))

    sigma = config.visit_noise_sigma
    offset = np.zeros(m)
    if config.shifted and config.ood_shift is not None:
        sigma = sigma * config.ood_shift.noise_multiplier
        offset = config.ood_shift.offset_scale * ood_direction
    visit_noise = sigma * noise
    if nuisance is not None:
        # acquisition variation along the nuisance directions
        coefficients = sample_rng.standard_normal((len(noise), config.nuisance_dim))
        visit_noise = visit_noise + config.nuisance_scale * coefficients @ nuisance

    schema = {}
    for spec in config.attributes:
        schema[spec.name] = (
            AttributeSchema(kind=CATEGORICAL, values=spec.values)
            if spec.kind == CATEGORICAL else AttributeSchema(kind='numeric')
        )

    records = []
    row = 0
    for i in range(n):
        base = projection @ latents[i] + offset
        attributes = {}
        stride = 1
        for spec in config.attributes:
            if spec.kind == CATEGORICAL:
                # round-robin, decorrelated across attributes
                value_index = (i // stride) % len(spec.values)
                stride *= len(spec.values)
                attributes[spec.name] = str(spec.values[value_index])
                base = base + spec.signal_strength * directions[spec.name][value_index]
            else:
                value = float(numeric_draws[spec.name][i])
                attributes[spec.name] = value
                base = base + spec.signal_strength * value * directions[spec.name][0]
        for _ in range(int(visits[i])):
            records.append(Record(
                image_id=f'{config.id_prefix}img{row:06d}',
                patient_id=f'{config.id_prefix}p{i:05d}',
                attributes=attributes,
                features=base + visit_noise[row],
            ))
            row += 1

    logger.debug(f"Generated {len(records)} records for {n} identities (sigma={sigma})")
    return DataSet(records=tuple(records), ambient_dim=m, attribute_schema=schema)


def group_by_patient(dataset):
    """
    Map each patient_id to its record indices

    Returns:
        dict: patient_id -> list of indices in record order (first-seen key order)
    """
    groups = {}
    for index, record in enumerate(dataset.records):
        groups.setdefault(record.patient_id, []).append(index)
    return groups


def _partition_patients(dataset, fractions, seed):
    patients = dataset.patients
    order = np.random.default_rng(seed).permutation(len(patients))
    shuffled = [patients[i] for i in order]
    # cut points at the rounded cumulative fractions
    cuts = [int(round(float(c) * len(patients))) for c in np.cumsum(fractions)[:-1]]
    counts = [int(c) for c in np.diff([0] + cuts + [len(patients)])]
    if any(c <= 0 for c in counts):
        raise SplitError(
            f"cannot split {len(patients)} patients into fractions {tuple(fractions)}: "
            f"patient counts would be {counts}"
        )
    groups = group_by_patient(dataset)
    parts = []
    start = 0
    for count in counts:
        chosen = shuffled[start:start + count]
        start += count
        indices = sorted(i for pid in chosen for i in groups[pid])
        parts.append(dataset.subset(indices))
    return tuple(parts)


def split_by_patient(dataset, spec):
    """
    Patient-disjoint train/validation/test split

    Sorted patient ids are shuffled with ``spec.seed`` and sliced
    contiguously by fraction; each split keeps the original record order.

    Args:
        dataset (DataSet): Non-empty dataset
        spec (SplitSpec): Fractions and seed

    Returns:
        tuple: (train, validation, test) DataSets
    """
    spec.validate()
    if len(dataset) == 0:
        raise SplitError("cannot split an empty dataset")
    return _partition_patients(dataset, spec.fractions, spec.seed)


def holdout_by_patient(dataset, fraction, seed):
    """Two-way patient-disjoint split returning (kept, held_out)."""
    if not 0 < fraction < 1:
        raise SplitError(f"holdout fraction must lie in (0, 1), got {fraction}")
    if len(dataset) == 0:
        raise SplitError("cannot split an empty dataset")
    return _partition_patients(dataset, (1.0 - fraction, fraction), seed)
