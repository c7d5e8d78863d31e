# Patient Re-identification Toolkit - Data Models

"""
Data Model for Identity-Labelled Feature Datasets

This module defines the records the rest of the toolkit works on. A Record is
one visit (one image) of one patient, reduced to a feature vector; a DataSet
is an immutable sequence of records sharing one ambient dimension and one
attribute schema.

Key Types:
- Record: image id, patient id, attribute values, feature vector
- AttributeSchema: declared kind (categorical or numeric) of one attribute
- DataSet: validated record collection
- SyntheticConfig / SyntheticAttribute / OodShift: generator settings
- SplitSpec: patient-level train/validation/test fractions
"""

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from types import MappingProxyType
from typing import Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DimensionMismatchError, ManifestError, UnknownAttributeError

CATEGORICAL = 'categorical'
NUMERIC = 'numeric'
ATTRIBUTE_KINDS = (CATEGORICAL, NUMERIC)


@dataclass(frozen=True)
class AttributeSchema:
    """
    Declared kind of one attribute

    Attributes:
    - kind: 'categorical' or 'numeric'
    - values: allowed values for categorical attributes (empty for numeric)
    """
    kind: str
    values: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ATTRIBUTE_KINDS:
            raise ManifestError(f"attribute kind must be one of {ATTRIBUTE_KINDS}, got '{self.kind}'")
        object.__setattr__(self, 'values', tuple(str(v) for v in self.values))
        if self.kind == CATEGORICAL and not self.values:
            raise ManifestError("categorical attribute needs a non-empty value list")

    def coerce(self, value):
        """Convert a raw value to the stored representation (str or float)."""
        if self.kind == NUMERIC:
            return float(value)
        value = str(value)
        if value not in self.values:
            raise ManifestError(f"value '{value}' not in declared values {list(self.values)}")
        return value

    def to_dict(self):
        if self.kind == NUMERIC:
            return {'kind': NUMERIC}
        return {'kind': CATEGORICAL, 'values': list(self.values)}


@dataclass(frozen=True, eq=False)
class Record:
    """
    One visit of one patient

    Attributes:
    - image_id: unique within a dataset
    - patient_id: identity label, non-empty
    - attributes: attribute name -> categorical (str) or numeric (float) value
    - features: read-only float64 vector of the dataset's ambient dimension
    """
    image_id: str
    patient_id: str
    attributes: Mapping[str, Union[str, float]]
    features: np.ndarray

    def __post_init__(self):
        if not str(self.patient_id):
            raise ManifestError(f"record '{self.image_id}' has an empty patient_id")
        features = np.array(self.features, dtype=np.float64, copy=True)
        if features.ndim != 1:
            raise DimensionMismatchError(f"record '{self.image_id}' features must be a vector")
        features.setflags(write=False)
        object.__setattr__(self, 'image_id', str(self.image_id))
        object.__setattr__(self, 'patient_id', str(self.patient_id))
        object.__setattr__(self, 'attributes', MappingProxyType(dict(self.attributes)))
        object.__setattr__(self, 'features', features)

    def __eq__(self, other):
        if not isinstance(other, Record):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.patient_id == other.patient_id
            and self.attributes.keys() == other.attributes.keys()
            and all(_same_value(v, other.attributes[k]) for k, v in self.attributes.items())
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features, equal_nan=True)
        )

    __hash__ = None


def _same_value(a, b):
    """Attribute equality in which a missing numeric value (NaN) equals itself."""
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return True
    return a == b


@dataclass(frozen=True)
class DataSet:
    """
    Immutable, validated collection of records

    Attributes:
    - records: tuple of Record, all of length ambient_dim
    - ambient_dim: feature dimension m
    - attribute_schema: attribute name -> AttributeSchema
    """
    records: Tuple[Record, ...]
    ambient_dim: int
    attribute_schema: Mapping[str, AttributeSchema] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'records', tuple(self.records))
        object.__setattr__(self, 'attribute_schema', dict(self.attribute_schema))
        if int(self.ambient_dim) <= 0:
            raise ManifestError(f"ambient_dim must be positive, got {self.ambient_dim}")
        seen = set()
        names = set(self.attribute_schema)
        for position, record in enumerate(self.records):
            if record.features.shape != (self.ambient_dim,):
                raise DimensionMismatchError(
                    f"record {position} ('{record.image_id}') has {record.features.shape[0]} "
                    f"features, expected {self.ambient_dim}"
                )
            if record.image_id in seen:
                raise ManifestError(f"duplicate image_id '{record.image_id}'", row=position + 1)
            seen.add(record.image_id)
            if set(record.attributes) != names:
                raise ManifestError(
                    f"record '{record.image_id}' attributes {sorted(record.attributes)} "
                    f"do not match schema {sorted(names)}",
                    row=position + 1,
                )
            for name, value in record.attributes.items():
                schema = self.attribute_schema[name]
                if schema.kind == CATEGORICAL and value not in schema.values:
                    raise ManifestError(
                        f"record '{record.image_id}' attribute '{name}' has undeclared value '{value}'",
                        row=position + 1,
                    )

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, index):
        return self.records[index]

    @cached_property
    def features(self):
        """n x m feature matrix in record order."""
        if not self.records:
            return np.zeros((0, self.ambient_dim))
        matrix = np.stack([r.features for r in self.records])
        matrix.setflags(write=False)
        return matrix

    @property
    def patient_ids(self):
        return [r.patient_id for r in self.records]

    @property
    def patients(self):
        return sorted(set(self.patient_ids))

    def require_attribute(self, name):
        if name not in self.attribute_schema:
            raise UnknownAttributeError(name, self.attribute_schema)
        return self.attribute_schema[name]

    def labels(self, name):
        """Values of one attribute in record order."""
        self.require_attribute(name)
        return [r.attributes[name] for r in self.records]

    def subset(self, indices):
        return DataSet(
            records=tuple(self.records[i] for i in indices),
            ambient_dim=self.ambient_dim,
            attribute_schema=self.attribute_schema,
        )

    def schema_dict(self):
        return {
            'attributes': {name: spec.to_dict() for name, spec in self.attribute_schema.items()},
            'ambient_dim': int(self.ambient_dim),
        }


@dataclass(frozen=True)
class SyntheticAttribute:
    name: str
    kind: str = CATEGORICAL
    signal_strength: float = 1.0
    values: Tuple[str, ...] = ('0', '1')


@dataclass(frozen=True)
class OodShift:
    """Feature offset scale and visit-noise multiplier of the shifted distribution."""
    offset_scale: float = 1.0
    noise_multiplier: float = 1.0


@dataclass(frozen=True)
class SyntheticConfig:
    """
    Settings of the latent-identity generator

    Attributes:
    - num_identities: number of synthetic patients
    - visits_per_identity: records per patient, int or inclusive (low, high)
    - latent_dim / ambient_dim: identity latent size and feature size
    - visit_noise_sigma: std of per-visit Gaussian noise
    - attributes: attribute confounds added to the features
    - projection_seed: fixes the projection, attribute and nuisance directions
    - sample_seed: fixes identities, attribute draws, noise and nuisance coefficients
    - nuisance_dim: number of fixed acquisition directions, orthogonal to the
      identity subspace and the attribute directions, along which every visit
      varies independently (0 disables)
    - nuisance_scale: std of the per-visit coefficient on each nuisance direction
    - ood_shift: shift used by the out-of-distribution twin
    - shifted: whether ood_shift is applied to this config's output
    - id_prefix: prefix for generated patient and image ids
    """
    num_identities: int
    visits_per_identity: Union[int, Tuple[int, int]]
    latent_dim: int
    ambient_dim: int
    visit_noise_sigma: float = 1.0
    attributes: Tuple[SyntheticAttribute, ...] = ()
    projection_seed: int = 0
    sample_seed: int = 0
    nuisance_dim: int = 0
    nuisance_scale: float = 0.0
    ood_shift: Optional[OodShift] = None
    shifted: bool = False
    id_prefix: str = ''

    def visit_range(self):
        visits = self.visits_per_identity
        if isinstance(visits, Sequence) and not isinstance(visits, str):
            low, high = (int(v) for v in visits)
        else:
            low = high = int(visits)
        return low, high

    def attribute_direction_count(self):
        """One direction per categorical value, one per numeric attribute."""
        return sum(len(a.values) if a.kind == CATEGORICAL else 1 for a in self.attributes)

    def validate(self):
        if self.num_identities <= 0:
            raise ConfigError(f"num_identities must be positive, got {self.num_identities}")
        low, high = self.visit_range()
        if low <= 0 or high < low:
            raise ConfigError(f"visits_per_identity must be positive with low <= high, got {self.visits_per_identity}")
        if self.latent_dim <= 0:
            raise ConfigError(f"latent_dim must be positive, got {self.latent_dim}")
        if self.ambient_dim < self.latent_dim:
            raise ConfigError(f"ambient_dim ({self.ambient_dim}) must be >= latent_dim ({self.latent_dim})")
        if not (self.visit_noise_sigma >= 0):
            raise ConfigError(f"visit_noise_sigma must be >= 0, got {self.visit_noise_sigma}")
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate attribute names in {names}")
        for spec in self.attributes:
            if spec.kind not in ATTRIBUTE_KINDS:
                raise ConfigError(f"attribute '{spec.name}' has unknown kind '{spec.kind}'")
            if not (spec.signal_strength >= 0):
                raise ConfigError(f"attribute '{spec.name}' signal_strength must be >= 0")
            if spec.kind == CATEGORICAL and len(spec.values) == 0:
                raise ConfigError(f"categorical attribute '{spec.name}' needs values")
        if self.nuisance_dim < 0 or not (self.nuisance_scale >= 0):
            raise ConfigError("nuisance_dim and nuisance_scale must be >= 0")
        if self.nuisance_dim > 0:
            taken = self.latent_dim + self.attribute_direction_count()
            if taken + self.nuisance_dim > self.ambient_dim:
                raise ConfigError(
                    f"nuisance_dim {self.nuisance_dim} does not fit: latent and attribute directions already "
                    f"use {taken} of ambient_dim {self.ambient_dim}"
                )
        if self.ood_shift is not None:
            if not (self.ood_shift.offset_scale >= 0 and self.ood_shift.noise_multiplier >= 0):
                raise ConfigError("ood_shift scale and noise multiplier must be >= 0")
        return self

    def ood_config(self, sample_seed=None):
        """Shifted twin: same projection, fresh identities, ood_shift applied."""
        if self.ood_shift is None:
            raise ConfigError("ood_shift is not configured")
        return replace(
            self,
            shifted=True,
            sample_seed=self.sample_seed + 1 if sample_seed is None else sample_seed,
            id_prefix=f"ood-{self.id_prefix}",
        )


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    validation: float = 0.1
    test: float = 0.1
    seed: int = 0

    @property
    def fractions(self):
        return (self.train, self.validation, self.test)

    def validate(self):
        if any(not (f > 0) for f in self.fractions):
            raise ConfigError(f"split fractions must be positive, got {self.fractions}")
        if not math.isclose(sum(self.fractions), 1.0, rel_tol=0.0, abs_tol=1e-9):
            raise ConfigError(f"split fractions must sum to 1, got {sum(self.fractions)!r}")
        return self
