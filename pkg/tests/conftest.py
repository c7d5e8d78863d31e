# tests/conftest.py
import numpy as np
import pytest

from xray_reid import create_app
from xray_reid.models import AttributeSchema, DataSet, OodShift, Record, SyntheticAttribute, SyntheticConfig
from xray_reid.operations import generate_synthetic


@pytest.fixture
def app():
    return create_app('testing')


@pytest.fixture
def make_dataset():
    """Build a DataSet from (patient_id, features[, attributes]) rows."""
    def build(rows, schema=None):
        records = []
        for index, row in enumerate(rows):
            patient_id, features = row[0], row[1]
            attributes = row[2] if len(row) > 2 else {}
            records.append(Record(
                image_id=f'img{index}',
                patient_id=patient_id,
                attributes=attributes,
                features=np.asarray(features, dtype=np.float64),
            ))
        ambient_dim = len(rows[0][1]) if rows else 2
        return DataSet(records=tuple(records), ambient_dim=ambient_dim, attribute_schema=schema or {})
    return build


@pytest.fixture
def sex_schema():
    return {'sex': AttributeSchema(kind='categorical', values=('F', 'M'))}


@pytest.fixture
def synthetic_config():
    return SyntheticConfig(
        num_identities=12,
        visits_per_identity=3,
        latent_dim=4,
        ambient_dim=8,
        visit_noise_sigma=0.3,
        attributes=(
            SyntheticAttribute('sex', values=('F', 'M'), signal_strength=1.0),
            SyntheticAttribute('age', kind='numeric', signal_strength=0.5, values=()),
        ),
        projection_seed=1,
        sample_seed=2,
        ood_shift=OodShift(offset_scale=1.0, noise_multiplier=1.5),
    )


@pytest.fixture
def synthetic_dataset(synthetic_config):
    return generate_synthetic(synthetic_config)
