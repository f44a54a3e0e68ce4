import numpy as np
import pytest

from dataset import SyntheticSpec, generate_synthetic, write_dataset
from pipeline import ClasterTrainer, build_config

# Small enough to train in well under a second.
FAST_CONFIG = {
    "k_clusters": "3",
    "mapper_epochs": "30",
    "classifier_epochs": "3",
    "batch_size": "8",
    "adam.lr": "0.01",
    "rl.total_iterations": "60",
    "rl.log_every": "20",
    "rectify_k": "2",
    "kmeans_n_init": "2",
    "dims.fc_hidden": "8",
    "dims.conv_channels": "2",
}


def finite_difference(f, x, h=1e-6):
    """Central differences of scalar f at array x (x is restored afterwards)."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        original = x[idx]
        x[idx] = original + h
        upper = f()
        x[idx] = original - h
        lower = f()
        x[idx] = original
        grad[idx] = (upper - lower) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


@pytest.fixture
def tiny_spec():
    return SyntheticSpec(num_classes=6, per_class=8, d_v=6, d_s=3,
                         noise_scale=0.05, seed=3, unseen_fraction=0.5)


@pytest.fixture
def tiny_dataset(tiny_spec):
    return generate_synthetic(tiny_spec)


@pytest.fixture
def fast_config():
    return build_config(FAST_CONFIG)


@pytest.fixture
def make_config():
    """Factory for the fast config with dotted-key overrides applied."""
    def _make(overrides=None):
        return build_config({**FAST_CONFIG, **(overrides or {})})
    return _make


@pytest.fixture
def make_trainer(tiny_dataset, make_config):
    """
    Factory fixture for ClasterTrainer on the tiny synthetic dataset.
    Pass dotted-key overrides for the fast config.
    """
    def _make(overrides=None, dataset=None):
        return ClasterTrainer(tiny_dataset if dataset is None else dataset, make_config(overrides))
    return _make


@pytest.fixture
def data_files(tmp_path, tiny_dataset):
    """The tiny dataset written to disk; returns the three paths."""
    paths = {
        "instances":  tmp_path / "tiny_instances.tsv",
        "embeddings": tmp_path / "tiny_embeddings.tsv",
        "split":      tmp_path / "tiny_split.tsv",
    }
    write_dataset(tiny_dataset, paths["instances"], paths["embeddings"], paths["split"])
    return paths
