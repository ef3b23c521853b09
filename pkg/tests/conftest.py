import numpy as np
import pytest

from fusionalign import databank


@pytest.fixture(scope="session")
def small_dataset():
    """Noiseless 3-branch dataset shared by trainer/eval tests."""
    spec = databank.SynthSpec(
        seed=11, num_train_stimuli=60, num_test_stimuli=40,
        branch_dims=[12, 8, 16], num_channels=6, num_timepoints=10,
        noise_sigma=0.0, branch_noise_sigma=0.0, latent_dim=8,
        num_repetitions=2)
    bank, recordings, latents = databank.generate_synthetic(spec)
    return spec, bank, recordings, latents
