import numpy as np
import pytest
import torch

from alphalatent.autoencoder import BaseTrainConfig, train_base
from alphalatent.data import sample_specs, gen_transparent_sample
from alphalatent.pixels import premultiply

torch.set_num_threads(1)


def premultiplied_set(count, master_seed, size=32):
    specs = sample_specs(count, master_seed, size=size)
    images = []
    samples = []
    for s in specs:
        img, label = gen_transparent_sample(s)
        samples.append((img, label))
        images.append(premultiply(img).rgb)
    return images, samples


@pytest.fixture(scope="session")
def tiny_ae():
    """Frozen autoencoder trained briefly on 32x32 premultiplied shapes;
    shared by every test that needs a frozen base model."""
    images, _ = premultiplied_set(48, master_seed=1234)
    cfg = BaseTrainConfig(steps=800, batch_size=8, base_channels=16, seed=7)
    return train_base(images, cfg)


@pytest.fixture(scope="session")
def tiny_set():
    images, samples = premultiplied_set(48, master_seed=1234)
    return images, samples
