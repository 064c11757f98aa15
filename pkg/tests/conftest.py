"""Shared fixtures: a micro run configuration that exercises every pipeline
stage in seconds (tiny grids, tiny nets, one or two epochs)."""

import pytest

from modaseg.adaptation import AdaptConfig
from modaseg.config import (DatasetConfig, PreprocessConfig, RunConfig, SelectionConfig)
from modaseg.nets import DiscriminatorConfig, GeneratorConfig, UNetConfig
from modaseg.segmentation import SupervisedConfig
from modaseg.translation import TranslationConfig
from modaseg.volume_io import DomainAppearance, PhantomSpec


def make_micro_config(seed=0, variant="full", supervised_epochs=2) -> RunConfig:
    return RunConfig(
        dataset=DatasetConfig(phantom=PhantomSpec(
            n_source=3, n_target=2,
            grid_shape=(20, 20, 6), spacing=(1.0, 1.0, 1.0),
            tumor_radius=(4.0, 6.0), tumor_z_radius=(1.2, 2.0),
            cochlea_radius=(1.5, 2.2), cochlea_z_radius=(1.0, 1.4),
            source=DomainAppearance(class_means=(30.0, 70.0, 95.0),
                                    noise_level=1.0, bias_amplitude=2.0),
            target=DomainAppearance(class_means=(30.0, 70.0, 95.0), invert_contrast=True,
                                    noise_level=1.0, bias_amplitude=2.0))),
        preprocess=PreprocessConfig(target_spacing=(1.25, 1.25, 1.0),
                                    target_shape=(16, 16, 6)),
        translation=TranslationConfig(
            epochs=1, batch_size=4,
            generator=GeneratorConfig(base_width=2, res_blocks=1),
            discriminator=DiscriminatorConfig(base_width=4)),
        supervised=SupervisedConfig(
            epochs=supervised_epochs, batch_size=4,
            unet=UNetConfig(base_width=4, levels=2)),
        adaptation=AdaptConfig(epochs=1, batch_size=4, snapshot_interval=2,
                               disc_base_width=4),
        selection=SelectionConfig(holdout_fraction=0.34),
        seed=seed,
        variant=variant,
    )


@pytest.fixture
def micro_config():
    return make_micro_config()
