import pytest

from drm3d.config import from_dict

TINY = {
    "scene": {"grid_dims": [8, 8, 4], "voxel_size_m": 10.0, "num_stations": 2, "uav_count": [5, 8],
              "uav_altitude_m": [5.0, 35.0], "station_height_m": 5.0},
    "dataset": {"num_sequences": 2, "num_frames": 24, "train_fraction": 0.75, "n_in": 4, "n_out": 2},
    "model": {"d_model": 8, "num_heads": 2, "encoder_layers": 1, "decoder_layers": 1, "head_hidden": 16,
              "patch_side": 4, "fourier_bands": 2, "horizon": 2, "n_in": 4, "max_tokens": 64},
    "train": {"epochs": 2, "batch_size": 4, "lr": 1e-3, "checkpoint_every": 1},
    "seed": 7,
}


def tiny_config(**sections):
    data = {k: dict(v) if isinstance(v, dict) else v for k, v in TINY.items()}
    for k, v in sections.items():
        if isinstance(v, dict):
            data[k].update(v)
        else:
            data[k] = v
    return from_dict(data)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset():
    from drm3d.dataset import generate_dataset
    return generate_dataset(tiny_config())
