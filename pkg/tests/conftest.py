import pytest

from srseg.synth import SceneSpec, build_dataset


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    """8 small scenes (80 px HR, 8 px LR) shared across training tests."""
    root = tmp_path_factory.mktemp("desk_dataset")
    template = SceneSpec(seed=0, hr_size=80, n_buildings=4, n_roads=1, n_water=1,
                         building_size_range=((10, 24), (10, 24)))
    return build_dataset(8, template, root, (0.5, 0.25, 0.25), seed=3)
