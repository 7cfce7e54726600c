import pytest

from gsir.corpus import natural_crop, toy_corpus, write_corpus
from gsir.imageio import write_png
from gsir.rng import named_rng
from gsir.stagewise.config import StageControlConfig
from gsir.stagewise.predictor import TinyLinearPredictor

import params


@pytest.fixture
def rng():
    return named_rng(1234, "tests")


@pytest.fixture
def crop():
    return natural_crop(0, params.crop_size)


@pytest.fixture
def crops():
    return [natural_crop(k, params.crop_size) for k in range(2)]


@pytest.fixture
def toys():
    return toy_corpus(4, params.toy_size, seed=7)


@pytest.fixture
def control():
    return StageControlConfig(patch_size=params.patch_size, n_stages=params.n_stages)


@pytest.fixture
def toy_control():
    return StageControlConfig(patch_size=params.toy_patch_size, n_stages=params.n_stages)


@pytest.fixture
def tiny():
    return TinyLinearPredictor.initialize(params.toy_patch_size, params.n_stages, named_rng(0, "tiny-init"))


@pytest.fixture
def crop_png(tmp_path):
    path = tmp_path / "crop.png"
    write_png(path, natural_crop(1, params.crop_size))
    return path


@pytest.fixture
def corpus_dir(tmp_path):
    return write_corpus(tmp_path / "corpus", toy_corpus(3, params.toy_size, seed=3))[0].parent
