import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A small corpus shared by trainer/CLI tests."""
    from diffseg.synthdata import CorpusSpec, generate_corpus
    root = tmp_path_factory.mktemp("corpus")
    spec = CorpusSpec(counts={"train": 8, "val": 2, "test": 4}, image_size=32, seed=3)
    generate_corpus(spec, root)
    return root
