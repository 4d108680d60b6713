import numpy as np
import pytest

from avforge.config import ENV_GENERATOR_ENDPOINT, ENV_JUDGE_ENDPOINT, ENV_SCORER_ENDPOINT, ENV_WORKERS
from avforge.dataset import save_dataset
from avforge.tensor_store import Tensor, TensorMap
from avforge.testing.fixtures import bias_delta_vector, preference_base, tiny_config, toy_records


@pytest.fixture(autouse=True)
def _clean_environment(monkeypatch):
    """Tests must not pick up endpoints or worker counts of the machine they run on."""
    for name in (ENV_SCORER_ENDPOINT, ENV_JUDGE_ENDPOINT, ENV_GENERATOR_ENDPOINT, ENV_WORKERS):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def mixed_checkpoint():
    """Tensors of all dtypes, a scalar and a zero-sized tensor."""
    rng = np.random.default_rng(7)
    return TensorMap(
        {
            "layer.weight": Tensor.from_float32(rng.standard_normal((3, 4)), "F32"),
            "layer.bias": Tensor.from_float32(rng.standard_normal(4), "F16"),
            "embed.weight": Tensor.from_float32(rng.standard_normal((5, 2)), "BF16"),
            "scale": Tensor.from_float32(np.float32(0.5), "F32"),
            "empty.bias": Tensor.from_float32(np.zeros((0,), dtype=np.float32), "BF16"),
        },
        {"format": "pt", "note": "fixture"},
    )


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture
def base(config):
    return preference_base(config)


@pytest.fixture
def avs(base):
    return {domain: bias_delta_vector(base, domain) for domain in ("medical", "financial", "legal")}


@pytest.fixture
def records():
    return {domain: toy_records(domain) for domain in ("medical", "financial", "legal")}


@pytest.fixture
def dataset_file(tmp_path):
    """Write records to a JSON-lines file and return its path."""

    def write(records, name="data.jsonl"):
        path = tmp_path / name
        save_dataset(records, path)
        return path

    return write
