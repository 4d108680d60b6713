"""
Checkpoints and datasets with analytically known behavior.

With all weights zero except the output bias, every position's logits
equal `head.bias`, so the mean log-probability of a completion made of a
single repeated byte is that byte's bias minus the log partition function.
Each domain is assigned three bytes (one per level); a record's three
responses repeat the level's byte. Alignment vectors that only move the
output bias then steer the winner of every record:

    base bias:   +0.5 on every "gen" byte, 0 elsewhere
    vector:      +delta on the domain's "exp" byte, -delta on its "avd" byte

For delta = 2 the merged model prefers avoidance for coefficients <= -0.3,
the generic response for |coefficient| <= 0.2 and the expert response for
coefficients >= 0.3. Vectors of different domains touch disjoint bytes.
"""

import numpy as np

from ..dataset import PreferenceRecord, Responses
from ..editing import extract_av
from ..scorer import TinyLMConfig, architecture
from ..tensor_store import Tensor, TensorMap

DOMAIN_TOKENS = {
    "medical": {"exp": "A", "gen": "B", "avd": "C"},
    "financial": {"exp": "D", "gen": "E", "avd": "F"},
    "legal": {"exp": "G", "gen": "H", "avd": "I"},
}

GEN_BIAS = 0.5
DELTA = 2.0


def tiny_config(d_model=8, n_layers=1, n_heads=2, max_seq_len=64):
    return TinyLMConfig(d_model=d_model, n_layers=n_layers, n_heads=n_heads, max_seq_len=max_seq_len)


def zero_model(config=None, head_bias=None):
    """TinyLM checkpoint with all weights zero, optionally with an output bias."""
    config = tiny_config() if config is None else config
    entries = {name: Tensor.from_float32(np.zeros(shape, dtype=np.float32))
               for name, shape in architecture(config).items()}
    if head_bias is not None:
        entries["head.bias"] = Tensor.from_float32(np.asarray(head_bias, dtype=np.float32))
    return TensorMap(entries, config.to_metadata())


def with_head_bias(model, updates):
    """Copy of `model` with the output bias of single bytes shifted, {byte: shift}."""
    bias = model["head.bias"].to_float32()
    for token, shift in updates.items():
        bias[ord(token)] += np.float32(shift)
    entries = dict(model)
    entries["head.bias"] = Tensor.from_float32(bias, model["head.bias"].dtype)
    return TensorMap(entries, model.metadata)


def preference_base(config=None, domains=tuple(DOMAIN_TOKENS), gen_bias=GEN_BIAS):
    """Zero model whose output bias favors the generic byte of every domain."""
    return with_head_bias(zero_model(config), {DOMAIN_TOKENS[d]["gen"]: gen_bias for d in domains})


def bias_delta_vector(base, domain, delta=DELTA):
    """Alignment vector moving the domain's expert byte up and its avoidance byte down."""
    tokens = DOMAIN_TOKENS[domain]
    aligned = with_head_bias(base, {tokens["exp"]: delta, tokens["avd"]: -delta})
    return extract_av(aligned, base, domain)


def toy_records(domain, n=4, prefix=None):
    """Records whose responses repeat the domain's level bytes, with varying lengths."""
    tokens = DOMAIN_TOKENS[domain]
    prefix = domain if prefix is None else prefix
    return [
        PreferenceRecord(
            id=f"{prefix}-{i:03d}",
            domain=domain,
            query=f"Q{i}",
            responses=Responses(
                expert=tokens["exp"] * (3 + i % 3),
                generic=tokens["gen"] * (4 + i % 2),
                avoidance=tokens["avd"] * (2 + i % 4),
            ),
        )
        for i in range(n)
    ]


def dyadic_checkpoint(shapes, seed=0, denominator=8, dtype="F32"):
    """
    Checkpoint of small multiples of 1/denominator; sums and differences of
    such checkpoints are exact in float32.
    """
    rng = np.random.default_rng(seed)
    return TensorMap(
        {
            name: Tensor.from_float32(rng.integers(-64, 65, size=shape).astype(np.float32) / denominator, dtype)
            for name, shape in shapes.items()
        }
    )
