"""
Log-probability scoring of completions.

Two backends share the `score(prompt, completion)` interface:

- `TinyLMScorer` runs a small decoder-only transformer over a byte-level
  vocabulary, entirely in numpy. Its weights are an ordinary checkpoint,
  so alignment vectors can be extracted from and applied to it.
- `RemoteScorer` asks a scoring server for per-token log-probabilities.

Mean log-probabilities are per-token means over the completion tokens
only; prompt tokens are conditioning context.
"""

import logging
import math

import numpy as np
from pydantic import BaseModel, field_validator, model_validator
from scipy.special import log_softmax, softmax

from .remote import ScoringClient
from .tensor_store import Tensor, TensorMap, load_checkpoint
from .utils import parallel_map

_log = logging.getLogger(__name__)

BYTE_TOKENS = 256
BOS = 256
EOS = 257
PAD = 258
VOCAB_SIZE = 259

LAYER_NORM_EPS = 1e-5

METADATA_PREFIX = "tinylm."


class SequenceTooLongException(ValueError):
    pass


class EmptyCompletionException(ValueError):
    pass


class MissingTensorException(KeyError):
    pass


class TinyLMConfig(BaseModel):
    vocab_size: int = VOCAB_SIZE
    d_model: int
    n_layers: int
    n_heads: int
    max_seq_len: int
    # Hidden width of the MLP; 4 * d_model if not given
    d_ff: int = 0

    @field_validator("vocab_size")
    @classmethod
    def _validate_vocab_size(cls, value):
        if value != VOCAB_SIZE:
            raise ValueError(f"The byte-level vocabulary has exactly {VOCAB_SIZE} tokens.")
        return value

    @field_validator("d_model", "n_layers", "n_heads", "max_seq_len")
    @classmethod
    def _validate_positive(cls, value):
        if value < 1:
            raise ValueError("Model dimensions must be positive.")
        return value

    @model_validator(mode="after")
    def _validate_heads(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"'n_heads' ({self.n_heads}) must divide 'd_model' ({self.d_model}).")
        if self.d_ff < 0:
            raise ValueError("'d_ff' must not be negative.")
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_model
        return self

    def to_metadata(self):
        return {f"{METADATA_PREFIX}{key}": str(value) for key, value in self.model_dump().items()}

    @classmethod
    def from_metadata(cls, metadata):
        values = {
            key[len(METADATA_PREFIX):]: value for key, value in metadata.items() if key.startswith(METADATA_PREFIX)
        }
        if not values:
            raise ValueError("Checkpoint metadata carries no 'tinylm.*' configuration.")
        return cls(**values)


def architecture(config):
    """Tensor names and shapes every TinyLM checkpoint must contain."""
    d, V, L, F = config.d_model, config.vocab_size, config.max_seq_len, config.d_ff
    shapes = {
        "embed.weight": (V, d),
        "pos.weight": (L, d),
        "final_ln.weight": (d,),
        "final_ln.bias": (d,),
        "head.weight": (d, V),
        "head.bias": (V,),
    }
    for i in range(config.n_layers):
        for norm in ("ln1", "ln2"):
            shapes[f"layer{i}.{norm}.weight"] = (d,)
            shapes[f"layer{i}.{norm}.bias"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[f"layer{i}.attn.{proj}.weight"] = (d, d)
            shapes[f"layer{i}.attn.{proj}.bias"] = (d,)
        shapes[f"layer{i}.mlp.fc1.weight"] = (d, F)
        shapes[f"layer{i}.mlp.fc1.bias"] = (F,)
        shapes[f"layer{i}.mlp.fc2.weight"] = (F, d)
        shapes[f"layer{i}.mlp.fc2.bias"] = (d,)
    return shapes


def build_tiny_model(config, seed=0, scale=0.02):
    """
    Random TinyLM checkpoint: normal weights with standard deviation
    `scale`, unit layer-norm gains and zero biases.
    """
    rng = np.random.default_rng(seed)
    entries = {}
    for name, shape in architecture(config).items():
        if name.endswith("ln1.weight") or name.endswith("ln2.weight") or name == "final_ln.weight":
            values = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias"):
            values = np.zeros(shape, dtype=np.float32)
        else:
            values = (scale * rng.standard_normal(shape)).astype(np.float32)
        entries[name] = Tensor.from_float32(values)
    return TensorMap(entries, config.to_metadata())


def tokenize(text):
    """BOS followed by the UTF-8 bytes of `text` as token ids 0-255."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return [BOS] + list(bytes(text))


def detokenize(tokens):
    """Inverse of `tokenize`; special tokens are dropped."""
    return bytes(token for token in tokens if token < BYTE_TOKENS)


def _as_bytes(text):
    return text.encode("utf-8") if isinstance(text, str) else bytes(text)


def _layer_norm(x, weight, bias):
    mean = x.mean(axis=-1, keepdims=True)
    var = np.square(x - mean).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + LAYER_NORM_EPS) * weight + bias


def _gelu(x):
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x * x * x)))


class TinyLM:
    """
    Decoder-only transformer: token + learned positional embedding, pre-norm
    blocks of causal multi-head self-attention and a GELU MLP, final
    layer norm and an untied output projection with bias. Linear layers
    compute `x @ weight + bias`.
    """

    def __init__(self, weights, config=None):
        self.config = TinyLMConfig.from_metadata(weights.metadata) if config is None else config
        self._params = {}
        for name, shape in architecture(self.config).items():
            if name not in weights:
                raise MissingTensorException(f"Checkpoint lacks tensor '{name}'.")
            if weights[name].shape != shape:
                raise ValueError(f"Tensor '{name}' has shape {list(weights[name].shape)}, expected {list(shape)}.")
            self._params[name] = weights[name].to_float32()

    @classmethod
    def from_checkpoint(cls, path):
        return cls(load_checkpoint(path))

    def _attention(self, h, i, mask):
        p = self._params
        nb_tokens, d = h.shape
        nb_heads = self.config.n_heads
        head_dim = d // nb_heads

        def heads(proj):
            y = h @ p[f"layer{i}.attn.{proj}.weight"] + p[f"layer{i}.attn.{proj}.bias"]
            return y.reshape(nb_tokens, nb_heads, head_dim).transpose(1, 0, 2)

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = (q @ k.transpose(0, 2, 1)) * np.float32(1.0 / math.sqrt(head_dim))
        scores = np.where(mask, -np.inf, scores).astype(np.float32)
        attended = softmax(scores, axis=-1) @ v
        attended = attended.transpose(1, 0, 2).reshape(nb_tokens, d)
        return attended @ p[f"layer{i}.attn.o.weight"] + p[f"layer{i}.attn.o.bias"]

    def forward(self, tokens):
        """
        Logits for every position.

        Parameters
        ----------
        tokens : sequence of int
            Token ids, at most `max_seq_len` of them.

        Returns
        -------
        logits : numpy.ndarray
            float32 array of shape (len(tokens), vocab_size).
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        nb_tokens = len(tokens)
        if nb_tokens == 0:
            raise ValueError("Cannot run the model on an empty token sequence.")
        if nb_tokens > self.config.max_seq_len:
            raise SequenceTooLongException(
                f"Sequence has {nb_tokens} tokens, the model accepts at most {self.config.max_seq_len}."
            )
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ValueError("Token ids must lie in [0, vocab_size).")

        p = self._params
        x = p["embed.weight"][tokens] + p["pos.weight"][:nb_tokens]
        mask = np.triu(np.ones((nb_tokens, nb_tokens), dtype=bool), k=1)
        for i in range(self.config.n_layers):
            h = _layer_norm(x, p[f"layer{i}.ln1.weight"], p[f"layer{i}.ln1.bias"])
            x = x + self._attention(h, i, mask)
            h = _layer_norm(x, p[f"layer{i}.ln2.weight"], p[f"layer{i}.ln2.bias"])
            h = _gelu(h @ p[f"layer{i}.mlp.fc1.weight"] + p[f"layer{i}.mlp.fc1.bias"])
            x = x + h @ p[f"layer{i}.mlp.fc2.weight"] + p[f"layer{i}.mlp.fc2.bias"]
        x = _layer_norm(x, p["final_ln.weight"], p["final_ln.bias"])
        return (x @ p["head.weight"] + p["head.bias"]).astype(np.float32)


class ScoredCompletion(BaseModel):
    token_logprobs: list[float]
    mean_logprob: float
    token_count: int

    @model_validator(mode="after")
    def _validate_consistency(self):
        if self.token_count < 1 or self.token_count != len(self.token_logprobs):
            raise ValueError("'token_count' must equal the number of log-probabilities and be at least 1.")
        if not math.isclose(self.mean_logprob, math.fsum(self.token_logprobs) / self.token_count,
                            rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError("'mean_logprob' must be the mean of 'token_logprobs'.")
        return self

    @classmethod
    def from_logprobs(cls, logprobs):
        logprobs = [float(x) for x in logprobs]
        if len(logprobs) == 0:
            raise EmptyCompletionException("A scored completion needs at least one token.")
        return cls(
            token_logprobs=logprobs,
            mean_logprob=math.fsum(logprobs) / len(logprobs),
            token_count=len(logprobs),
        )


def score_completion(model, prompt, completion):
    """
    Log-probability of every completion token given the prompt and the
    preceding completion tokens.
    """
    completion_tokens = list(_as_bytes(completion))
    if len(completion_tokens) == 0:
        raise EmptyCompletionException("Cannot score an empty completion.")
    prompt_tokens = tokenize(prompt)
    tokens = prompt_tokens + completion_tokens
    if len(tokens) > model.config.max_seq_len:
        raise SequenceTooLongException(
            f"Prompt and completion need {len(tokens)} tokens, the model accepts at most "
            f"{model.config.max_seq_len}."
        )
    logprobs = log_softmax(model.forward(tokens).astype(np.float64), axis=-1)
    start = len(prompt_tokens)
    return ScoredCompletion.from_logprobs(
        [logprobs[start + i - 1, token] for i, token in enumerate(completion_tokens)]
    )


def generate(model, prompt, max_new_tokens):
    """Greedy decoding; ties go to the lowest token id. Stops at EOS."""
    if max_new_tokens < 1:
        raise ValueError("'max_new_tokens' must be at least 1.")
    tokens = tokenize(prompt)
    generated = []
    for _ in range(max_new_tokens):
        logits = model.forward(tokens)
        token = int(np.argmax(logits[-1]))
        if token == EOS:
            break
        tokens.append(token)
        generated.append(token)
    return detokenize(generated).decode("utf-8", errors="replace")


def score_remote(endpoint, prompt, completion, retry=None, session=None):
    """Score via a remote server; the mean is recomputed client side."""
    client = ScoringClient(endpoint, retry=retry, session=session)
    return ScoredCompletion.from_logprobs(client.logprobs(prompt, completion))


class TinyLMScorer:
    def __init__(self, model):
        self.model = model

    @classmethod
    def from_weights(cls, weights):
        return cls(TinyLM(weights))

    def score(self, prompt, completion):
        return score_completion(self.model, prompt, completion)


class RemoteScorer:
    def __init__(self, endpoint, retry=None, session=None):
        self.client = ScoringClient(endpoint, retry=retry, session=session)

    def score(self, prompt, completion):
        return ScoredCompletion.from_logprobs(self.client.logprobs(prompt, completion))


def score_many(scorer, pairs, workers=1):
    """Score (prompt, completion) pairs, at most `workers` at a time."""
    return parallel_map(lambda pair: scorer.score(*pair), pairs, workers)
