"""
Alignment vector arithmetic.

    delta  = aligned - base                       (extract_av)
    merged = base + lambda * delta                (apply_av)
    merged = base + sum_k coefficient_k * delta_k (apply_multi)

All arithmetic happens in float32; results are cast to the output dtype
when the merged tensor is built. Tensors are processed independently, so
merges parallelize per tensor and stream to disk one tensor at a time.
"""

import json
import logging
import math
import os
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np
from muTimer import Timer
from pydantic import BaseModel, ValidationError, field_validator

from .tensor_store import (CheckpointWriter, DtypePolicy, Tensor, TensorMap,
                           checkpoint_digest, load_checkpoint,
                           save_checkpoint, validate_compat)
from .utils import parallel_imap, parallel_map

_log = logging.getLogger(__name__)

# Coefficients beyond this magnitude are accepted, but logged
COEFFICIENT_WARNING_BOUND = 2.0

AV_DOMAIN_KEY = "av.domain"
AV_BASE_DIGEST_KEY = "av.base_digest"
AV_ALIGNED_DIGEST_KEY = "av.aligned_digest"
AV_CREATED_AT_KEY = "av.created_at"


class IncompatibleCheckpointException(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


class InvalidAlignmentVectorException(ValueError):
    pass


class RecipeException(ValueError):
    pass


def require_compat(a, b, what):
    report = validate_compat(a, b)
    if not report.compatible:
        kinds = ", ".join(f"{m.tensor} ({m.kind})" for m in report.mismatches[:5])
        raise IncompatibleCheckpointException(f"{what} are incompatible: {kinds}", report)
    return report


class Provenance(BaseModel):
    base_digest: str
    aligned_digest: str
    domain: str
    created_at: datetime


class AlignmentVector:
    """Weight difference between an aligned checkpoint and its base, with provenance."""

    def __init__(self, delta, provenance):
        self.delta = delta
        self.provenance = provenance

    @property
    def domain(self):
        return self.provenance.domain

    def to_tensor_map(self):
        return self.delta.replace_metadata(
            {
                AV_DOMAIN_KEY: self.provenance.domain,
                AV_BASE_DIGEST_KEY: self.provenance.base_digest,
                AV_ALIGNED_DIGEST_KEY: self.provenance.aligned_digest,
                AV_CREATED_AT_KEY: self.provenance.created_at.isoformat(),
            }
        )

    @classmethod
    def from_tensor_map(cls, checkpoint):
        metadata = checkpoint.metadata
        missing = [
            key
            for key in (AV_DOMAIN_KEY, AV_BASE_DIGEST_KEY, AV_ALIGNED_DIGEST_KEY)
            if key not in metadata
        ]
        if missing:
            raise InvalidAlignmentVectorException(
                f"Checkpoint is not an alignment vector, metadata lacks {', '.join(missing)}."
            )
        created_at = metadata.get(AV_CREATED_AT_KEY)
        provenance = Provenance(
            base_digest=metadata[AV_BASE_DIGEST_KEY],
            aligned_digest=metadata[AV_ALIGNED_DIGEST_KEY],
            domain=metadata[AV_DOMAIN_KEY],
            created_at=created_at if created_at else datetime.fromtimestamp(0, timezone.utc),
        )
        return cls(checkpoint.replace_metadata({}), provenance)

    def save(self, path, dtype_policy="keep"):
        save_checkpoint(self.to_tensor_map(), path, dtype_policy=dtype_policy)

    @classmethod
    def load(cls, path):
        return cls.from_tensor_map(load_checkpoint(path))

    def __repr__(self):
        return f"AlignmentVector(domain={self.domain!r}, {len(self.delta)} tensors)"


def extract_av(aligned, base, domain, dtype_policy="keep", workers=1):
    """
    Subtract the base checkpoint from the aligned one.

    Parameters
    ----------
    aligned : TensorMap
        Checkpoint after alignment fine-tuning.
    base : TensorMap
        The checkpoint the alignment started from.
    domain : str
        Free-form label stored in the provenance, e.g. "medical".
    dtype_policy : "keep" or "force-f32"
        Store the delta in the source dtype or in F32.
    workers : int
        Threads for the per-tensor subtraction.

    Returns
    -------
    vector : AlignmentVector
    """
    require_compat(aligned, base, "Aligned and base checkpoints")

    def subtract(name):
        values = aligned[name].to_float32() - base[name].to_float32()
        dtype = aligned[name].dtype if dtype_policy == "keep" else "F32"
        return Tensor.from_float32(values, dtype, name=name)

    names = list(base)
    delta = TensorMap(dict(zip(names, parallel_map(subtract, names, workers))))
    provenance = Provenance(
        base_digest=checkpoint_digest(base),
        aligned_digest=checkpoint_digest(aligned),
        domain=domain,
        created_at=datetime.now(timezone.utc),
    )
    _log.info(f"Extracted alignment vector for domain '{domain}' from {len(names)} tensors.")
    return AlignmentVector(delta, provenance)


@dataclass(frozen=True)
class MergeTerm:
    vector: AlignmentVector
    coefficient: float

    def __post_init__(self):
        if not math.isfinite(self.coefficient):
            raise ValueError("Merge coefficients must be finite.")


@dataclass(frozen=True)
class MergeSpec:
    base: TensorMap
    terms: list
    output_dtype_policy: DtypePolicy = "keep"

    def __post_init__(self):
        if len(self.terms) < 1:
            raise ValueError("A merge needs at least one term.")
        if self.output_dtype_policy not in ("keep", "force-f32"):
            raise ValueError(f"Unknown dtype policy '{self.output_dtype_policy}'.")


def _check_spec(spec):
    for term in spec.terms:
        require_compat(spec.base, term.vector.delta, f"Base and alignment vector '{term.vector.domain}'")
        if abs(term.coefficient) > COEFFICIENT_WARNING_BOUND:
            _log.warning(
                f"Coefficient {term.coefficient} for '{term.vector.domain}' lies outside "
                f"[-{COEFFICIENT_WARNING_BOUND}, {COEFFICIENT_WARNING_BOUND}]."
            )


def _merge_tensor(spec, name):
    base_tensor = spec.base[name]
    dtype = base_tensor.dtype if spec.output_dtype_policy == "keep" else "F32"
    # Zero coefficients contribute nothing; skipping them keeps the base bit-exact
    active = [term for term in spec.terms if term.coefficient != 0]
    if len(active) == 0:
        return base_tensor.cast(dtype, name=name)
    values = base_tensor.to_float32()
    for term in active:
        values += np.float32(term.coefficient) * term.vector.delta[name].to_float32()
    return Tensor.from_float32(values, dtype, name=name)


def apply_multi(spec, workers=1, timer=None):
    """
    Add a weighted sum of alignment vectors to the base checkpoint. Terms are
    accumulated in the order given. The result carries the base metadata.
    """
    if timer is None:
        timer = Timer()
    _check_spec(spec)
    names = list(spec.base)
    with timer("merge tensors"):
        tensors = parallel_map(lambda name: _merge_tensor(spec, name), names, workers)
    return TensorMap(dict(zip(names, tensors)), spec.base.metadata)


def apply_av(base, av, lam, dtype_policy="keep", workers=1):
    """Add `lam` times the alignment vector to `base`."""
    spec = MergeSpec(base=base, terms=[MergeTerm(vector=av, coefficient=lam)], output_dtype_policy=dtype_policy)
    return apply_multi(spec, workers=workers)


def stream_merge(spec, path, workers=1, timer=None):
    """
    Like `apply_multi`, but every merged tensor is written to `path` as soon
    as it is ready instead of keeping the merged checkpoint in memory.
    """
    if timer is None:
        timer = Timer()
    _check_spec(spec)
    names = list(spec.base)
    target = (lambda t: t.dtype) if spec.output_dtype_policy == "keep" else (lambda t: "F32")
    layout = {name: (target(spec.base[name]), spec.base[name].shape) for name in names}
    with timer("merge tensors"), CheckpointWriter(path, layout, spec.base.metadata) as writer:
        for name, tensor in zip(names, parallel_imap(lambda name: _merge_tensor(spec, name), names, workers)):
            writer.write(name, tensor)
    _log.info(f"Merged {len(spec.terms)} alignment vector(s) into '{path}'.")


class RecipeTerm(BaseModel):
    vector: str
    coefficient: float

    @field_validator("coefficient")
    @classmethod
    def _validate_coefficient(cls, value):
        if not math.isfinite(value):
            raise ValueError("Merge coefficients must be finite.")
        return value


class MergeRecipe(BaseModel):
    base: str
    terms: list[RecipeTerm]
    output: str
    dtype_policy: DtypePolicy = "keep"

    @field_validator("terms")
    @classmethod
    def _validate_terms(cls, value):
        if len(value) < 1:
            raise ValueError("A recipe needs at least one term.")
        return value

    @classmethod
    def from_file(cls, path):
        """Load a recipe; relative paths in it are relative to the recipe's directory."""
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        try:
            recipe = cls.model_validate(json.loads(text))
        except (ValueError, ValidationError) as exc:
            raise RecipeException(f"Invalid merge recipe '{path}': {exc}") from exc
        root = os.path.dirname(os.fspath(path))
        return recipe.model_copy(
            update=dict(
                base=os.path.join(root, recipe.base),
                output=os.path.join(root, recipe.output),
                terms=[term.model_copy(update=dict(vector=os.path.join(root, term.vector))) for term in recipe.terms],
            )
        )

    def to_spec(self):
        return MergeSpec(
            base=load_checkpoint(self.base),
            terms=[
                MergeTerm(vector=AlignmentVector.load(term.vector), coefficient=term.coefficient)
                for term in self.terms
            ],
            output_dtype_policy=self.dtype_policy,
        )
