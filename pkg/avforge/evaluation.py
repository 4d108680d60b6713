"""
Preference accuracy, dominance verdicts, annotation agreement and
judge-annotated generation accuracy.

For every record the three responses (expert, generic, avoidance) are
scored by their mean token log-probability given the query; the level with
the highest score wins the record. Preference accuracy is the fraction of
records each level wins.
"""

import logging
import math
from collections import Counter
from typing import Literal, Union

from pydantic import BaseModel

from .remote import RemoteException
from .scorer import SequenceTooLongException, generate
from .utils import parallel_map

_log = logging.getLogger(__name__)

Level = Literal["exp", "gen", "avd"]
Verdict = Literal["exp", "gen", "avd", "none"]

# Order doubles as the tie-break: Exp > Gen > Avd
LEVELS = ("exp", "gen", "avd")
RESPONSE_FIELDS = {"exp": "expert", "gen": "generic", "avd": "avoidance"}
JUDGE_LABELS = ("expert", "generic", "avoidance")


class ScoringFailedException(RuntimeError):
    def __init__(self, sample_id, message=None):
        super().__init__(message or f"Scoring failed for sample '{sample_id}'.")
        self.sample_id = sample_id


class LevelFractions(BaseModel):
    exp: float = 0.0
    gen: float = 0.0
    avd: float = 0.0


class LevelLogprobs(BaseModel):
    exp: float
    gen: float
    avd: float


class SampleResult(BaseModel):
    sample_id: str
    winner: Level
    mean_logprobs: LevelLogprobs


class EvalReport(BaseModel):
    domain: str
    n_samples: int
    fractions: LevelFractions
    dominant: Verdict
    # Corpus means of the per-sample mean log-probabilities, for diagnostics
    mean_logprobs: LevelLogprobs
    per_sample: list[SampleResult]


def _winner(scores):
    best = LEVELS[0]
    for level in LEVELS[1:]:
        if scores[level] > scores[best]:
            best = level
    return best


def with_instruction(query, instruction):
    """Prompt for the prompt-engineering baseline: instruction, blank line, query."""
    return query if instruction is None else f"{instruction}\n\n{query}"


def preference_accuracy(scorer, records, domain=None, workers=1, instruction=None):
    """
    Fraction of records won by each response level.

    Parameters
    ----------
    scorer : object with `score(prompt, completion)`
        Returns a `ScoredCompletion`.
    records : list of PreferenceRecord
        Non-empty.
    domain : str
        Label for the report; defaults to the records' common domain.
    workers : int
        Records scored concurrently.
    instruction : str
        Optional instruction placed before every query (baseline mode).

    Returns
    -------
    report : EvalReport
    """
    records = list(records)
    if len(records) == 0:
        raise ValueError("Cannot compute preference accuracy of an empty dataset.")
    if domain is None:
        domains = {record.domain for record in records}
        domain = domains.pop() if len(domains) == 1 else "mixed"

    def evaluate(record):
        prompt = with_instruction(record.query, instruction)
        try:
            scores = {
                level: scorer.score(prompt, getattr(record.responses, RESPONSE_FIELDS[level])).mean_logprob
                for level in LEVELS
            }
        except Exception as exc:
            raise ScoringFailedException(record.id, f"Scoring failed for sample '{record.id}': {exc}") from exc
        return SampleResult(sample_id=record.id, winner=_winner(scores), mean_logprobs=LevelLogprobs(**scores))

    per_sample = parallel_map(evaluate, records, workers)

    n = len(per_sample)
    counts = Counter(result.winner for result in per_sample)
    fractions = LevelFractions(**{level: counts[level] / n for level in LEVELS})
    mean_logprobs = LevelLogprobs(
        **{level: math.fsum(getattr(r.mean_logprobs, level) for r in per_sample) / n for level in LEVELS}
    )
    report = EvalReport(
        domain=domain,
        n_samples=n,
        fractions=fractions,
        dominant=dominant_level(fractions),
        mean_logprobs=mean_logprobs,
        per_sample=per_sample,
    )
    _log.info(
        f"Preference accuracy ({domain}, n={n}): exp={fractions.exp:.3f} gen={fractions.gen:.3f} "
        f"avd={fractions.avd:.3f}, dominant {report.dominant}"
    )
    return report


def dominant_level(fractions):
    """
    The level with the unique strictly largest fraction, provided that
    fraction exceeds 1/3; "none" otherwise.
    """
    if isinstance(fractions, BaseModel):
        fractions = fractions.model_dump()
    values = {level: fractions[level] for level in LEVELS}
    best = max(values.values())
    leaders = [level for level, value in values.items() if value == best]
    if len(leaders) != 1 or best <= 1 / 3:
        return "none"
    return leaders[0]


def cohen_kappa(labels_a, labels_b):
    """
    Chance-corrected agreement of two annotators,
    kappa = (p_o - p_e) / (1 - p_e).
    """
    labels_a, labels_b = list(labels_a), list(labels_b)
    if len(labels_a) != len(labels_b):
        raise ValueError(f"Label lists differ in length ({len(labels_a)} vs {len(labels_b)}).")
    if len(labels_a) == 0:
        raise ValueError("Cannot compute agreement of empty label lists.")
    n = len(labels_a)
    agreements = sum(a == b for a, b in zip(labels_a, labels_b))
    counts_a, counts_b = Counter(labels_a), Counter(labels_b)
    # Integer arithmetic keeps the statistic exactly symmetric
    chance = sum(counts_a[label] * counts_b[label] for label in counts_a.keys() & counts_b.keys())
    if chance == n * n:
        # A single label used by both annotators
        return 1.0
    p_o = agreements / n
    p_e = chance / (n * n)
    return (p_o - p_e) / (1 - p_e)


def annotation_confusion(reference, predicted, labels=LEVELS):
    """
    Row-normalized confusion matrix {reference label: {predicted label:
    fraction}}, e.g. annotator labels against the level a response was
    generated for.
    """
    reference, predicted = list(reference), list(predicted)
    if len(reference) != len(predicted):
        raise ValueError("Label lists differ in length.")
    rows = {}
    for label in labels:
        row = [p for r, p in zip(reference, predicted) if r == label]
        counts = Counter(row)
        rows[label] = {other: (counts[other] / len(row) if row else 0.0) for other in labels}
    return rows


class JudgeFractions(BaseModel):
    expert: float = 0.0
    generic: float = 0.0
    avoidance: float = 0.0


class JudgedSample(BaseModel):
    sample_id: str
    label: Union[str, None] = None
    error: Union[str, None] = None


class JudgeReport(BaseModel):
    """
    Label tally of judged generations. `fractions` are taken over the
    `n_judged` samples and sum to 1; they are all zero when `n_judged` is 0,
    i.e. when generation or judging failed for every sample.
    """

    domain: str
    n: int
    n_judged: int
    n_errors: int
    fractions: JudgeFractions
    samples: list[JudgedSample]


def judge_accuracy(judge, model, records, max_new_tokens=256, domain=None, workers=1):
    """
    Generate a response for every query with the model, let the judge label
    it and tally the labels. Queries too long to generate from, failed judge
    calls and labels outside the three levels are recorded as errors of
    their sample and excluded from the fractions.
    """
    records = list(records)
    if domain is None:
        domains = {record.domain for record in records}
        domain = domains.pop() if len(domains) == 1 else "mixed"

    def judge_one(record):
        try:
            response = generate(model, record.query, max_new_tokens)
        except SequenceTooLongException as exc:
            _log.warning(f"Generating a response for sample '{record.id}' failed: {exc}")
            return JudgedSample(sample_id=record.id, error=str(exc))
        try:
            label = judge.judge(record.query, response, JUDGE_LABELS)
        except RemoteException as exc:
            _log.warning(f"Judging sample '{record.id}' failed: {exc}")
            return JudgedSample(sample_id=record.id, error=str(exc))
        if label not in JUDGE_LABELS:
            _log.warning(f"Judge returned unknown label '{label}' for sample '{record.id}'.")
            return JudgedSample(sample_id=record.id, error=f"unknown label '{label}'")
        return JudgedSample(sample_id=record.id, label=label)

    samples = parallel_map(judge_one, records, workers)
    labels = [sample.label for sample in samples if sample.error is None]
    counts = Counter(labels)
    fractions = JudgeFractions(**{label: (counts[label] / len(labels) if labels else 0.0) for label in JUDGE_LABELS})
    return JudgeReport(
        domain=domain,
        n=len(samples),
        n_judged=len(labels),
        n_errors=len(samples) - len(labels),
        fractions=fractions,
        samples=samples,
    )
