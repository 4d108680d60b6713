"""
Three-level preference data: schema, validation, splitting, prompt
rendering and LLM-backed generation.

A dataset file is JSON-lines, one PreferenceRecord per line:

    {"id": "medical-000001", "domain": "medical", "persona": "...",
     "query": "...", "responses": {"expert": "...", "generic": "...",
     "avoidance": "..."}, "source": "personahub"}
"""

import json
import logging
import math
import re
from importlib.resources import files
from string import Formatter
from typing import Literal

import numpy as np
from pydantic import BaseModel, ValidationError, computed_field, field_validator, model_validator

from .utils import parallel_map

_log = logging.getLogger(__name__)

LEVELS = ("exp", "gen", "avd")
RESPONSE_FIELDS = {"exp": "expert", "gen": "generic", "avd": "avoidance"}

MIN_SPLIT_RECORDS = 10

# Lengths are randomized to avoid a length bias between the levels
MIN_PARAGRAPHS = 1
MAX_PARAGRAPHS = 4


class DatasetException(ValueError):
    pass


class TemplateException(KeyError):
    pass


def _non_empty(value):
    if len(value.strip()) == 0:
        raise ValueError("must not be empty")
    return value


class Responses(BaseModel):
    expert: str
    generic: str
    avoidance: str

    @field_validator("expert", "generic", "avoidance")
    @classmethod
    def _validate_text(cls, value):
        return _non_empty(value)


class PreferenceRecord(BaseModel):
    id: str
    domain: str
    persona: str = ""
    query: str
    responses: Responses
    source: Literal["personahub", "createpersona", "other"] = "other"

    @field_validator("id", "domain", "query")
    @classmethod
    def _validate_text(cls, value):
        return _non_empty(value)


class ValidationIssue(BaseModel):
    line: int
    kind: Literal["invalid-json", "schema", "duplicate-id"]
    field: str = ""
    message: str


class ValidationReport(BaseModel):
    path: str
    n_records: int
    counts: dict[str, int]
    errors: list[ValidationIssue]

    @computed_field
    @property
    def passed(self) -> bool:
        return len(self.errors) == 0


def _read_lines(path):
    # Lines are decoded by the caller
    with open(path, "rb") as fh:
        for line_number, line in enumerate(fh, start=1):
            if line.strip():
                yield line_number, line


def validate_dataset(path):
    """
    Check every line of a dataset file. Schema problems are reported, not
    raised; only an unreadable file raises.
    """
    errors = []
    counts = {}
    first_line = {}
    n_records = 0
    for line_number, line in _read_lines(path):
        n_records += 1
        try:
            raw = json.loads(line.decode("utf-8"))
        except ValueError as exc:  # also UnicodeDecodeError
            errors.append(ValidationIssue(line=line_number, kind="invalid-json", message=str(exc)))
            continue
        try:
            record = PreferenceRecord.model_validate(raw)
        except ValidationError as exc:
            for error in exc.errors():
                errors.append(
                    ValidationIssue(
                        line=line_number,
                        kind="schema",
                        field=".".join(str(part) for part in error["loc"]),
                        message=error["msg"],
                    )
                )
            continue
        if record.id in first_line:
            errors.append(
                ValidationIssue(
                    line=line_number,
                    kind="duplicate-id",
                    field="id",
                    message=f"id '{record.id}' already used on line {first_line[record.id]}",
                )
            )
            continue
        first_line[record.id] = line_number
        counts[record.domain] = counts.get(record.domain, 0) + 1
    report = ValidationReport(path=str(path), n_records=n_records, counts=counts, errors=errors)
    if not report.passed:
        _log.warning(f"Dataset '{path}' has {len(errors)} problem(s).")
    return report


def load_dataset(path):
    report = validate_dataset(path)
    if not report.passed:
        first = report.errors[0]
        raise DatasetException(
            f"Dataset '{path}' is invalid ({len(report.errors)} problem(s)); first on line {first.line}: "
            f"{first.field} {first.message}".strip()
        )
    return [PreferenceRecord.model_validate_json(line.decode("utf-8")) for _, line in _read_lines(path)]


def save_dataset(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.model_dump_json() + "\n")


class SplitSpec(BaseModel):
    train_fraction: float = 0.80
    test_fraction: float = 0.20
    # Validation records are carved from the training part
    val_fraction_of_train: float = 0.03
    seed: int = 0

    @field_validator("train_fraction", "test_fraction", "val_fraction_of_train")
    @classmethod
    def _validate_fraction(cls, value):
        if not 0 < value < 1:
            raise ValueError("Fractions must lie strictly between 0 and 1.")
        return value

    @model_validator(mode="after")
    def _validate_total(self):
        if not math.isclose(self.train_fraction + self.test_fraction, 1.0):
            raise ValueError("'train_fraction' and 'test_fraction' must add up to 1.")
        return self


class DatasetSplit(BaseModel):
    train: list[PreferenceRecord]
    val: list[PreferenceRecord]
    test: list[PreferenceRecord]


def split_dataset(records, spec=None):
    """
    Seeded shuffle, then test (floor of test_fraction), validation (floor
    of val_fraction_of_train of the rest) and training (remainder) parts.
    """
    spec = SplitSpec() if spec is None else spec
    records = list(records)
    n = len(records)
    if n < MIN_SPLIT_RECORDS:
        raise DatasetException(f"Splitting needs at least {MIN_SPLIT_RECORDS} records, got {n}.")
    order = np.random.default_rng(spec.seed).permutation(n)
    shuffled = [records[i] for i in order]
    nb_test = math.floor(n * spec.test_fraction + 1e-9)
    nb_val = math.floor((n - nb_test) * spec.val_fraction_of_train + 1e-9)
    return DatasetSplit(
        test=shuffled[:nb_test],
        val=shuffled[nb_test:nb_test + nb_val],
        train=shuffled[nb_test + nb_val:],
    )


#
# Prompt templates
#


def load_templates(path=None):
    """Template configuration; the packaged one unless `path` is given."""
    if path is None:
        text = files("avforge").joinpath("data", "prompt_templates.json").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return json.loads(text)


def _substitute(template, substitutions):
    fields = {name for _, name, _, _ in Formatter().parse(template) if name is not None}
    unknown = sorted(fields - set(substitutions))
    if unknown:
        raise TemplateException(f"Template uses unknown placeholder(s): {', '.join(unknown)}")
    return template.format(**substitutions)


def _domain_table(templates, domain):
    try:
        return templates["domains"][domain]
    except KeyError:
        raise ValueError(f"Unknown domain '{domain}'; configured: {', '.join(templates['domains'])}") from None


def render_prompt(level, domain, query, num_paras, templates=None):
    """Instruction for generating the `level` response to `query`, followed by the query."""
    templates = load_templates() if templates is None else templates
    if level not in templates["levels"]:
        raise ValueError(f"Unknown level '{level}'.")
    substitutions = dict(_domain_table(templates, domain), domain=domain, num_paras=num_paras)
    instruction = _substitute(templates["levels"][level], substitutions)
    return f"{instruction}\n\nQuestion: {query}"


def render_query_prompt(domain, persona, templates=None):
    templates = load_templates() if templates is None else templates
    substitutions = dict(_domain_table(templates, domain), domain=domain)
    return f"{_substitute(templates['query'], substitutions)}\n\nPersona: {persona}"


def render_persona_prompt(domain, count, persona=None, templates=None):
    """Root persona prompt, or the related-persona prompt if `persona` is given."""
    templates = load_templates() if templates is None else templates
    substitutions = dict(_domain_table(templates, domain), domain=domain, count=count)
    if persona is None:
        return _substitute(templates["root_personas"], substitutions)
    return f"{_substitute(templates['related_personas'], substitutions)}\n\nGiven Persona: {persona}"


#
# Generation
#


def _generate_text(llm, prompt, what):
    """One retry for empty output; None if both attempts are empty."""
    for attempt in range(2):
        text = llm.generate(prompt).strip()
        if text:
            return text
        _log.warning(f"Empty LLM output for {what} (attempt {attempt + 1} of 2).")
    _log.warning(f"Dropping {what}: LLM output stayed empty.")
    return None


def _parse_pairs(text):
    """Extract (persona, query) pairs from a {"persona1": ..., "query1": ...} object."""
    match = re.search(r"\{.*\}", text, flags=re.DOTALL)
    if match is None:
        raise ValueError("no JSON object in output")
    data = json.loads(match.group(0))
    pairs = []
    index = 1
    while f"persona{index}" in data:
        persona, query = data[f"persona{index}"], data.get(f"query{index}")
        if isinstance(persona, str) and isinstance(query, str) and persona.strip() and query.strip():
            pairs.append((persona.strip(), query.strip()))
        index += 1
    if not pairs:
        raise ValueError("no persona/query pairs in output")
    return pairs


def _generate_pairs(llm, prompt, what):
    for attempt in range(2):
        try:
            return _parse_pairs(llm.generate(prompt))
        except ValueError as exc:
            _log.warning(f"Malformed LLM output for {what} (attempt {attempt + 1} of 2): {exc}")
    _log.warning(f"Dropping {what}.")
    return []


def create_personas(llm, domain, roots=5, depth=1, rounds=3, fanout=5, templates=None):
    """
    Hierarchical persona generation: each round asks for `roots` root
    persona-query pairs and expands every persona `depth` times into
    `fanout` related pairs.

    Returns
    -------
    pairs : list of (persona, query)
    """
    pairs = []
    for round_index in range(rounds):
        frontier = _generate_pairs(
            llm, render_persona_prompt(domain, roots, templates=templates), f"root personas of round {round_index}"
        )[:roots]
        pairs.extend(frontier)
        for level in range(depth):
            expanded = []
            for persona, _ in frontier:
                expanded.extend(
                    _generate_pairs(
                        llm,
                        render_persona_prompt(domain, fanout, persona=persona, templates=templates),
                        f"personas related to '{persona}'",
                    )[:fanout]
                )
            pairs.extend(expanded)
            frontier = expanded
    _log.info(f"Created {len(pairs)} persona-query pairs for domain '{domain}'.")
    return pairs


def _as_seed(item):
    if isinstance(item, str):
        return item, None
    if isinstance(item, dict):
        return item["persona"], item.get("query")
    persona, query = item
    return persona, query


def generate_records(llm, personas, domain, count=None, source="personahub", seed=0, workers=1,
                     templates=None, id_prefix=None):
    """
    Build records from personas: one query call (skipped when the persona
    already comes with a query), then one call per response level. Records
    with empty output after one retry are dropped.

    Parameters
    ----------
    llm : object with `generate(prompt) -> str`
    personas : list
        Persona strings, (persona, query) pairs or {"persona", "query"} dicts.
    domain : str
    count : int
        Use at most this many personas.
    seed : int
        Seed for the per-response paragraph counts.
    """
    templates = load_templates() if templates is None else templates
    seeds = [_as_seed(item) for item in personas]
    if count is not None:
        seeds = seeds[:count]
    # Drawn up front so that results do not depend on scheduling
    lengths = np.random.default_rng(seed).integers(MIN_PARAGRAPHS, MAX_PARAGRAPHS + 1, size=(len(seeds), 3))
    id_prefix = domain if id_prefix is None else id_prefix

    def build(index):
        persona, query = seeds[index]
        if query is None:
            query = _generate_text(llm, render_query_prompt(domain, persona, templates), f"query of persona {index}")
            if query is None:
                return None
        responses = {}
        for j, level in enumerate(LEVELS):
            prompt = render_prompt(level, domain, query, int(lengths[index, j]), templates)
            text = _generate_text(llm, prompt, f"{RESPONSE_FIELDS[level]} response of persona {index}")
            if text is None:
                return None
            responses[RESPONSE_FIELDS[level]] = text
        return PreferenceRecord(
            id=f"{id_prefix}-{index:06d}",
            domain=domain,
            persona=persona,
            query=query,
            responses=Responses(**responses),
            source=source,
        )

    records = [record for record in parallel_map(build, range(len(seeds)), workers) if record is not None]
    _log.info(f"Generated {len(records)} of {len(seeds)} records for domain '{domain}'.")
    return records
