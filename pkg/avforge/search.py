"""
Coefficient sweeps and multi-domain grid search.

A single-domain sweep applies one alignment vector with every coefficient of
a grid and records the preference accuracy of the merged model. A grid
search merges one vector per domain with every coefficient tuple of a
cartesian grid, evaluates every domain's dataset on the merged model and
checks the dominant levels against per-domain targets.

Both write every evaluated cell to an optional JSON-lines journal and skip
journaled cells when restarted.
"""

import itertools
import logging
import math
import os
from typing import Literal, Union

import numpy as np
import xarray as xr
from pydantic import BaseModel, ValidationError, computed_field, field_validator
from tqdm import tqdm

from .editing import MergeSpec, MergeTerm, apply_av, apply_multi, require_compat
from .evaluation import LEVELS, Level, LevelFractions, LevelLogprobs, Verdict, dominant_level, preference_accuracy
from .tensor_store import save_checkpoint
from .utils import parallel_imap

_log = logging.getLogger(__name__)

DEFAULT_START = -1.0
DEFAULT_STOP = 1.0
DEFAULT_STEP = 0.1

# Hierarchical search: coarse pass, then a fine window around the best coarse cells
COARSE_STEP = 0.4
REFINE_WINDOW = 0.2
REFINE_STEP = 0.1
TOP_K = 5


class SearchException(RuntimeError):
    def __init__(self, message, cell=None):
        super().__init__(message)
        self.cell = cell


def coefficient_range(start, stop, step):
    """Values start, start + step, ... up to and including stop (within rounding)."""
    if not all(math.isfinite(x) for x in (start, stop, step)):
        raise ValueError("Grid bounds and step must be finite.")
    if step <= 0:
        raise ValueError(f"Grid step must be positive, got {step}.")
    if stop < start:
        raise ValueError(f"Grid stop {stop} lies below start {start}.")
    nb_values = math.floor((stop - start) / step + 1e-6) + 1
    # Rounding keeps values like 0.30000000000000004 out of journals and reports; + 0.0 turns -0.0 into 0.0
    return [round(start + i * step, 10) + 0.0 for i in range(nb_values)]


def parse_grid(text):
    """Parse "start:stop:step", e.g. "-1:1:0.1"."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"Grid '{text}' is not of the form start:stop:step.")
    try:
        start, stop, step = (float(part) for part in parts)
    except ValueError:
        raise ValueError(f"Grid '{text}' contains a non-numeric bound.") from None
    return coefficient_range(start, stop, step)


class CoefficientGrid(BaseModel):
    # Domain -> coefficients; domain order is the order of the search tuples
    values: dict[str, list[float]]

    @field_validator("values")
    @classmethod
    def _validate_values(cls, value):
        if len(value) == 0:
            raise ValueError("A grid needs at least one domain.")
        for domain, coefficients in value.items():
            if len(coefficients) == 0:
                raise ValueError(f"Grid of domain '{domain}' is empty.")
            if not all(math.isfinite(c) for c in coefficients):
                raise ValueError(f"Grid of domain '{domain}' contains non-finite values.")
            if any(b <= a for a, b in zip(coefficients[:-1], coefficients[1:])):
                raise ValueError(f"Grid of domain '{domain}' must be strictly increasing.")
        return value

    @classmethod
    def default(cls, domains):
        """-1.0 to 1.0 in steps of 0.1 (21 values) for every domain."""
        values = coefficient_range(DEFAULT_START, DEFAULT_STOP, DEFAULT_STEP)
        return cls(values={domain: list(values) for domain in domains})

    @property
    def domains(self):
        return list(self.values)


class SearchPlan(BaseModel):
    domains: list[str]
    sizes: list[int]
    values: list[list[float]]

    @computed_field
    @property
    def cell_count(self) -> int:
        return math.prod(self.sizes)

    def cells(self):
        """Coefficient tuples in odometer order, the last domain varying fastest."""
        return itertools.product(*self.values)


def plan_grid(grid):
    return SearchPlan(
        domains=grid.domains,
        sizes=[len(grid.values[d]) for d in grid.domains],
        values=[grid.values[d] for d in grid.domains],
    )


class TargetSpec(BaseModel):
    targets: dict[str, Level]


class CostModel(BaseModel):
    # Behavior levels per domain
    p: int = 3
    # Number of domains
    D: int = 3
    train_hours_per_run: float = 72.0
    eval_seconds_per_cell: float = 60.0

    @field_validator("p", "D", "train_hours_per_run", "eval_seconds_per_cell")
    @classmethod
    def _validate_positive(cls, value):
        if value <= 0:
            raise ValueError("Cost model parameters must be positive.")
        return value


class CostReport(BaseModel):
    joint_training_runs: int
    av_training_runs: int
    training_reduction: float
    joint_hours: float
    av_training_hours: float
    cell_count: int
    search_hours: float
    speedup: float


def estimate_cost(model=None, grid=None):
    """
    Training and search budget of alignment-vector editing against training
    one model per combination of behavior levels. Without a grid, the
    default 21-value grid is assumed for each of the D domains.
    """
    model = CostModel() if model is None else model
    if grid is None:
        cell_count = len(coefficient_range(DEFAULT_START, DEFAULT_STOP, DEFAULT_STEP)) ** model.D
    else:
        cell_count = plan_grid(grid).cell_count
    joint_training_runs = model.p ** model.D
    joint_hours = joint_training_runs * model.train_hours_per_run
    search_hours = cell_count * model.eval_seconds_per_cell / 3600
    return CostReport(
        joint_training_runs=joint_training_runs,
        av_training_runs=model.D,
        training_reduction=joint_training_runs / model.D,
        joint_hours=joint_hours,
        av_training_hours=model.D * model.train_hours_per_run,
        cell_count=cell_count,
        search_hours=search_hours,
        speedup=joint_hours / search_hours,
    )


#
# Journal
#


class JournalEntry(BaseModel):
    cell: list[float]
    fractions: dict[str, LevelFractions]
    mean_logprobs: dict[str, LevelLogprobs] = {}
    satisfied: Union[bool, None] = None


class SearchJournal:
    """
    Append-only JSON-lines record of evaluated cells. Only one process may
    append to a journal at a time.
    """

    def __init__(self, path):
        self.path = os.fspath(path)

    def load(self):
        """
        Entries written so far. A malformed last line (an interrupted write)
        is cut off; malformed lines elsewhere are an error.
        """
        if not os.path.exists(self.path):
            return []
        with open(self.path, "rb") as fh:
            data = fh.read()
        if data and not data.endswith(b"\n"):
            data += b"\n"
            # Complete the last line (or cut it off below) so that appends start on a fresh line
            with open(self.path, "ab") as fh:
                fh.write(b"\n")
        lines = data.split(b"\n")
        entries = []
        valid_length = 0
        for line_number, line in enumerate(lines, start=1):
            if line.strip():
                try:
                    entries.append(JournalEntry.model_validate_json(line))
                except ValidationError as exc:
                    if any(rest.strip() for rest in lines[line_number:]):
                        raise SearchException(f"Journal '{self.path}' is corrupt in line {line_number}: {exc}")
                    _log.warning(f"Dropping incomplete last line {line_number} of journal '{self.path}'.")
                    with open(self.path, "r+b") as fh:
                        fh.truncate(valid_length)
                    break
            valid_length += len(line) + 1
        return entries

    def append(self, entry):
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(entry.model_dump_json() + "\n")
            fh.flush()


def _evaluate_all(cells, evaluate, journal, workers, desc):
    """
    Evaluate cells (tuples) not found in the journal and return journal
    entries for all of them in input order. The caller's thread is the only
    journal writer.
    """
    done = {}
    if journal is not None:
        for entry in journal.load():
            done[tuple(entry.cell)] = entry
    pending = [cell for cell in cells if cell not in done]
    if len(pending) < len(cells):
        _log.warning(f"Resuming from journal: skipping {len(cells) - len(pending)} evaluated cell(s).")
    results = parallel_imap(evaluate, pending, workers)
    for cell, entry in zip(pending, tqdm(results, total=len(pending), desc=desc, disable=None)):
        if journal is not None:
            journal.append(entry)
        done[cell] = entry
    return [done[cell] for cell in cells]


#
# Single-domain sweep
#


class SweepRow(BaseModel):
    coefficient: float
    fractions: LevelFractions
    dominant: Verdict
    mean_logprobs: LevelLogprobs


class SweepReport(BaseModel):
    domain: str
    rows: list[SweepRow]

    def to_dataset(self):
        coefficients = [row.coefficient for row in self.rows]
        fractions = np.array([[getattr(row.fractions, level) for level in LEVELS] for row in self.rows])
        logprobs = np.array([[getattr(row.mean_logprobs, level) for level in LEVELS] for row in self.rows])
        dataset = xr.Dataset(
            {
                "fraction": (("coefficient", "level"), fractions),
                "mean_logprob": (("coefficient", "level"), logprobs),
                "dominant": ("coefficient", np.array([row.dominant for row in self.rows])),
            },
            coords={"coefficient": coefficients, "level": list(LEVELS)},
        )
        dataset.fraction.attrs["long_name"] = "preference accuracy"
        dataset.mean_logprob.attrs["long_name"] = "corpus mean of per-sample mean log-probabilities"
        dataset.attrs["domain"] = self.domain
        return dataset


def sweep_lambda(base, av, grid, records, score_factory, journal=None, workers=1, keep_dir=None):
    """
    Preference accuracy of `base + coefficient * av` for every coefficient
    in `grid`.

    Parameters
    ----------
    base : TensorMap
    av : AlignmentVector
    grid : list of float
    records : list of PreferenceRecord
    score_factory : callable
        Turns merged weights into a scorer.
    journal : SearchJournal
        Optional; journaled coefficients are not evaluated again.
    workers : int
    keep_dir : str
        If given, every merged checkpoint is saved there.

    Returns
    -------
    report : SweepReport
    """
    grid = [float(c) for c in grid]
    if len(grid) == 0:
        raise ValueError("The coefficient grid is empty.")
    require_compat(base, av.delta, f"Base and alignment vector '{av.domain}'")
    records = list(records)
    domain = av.domain

    def evaluate(cell):
        (coefficient,) = cell
        try:
            merged = apply_av(base, av, coefficient, workers=workers)
            if keep_dir is not None:
                save_checkpoint(merged, os.path.join(keep_dir, f"{domain}_{coefficient:+.2f}.safetensors"))
            report = preference_accuracy(score_factory(merged), records, domain=domain, workers=workers)
        except Exception as exc:
            raise SearchException(f"Evaluation at coefficient {coefficient} failed: {exc}", cell) from exc
        return JournalEntry(
            cell=[coefficient],
            fractions={domain: report.fractions},
            mean_logprobs={domain: report.mean_logprobs},
        )

    # Sweeps are sequential; `workers` parallelizes within a merge and an evaluation
    entries = _evaluate_all([(c,) for c in grid], evaluate, journal, 1, f"sweep {domain}")
    rows = []
    for coefficient, entry in zip(grid, entries):
        if domain not in entry.fractions or domain not in entry.mean_logprobs:
            raise SearchException(f"Journal entry for coefficient {coefficient} lacks domain '{domain}'.",
                                  (coefficient,))
        rows.append(
            SweepRow(
                coefficient=coefficient,
                fractions=entry.fractions[domain],
                dominant=dominant_level(entry.fractions[domain]),
                mean_logprobs=entry.mean_logprobs[domain],
            )
        )
    return SweepReport(domain=domain, rows=rows)


#
# Multi-domain grid search
#


class CellResult(BaseModel):
    cell: list[float]
    fractions: dict[str, LevelFractions]
    dominant: dict[str, Verdict]
    satisfied: bool
    # Sum over domains of the fraction of the targeted level
    objective: float


class SearchResult(BaseModel):
    mode: Literal["exhaustive", "hierarchical"]
    domains: list[str]
    targets: dict[str, Level]
    cells: list[CellResult]
    satisfying: list[list[float]]
    best: Union[CellResult, None] = None

    def refilter(self, targets):
        """The same evaluated cells judged against different targets."""
        targets = _target_map(targets, self.domains)
        cells = [_cell_result(cell.cell, cell.fractions, self.domains, targets) for cell in self.cells]
        return _assemble(self.mode, self.domains, targets, cells)

    def to_dataset(self):
        """
        Cells on the grid spanned by all evaluated coefficient values;
        cells that were not evaluated are NaN (fractions, objective) or -1
        (satisfied).
        """
        axes = [sorted({cell.cell[i] for cell in self.cells}) for i in range(len(self.domains))]
        index = [{value: j for j, value in enumerate(axis)} for axis in axes]
        shape = tuple(len(axis) for axis in axes)
        fraction = np.full(shape + (len(self.domains), len(LEVELS)), np.nan)
        objective = np.full(shape, np.nan)
        satisfied = np.full(shape, -1, dtype=np.int8)
        for cell in self.cells:
            position = tuple(index[i][value] for i, value in enumerate(cell.cell))
            for k, domain in enumerate(self.domains):
                fraction[position + (k,)] = [getattr(cell.fractions[domain], level) for level in LEVELS]
            objective[position] = cell.objective
            satisfied[position] = int(cell.satisfied)
        dims = tuple(f"coefficient_{domain}" for domain in self.domains)
        dataset = xr.Dataset(
            {
                "fraction": (dims + ("domain", "level"), fraction),
                "objective": (dims, objective),
                "satisfied": (dims, satisfied),
            },
            coords=dict(zip(dims, axes), domain=list(self.domains), level=list(LEVELS)),
        )
        dataset.satisfied.attrs["flag_values"] = np.array([-1, 0, 1], dtype=np.int8)
        dataset.satisfied.attrs["flag_meanings"] = "not_evaluated unsatisfied satisfied"
        dataset.attrs["mode"] = self.mode
        dataset.attrs["targets"] = ",".join(f"{d}={self.targets[d]}" for d in self.domains)
        return dataset


def _target_map(targets, domains):
    if isinstance(targets, TargetSpec):
        targets = targets.targets
    targets = dict(targets)
    if set(targets) != set(domains):
        raise ValueError(f"Targets are given for {sorted(targets)}, but the searched domains are {sorted(domains)}.")
    for domain, level in targets.items():
        if level not in LEVELS:
            raise ValueError(f"Target of domain '{domain}' must be one of {', '.join(LEVELS)}, got '{level}'.")
    return targets


def _cell_result(cell, fractions, domains, targets):
    dominant = {domain: dominant_level(fractions[domain]) for domain in domains}
    return CellResult(
        cell=list(cell),
        fractions=fractions,
        dominant=dominant,
        satisfied=all(dominant[domain] == targets[domain] for domain in domains),
        objective=math.fsum(getattr(fractions[domain], targets[domain]) for domain in domains),
    )


def _assemble(mode, domains, targets, cells):
    satisfying = [cell for cell in cells if cell.satisfied]
    best = None
    for cell in satisfying:
        # Strict comparison: the first cell wins ties
        if best is None or cell.objective > best.objective:
            best = cell
    return SearchResult(
        mode=mode,
        domains=domains,
        targets=targets,
        cells=cells,
        satisfying=[cell.cell for cell in satisfying],
        best=best,
    )


def _score_cell(base, avs, domains, cell, datasets, score_factory, workers):
    spec = MergeSpec(
        base=base,
        terms=[MergeTerm(vector=avs[domain], coefficient=c) for domain, c in zip(domains, cell)],
    )
    scorer = score_factory(apply_multi(spec, workers=workers))
    reports = {
        domain: preference_accuracy(scorer, datasets[domain], domain=domain, workers=workers) for domain in domains
    }
    return JournalEntry(
        cell=list(cell),
        fractions={domain: report.fractions for domain, report in reports.items()},
        mean_logprobs={domain: report.mean_logprobs for domain, report in reports.items()},
    )


def evaluate_cell(base, avs, cell, datasets, score_factory, targets, workers=1):
    """
    Merge the alignment vectors with the coefficients of one cell and
    evaluate every domain's dataset. `avs`, `datasets` and `targets` are
    keyed by domain; the coefficients in `cell` follow the order of `avs`.
    """
    domains = list(avs)
    if len(cell) != len(domains):
        raise ValueError(f"Cell {list(cell)} has {len(cell)} coefficients for {len(domains)} domains.")
    targets = _target_map(targets, domains)
    entry = _score_cell(base, avs, domains, tuple(cell), datasets, score_factory, workers)
    return _cell_result(entry.cell, entry.fractions, domains, targets)


def _refine_cells(cell, grid, domains):
    axes = []
    for value, domain in zip(cell, domains):
        low, high = grid.values[domain][0], grid.values[domain][-1]
        start = round(max(low, value - REFINE_WINDOW), 10)
        stop = round(min(high, value + REFINE_WINDOW), 10)
        axes.append(coefficient_range(start, stop, REFINE_STEP))
    return itertools.product(*axes)


def grid_search(base, avs, grid, targets, datasets, score_factory, mode="exhaustive", journal=None, workers=1):
    """
    Search coefficient tuples whose merged model shows the targeted
    dominant level in every domain.

    Parameters
    ----------
    base : TensorMap
    avs : dict
        Domain -> AlignmentVector.
    grid : CoefficientGrid
        Its domain order defines the order of the coefficients in a cell.
    targets : TargetSpec or dict
        Domain -> targeted dominant level.
    datasets : dict
        Domain -> list of PreferenceRecord.
    score_factory : callable
        Turns merged weights into a scorer.
    mode : "exhaustive" or "hierarchical"
        Hierarchical mode evaluates a coarse grid (step 0.4) between the grid
        bounds, then a window of +/- 0.2 at step 0.1 around the five best
        coarse cells. It is sound but may miss satisfying cells.
    journal : SearchJournal
        Optional; journaled cells are not evaluated again.
    workers : int
        Cells evaluated in parallel.

    Returns
    -------
    result : SearchResult
    """
    domains = grid.domains
    if set(avs) != set(domains) or set(datasets) != set(domains):
        raise ValueError(
            f"Alignment vectors ({sorted(avs)}), datasets ({sorted(datasets)}) and grid ({sorted(domains)}) "
            f"must cover the same domains."
        )
    if mode not in ("exhaustive", "hierarchical"):
        raise ValueError(f"Unknown search mode '{mode}'.")
    targets = _target_map(targets, domains)
    for domain in domains:
        require_compat(base, avs[domain].delta, f"Base and alignment vector '{domain}'")
    datasets = {domain: list(records) for domain, records in datasets.items()}

    def evaluate(cell):
        try:
            entry = _score_cell(base, avs, domains, cell, datasets, score_factory, 1)
        except Exception as exc:
            raise SearchException(f"Evaluation of cell {list(cell)} failed: {exc}", cell) from exc
        entry.satisfied = _cell_result(cell, entry.fractions, domains, targets).satisfied
        return entry

    def run(cells, desc):
        entries = _evaluate_all(cells, evaluate, journal, workers, desc)
        return [_cell_result(entry.cell, entry.fractions, domains, targets) for entry in entries]

    if mode == "exhaustive":
        cells = run(list(plan_grid(grid).cells()), "search")
    else:
        coarse = CoefficientGrid(
            values={
                domain: coefficient_range(grid.values[domain][0], grid.values[domain][-1], COARSE_STEP)
                for domain in domains
            }
        )
        cells = run(list(plan_grid(coarse).cells()), "coarse search")
        ranked = sorted(cells, key=lambda c: (c.satisfied, c.objective), reverse=True)
        seen = {tuple(c.cell) for c in cells}
        refined = set()
        for top in ranked[:TOP_K]:
            refined.update(_refine_cells(top.cell, grid, domains))
        cells += run(sorted(refined - seen), "refined search")
        _log.info(f"Hierarchical search evaluated {len(cells)} of {plan_grid(grid).cell_count} grid cells.")

    result = _assemble(mode, domains, targets, cells)
    _log.info(f"Search found {len(result.satisfying)} satisfying cell(s) among {len(cells)}.")
    return result

